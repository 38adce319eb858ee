"""ResNeXt-style 1-D feature extractor with per-task adapters and heads.

Layout of the network for a window ``X`` of shape ``(T, F)``::

    stem      kernel-3 conv F -> stem_channels, ReLU
    stages    ResNeXt blocks; the first block of a stage carries its stride
    pool      global average over time -> C-vector
    adapter   F_i = relu(W_i pooled + b_i)             (one per task)
    head      softmax(W F_i + b)  or  W F_i + b        (classification / regression)

A block is ``relu(expand(relu(grouped(relu(reduce(x))))) + shortcut(x))`` where
``grouped`` is a kernel-3 convolution with ``cardinality`` groups and the
shortcut is the identity unless the channel count or stride changes, in which
case it is a strided 1x1 convolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from .nn import ConvSpec, Rng

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass(frozen=True)
class StageConfig:
    blocks: int
    out_channels: int
    stride: int = 1


def _default_stages() -> tuple[StageConfig, ...]:
    return (StageConfig(2, 128, 2), StageConfig(2, 128, 2))


@dataclass(frozen=True)
class ExtractorConfig:
    in_features: int
    stem_channels: int = 64
    stages: tuple[StageConfig, ...] = field(default_factory=_default_stages)
    cardinality: int = 8
    bottleneck_width: int = 16

    def __post_init__(self):
        object.__setattr__(
            self, "stages", tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages)
        )
        self.validate()

    def validate(self):
        g = self.cardinality
        if self.in_features < 1:
            raise ValueError(f"in_features must be >= 1, got {self.in_features}")
        if self.stem_channels < 1:
            raise ValueError(f"stem_channels must be >= 1, got {self.stem_channels}")
        if g < 1:
            raise ValueError(f"cardinality must be >= 1, got {g}")
        if self.bottleneck_width < 1:
            raise ValueError(f"bottleneck_width must be >= 1, got {self.bottleneck_width}")
        if not self.stages:
            raise ValueError("stages must not be empty")
        for i, st in enumerate(self.stages):
            if st.blocks < 1:
                raise ValueError(f"stages[{i}].blocks must be >= 1, got {st.blocks}")
            if st.stride not in (1, 2):
                raise ValueError(f"stages[{i}].stride must be 1 or 2, got {st.stride}")
            if st.out_channels < 1 or st.out_channels % g:
                raise ValueError(
                    f"stages[{i}].out_channels={st.out_channels} must be a positive multiple "
                    f"of cardinality={g}"
                )

    @property
    def final_channels(self) -> int:
        return self.stages[-1].out_channels

    @property
    def downsample(self) -> int:
        return math.prod(st.stride for st in self.stages)

    def output_length(self, t: int) -> int:
        if t < self.downsample or t % self.downsample:
            raise ValueError(
                f"window length {t} must be a positive multiple of the total stride "
                f"{self.downsample} (minimum T = {self.downsample})"
            )
        return t // self.downsample

    def blocks(self) -> list[tuple[str, int, int, int]]:
        """``(prefix, in_channels, out_channels, stride)`` for every block, in order."""
        out = []
        c_in = self.stem_channels
        for i, st in enumerate(self.stages):
            for j in range(st.blocks):
                stride = st.stride if j == 0 else 1
                out.append((f"stage{i}.block{j}", c_in, st.out_channels, stride))
                c_in = st.out_channels
        return out

    def conv_specs(self) -> dict[str, ConvSpec]:
        """Every convolution of the extractor keyed by parameter prefix."""
        width = self.cardinality * self.bottleneck_width
        specs = {"stem": ConvSpec(self.in_features, self.stem_channels, kernel=3, padding=1)}
        for prefix, c_in, c_out, stride in self.blocks():
            specs[f"{prefix}.reduce"] = ConvSpec(c_in, width)
            specs[f"{prefix}.grouped"] = ConvSpec(
                width, width, kernel=3, stride=stride, padding=1, groups=self.cardinality
            )
            specs[f"{prefix}.expand"] = ConvSpec(width, c_out)
            if stride != 1 or c_in != c_out:
                specs[f"{prefix}.shortcut"] = ConvSpec(c_in, c_out, stride=stride)
        return specs


@dataclass(frozen=True)
class TaskSpec:
    """One prediction task.

    ``target`` names the label the data pipeline produces for the task:
    ``"direction"`` (classification, K=2) or ``"log_return"`` (regression).
    ``alpha=None`` means "share the weight equally", resolved to 1/N.
    """

    id: str
    kind: str
    num_classes: int | None = None
    alpha: float | None = None
    adapter_dim: int = 64
    target: str | None = None
    horizon: int = 1

    def __post_init__(self):
        if not self.id:
            raise ValueError("task id must be a non-empty string")
        if self.kind == CLASSIFICATION:
            k = 2 if self.num_classes is None else self.num_classes
            object.__setattr__(self, "num_classes", k)
            if k < 2:
                raise ValueError(f"task {self.id!r}: num_classes must be >= 2, got {k}")
            if self.target is None:
                object.__setattr__(self, "target", "direction")
        elif self.kind == REGRESSION:
            if self.num_classes not in (None, 1):
                raise ValueError(f"task {self.id!r}: regression tasks take no num_classes")
            object.__setattr__(self, "num_classes", None)
            if self.target is None:
                object.__setattr__(self, "target", "log_return")
        else:
            raise ValueError(f"task {self.id!r}: kind must be {CLASSIFICATION!r} or {REGRESSION!r}")
        if self.alpha is not None and (not math.isfinite(self.alpha) or self.alpha < 0):
            raise ValueError(f"task {self.id!r}: alpha must be finite and >= 0, got {self.alpha}")
        if self.adapter_dim < 1:
            raise ValueError(f"task {self.id!r}: adapter_dim must be >= 1, got {self.adapter_dim}")
        if self.horizon < 1:
            raise ValueError(f"task {self.id!r}: horizon must be >= 1, got {self.horizon}")

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.kind == CLASSIFICATION else 1


def validate_tasks(tasks: Sequence[TaskSpec]) -> None:
    if not tasks:
        raise ValueError("at least one task is required")
    ids = [t.id for t in tasks]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ValueError(f"duplicate task ids: {dup}")
    alphas = resolve_alphas(tasks)
    if sum(alphas.values()) <= 0:
        raise ValueError("task alphas must not all be zero")


def resolve_alphas(tasks: Sequence[TaskSpec], overrides: Mapping[str, float] | None = None) -> dict[str, float]:
    n = len(tasks)
    out = {t.id: (1.0 / n if t.alpha is None else float(t.alpha)) for t in tasks}
    for k, v in (overrides or {}).items():
        if k not in out:
            raise KeyError(f"alpha override for unknown task {k!r}")
        out[k] = float(v)
    return out


def multi_task_loss(per_task: Iterable[tuple[float, float]]) -> float:
    """Weighted sum ``sum(alpha_i * L_i)`` over ``(L_i, alpha_i)`` pairs."""
    pairs = list(per_task)
    if not pairs:
        raise ValueError("need at least one task loss")
    if any(a < 0 for _, a in pairs):
        raise ValueError("alphas must be >= 0")
    if sum(a for _, a in pairs) <= 0:
        raise ValueError("alphas must not all be zero")
    total = 0.0
    for loss, a in pairs:
        total += a * loss
    return total


# ---------------------------------------------------------------------------
# the network


@dataclass
class MultiTaskNet:
    config: ExtractorConfig
    tasks: tuple[TaskSpec, ...]
    params: dict[str, np.ndarray]

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self._specs = self.config.conv_specs()

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(f"unknown task id {task_id!r}")

    def task_param_names(self, task_id: str) -> list[str]:
        self.task(task_id)
        return [k for k in self.params if k.startswith(f"task.{task_id}.")]

    def trunk_param_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("task.")]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "MultiTaskNet":
        return MultiTaskNet(self.config, self.tasks, {k: v.copy() for k, v in self.params.items()})

    # -- forward pieces ----------------------------------------------------

    def extract_features(self, X) -> np.ndarray:
        """``(T, F) -> (T', C)`` or batched ``(N, T, F) -> (N, T', C)``."""
        return _extract_forward(self, X)[0]

    def task_adapter(self, task_id: str, f_shared) -> np.ndarray:
        self.task(task_id)
        pooled = nn.global_avg_pool(f_shared)
        p = self.params
        return nn.relu(nn.dense(pooled, p[f"task.{task_id}.adapter.w"], p[f"task.{task_id}.adapter.b"]))

    def head_forward(self, task_id: str, f_i) -> np.ndarray:
        """Class probabilities for classification; a scalar (per sample) for regression."""
        task = self.task(task_id)
        p = self.params
        out = nn.dense(f_i, p[f"task.{task_id}.head.w"], p[f"task.{task_id}.head.b"])
        if task.kind == CLASSIFICATION:
            return nn.softmax(out)
        return out[..., 0]

    def forward(self, X) -> dict[str, np.ndarray]:
        f_shared = self.extract_features(X)
        return {t.id: self.head_forward(t.id, self.task_adapter(t.id, f_shared)) for t in self.tasks}

    def predict(self, X, batch_size: int = 512) -> dict[str, np.ndarray]:
        """Batched forward over ``(N, T, F)`` returning per-task outputs stacked along N."""
        X = np.asarray(X, dtype=nn.DTYPE)
        chunks = [self.forward(X[i : i + batch_size]) for i in range(0, len(X), batch_size)]
        return {t.id: np.concatenate([c[t.id] for c in chunks]) for t in self.tasks}


def build_model(cfg: ExtractorConfig, tasks: Sequence[TaskSpec], rng: Rng) -> MultiTaskNet:
    """Create a network with uniform +-sqrt(1/fan_in) weights and zero biases.

    Draws come from ``rng.stream("init")`` in parameter-name order.
    """
    cfg.validate()
    tasks = tuple(tasks)
    validate_tasks(tasks)
    gen = rng.stream("init")
    params: dict[str, np.ndarray] = {}

    def add(prefix: str, wshape: tuple[int, ...], fan_in: int, n_out: int):
        bound = math.sqrt(1.0 / fan_in)
        params[f"{prefix}.w"] = gen.uniform(-bound, bound, size=wshape)
        params[f"{prefix}.b"] = np.zeros(n_out)

    for prefix, spec in cfg.conv_specs().items():
        add(prefix, spec.weight_shape, spec.weight_shape[1] * spec.kernel, spec.out_channels)
    c = cfg.final_channels
    for t in tasks:
        add(f"task.{t.id}.adapter", (t.adapter_dim, c), c, t.adapter_dim)
        add(f"task.{t.id}.head", (t.out_dim, t.adapter_dim), t.adapter_dim, t.out_dim)
    return MultiTaskNet(cfg, tasks, params)


# ---------------------------------------------------------------------------
# whole-model forward/backward


def _extract_forward(net: MultiTaskNet, X):
    X = np.asarray(X, dtype=nn.DTYPE)
    cfg = net.config
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != cfg.in_features:
        raise nn.ShapeError(f"expected input (N, T, {cfg.in_features}), got {X.shape}")
    cfg.output_length(X.shape[1])
    p, specs = net.params, net._specs

    h, stem_cache = nn.conv1d_grouped_forward(X, p["stem.w"], p["stem.b"], specs["stem"])
    x = nn.relu(h)
    caches = [("stem", h, stem_cache)]
    for prefix, *_ in cfg.blocks():
        r_pre, c1 = nn.conv1d_grouped_forward(x, p[f"{prefix}.reduce.w"], p[f"{prefix}.reduce.b"], specs[f"{prefix}.reduce"])
        r = nn.relu(r_pre)
        g_pre, c2 = nn.conv1d_grouped_forward(r, p[f"{prefix}.grouped.w"], p[f"{prefix}.grouped.b"], specs[f"{prefix}.grouped"])
        g = nn.relu(g_pre)
        e, c3 = nn.conv1d_grouped_forward(g, p[f"{prefix}.expand.w"], p[f"{prefix}.expand.b"], specs[f"{prefix}.expand"])
        if f"{prefix}.shortcut" in specs:
            s, c4 = nn.conv1d_grouped_forward(x, p[f"{prefix}.shortcut.w"], p[f"{prefix}.shortcut.b"], specs[f"{prefix}.shortcut"])
        else:
            s, c4 = x, None
        z = e + s
        x = nn.relu(z)
        caches.append((prefix, (r_pre, g_pre, z), (c1, c2, c3, c4)))
    return (x[0] if squeeze else x), caches


def _extract_backward(net: MultiTaskNet, dF: np.ndarray, caches, grads: dict) -> None:
    for prefix, (r_pre, g_pre, z), (c1, c2, c3, c4) in reversed(caches[1:]):
        dz = nn.relu_backward(dF, z)
        dg, grads[f"{prefix}.expand.w"], grads[f"{prefix}.expand.b"] = nn.conv1d_grouped_backward(dz, c3)
        dr, grads[f"{prefix}.grouped.w"], grads[f"{prefix}.grouped.b"] = nn.conv1d_grouped_backward(
            nn.relu_backward(dg, g_pre), c2
        )
        dx, grads[f"{prefix}.reduce.w"], grads[f"{prefix}.reduce.b"] = nn.conv1d_grouped_backward(
            nn.relu_backward(dr, r_pre), c1
        )
        if c4 is None:
            dF = dx + dz
        else:
            ds, grads[f"{prefix}.shortcut.w"], grads[f"{prefix}.shortcut.b"] = nn.conv1d_grouped_backward(dz, c4)
            dF = dx + ds
    _, h, stem_cache = caches[0]
    _, grads["stem.w"], grads["stem.b"] = nn.conv1d_grouped_backward(nn.relu_backward(dF, h), stem_cache)


def loss_and_grads(
    net: MultiTaskNet,
    X,
    labels: Mapping[str, np.ndarray],
    alphas: Mapping[str, float],
) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """Batch loss ``sum_i alpha_i * mean_batch(L_i)`` and its gradient for every parameter.

    Tasks with ``alpha == 0`` are skipped: they need no labels and their
    parameters get exact zero gradients. Returns ``(L, grads, per_task_loss)``.
    """
    X = np.asarray(X, dtype=nn.DTYPE)
    if X.ndim != 3 or len(X) == 0:
        raise nn.ShapeError(f"expected a nonempty (N, T, F) batch, got shape {X.shape}")
    for t in net.tasks:
        if t.id not in alphas:
            raise KeyError(f"no alpha given for task {t.id!r}")
    if sum(alphas[t.id] for t in net.tasks) <= 0:
        raise ValueError("alphas must not all be zero")

    F, caches = _extract_forward(net, X)
    n, t_prime, _ = F.shape
    pooled = F.mean(axis=1)
    dpooled = np.zeros_like(pooled)
    p = net.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    total = 0.0
    per_task: dict[str, float] = {}
    active = False
    for task in net.tasks:
        a = float(alphas[task.id])
        if a == 0.0:
            continue
        if task.id not in labels:
            raise KeyError(f"missing labels for task {task.id!r} (alpha={a})")
        y = np.asarray(labels[task.id])
        if len(y) != n:
            raise nn.ShapeError(f"task {task.id!r}: {len(y)} labels for a batch of {n}")
        pre = f"task.{task.id}"
        h = nn.dense(pooled, p[f"{pre}.adapter.w"], p[f"{pre}.adapter.b"])
        fi = nn.relu(h)
        out = nn.dense(fi, p[f"{pre}.head.w"], p[f"{pre}.head.b"])
        if task.kind == CLASSIFICATION:
            loss, _, dout = nn.softmax_cross_entropy(out, y.astype(np.int64))
        else:
            pred = out[:, 0]
            loss = nn.mse(pred, y)
            dout = nn.mse_backward(pred, y)[:, None]
        per_task[task.id] = loss
        total += a * loss
        active = True
        dout = a * dout
        dfi, grads[f"{pre}.head.w"], grads[f"{pre}.head.b"] = nn.dense_backward(dout, fi, p[f"{pre}.head.w"])
        dp, grads[f"{pre}.adapter.w"], grads[f"{pre}.adapter.b"] = nn.dense_backward(
            nn.relu_backward(dfi, h), pooled, p[f"{pre}.adapter.w"]
        )
        dpooled += dp
    assert active
    dF = nn.global_avg_pool_backward(dpooled, t_prime)
    _extract_backward(net, dF, caches, grads)
    return total, grads, per_task


def stack_samples(batch) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Stack a list of samples into ``(X, labels)`` arrays."""
    if not batch:
        raise ValueError("batch must not be empty")
    X = np.stack([np.asarray(s.X, dtype=nn.DTYPE) for s in batch])
    keys = set(batch[0].labels)
    labels = {k: np.array([s.labels[k] for s in batch if k in s.labels]) for k in keys}
    return X, labels


def backward_all(net: MultiTaskNet, batch, alphas: Mapping[str, float]):
    """Mean-over-batch joint loss and gradients for a list of samples."""
    X, labels = stack_samples(batch)
    for t in net.tasks:
        if alphas.get(t.id, 0.0) > 0:
            missing = sum(1 for s in batch if t.id not in s.labels)
            if missing:
                raise KeyError(f"{missing} samples lack a label for weighted task {t.id!r}")
    loss, grads, _ = loss_and_grads(net, X, labels, alphas)
    return loss, grads
