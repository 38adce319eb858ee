"""Adam, step-decay learning rate, phased training and checkpoints.

Training runs in phases. Each task is first pretrained on its own loss
(weights one-hot on that task) in task order, then all tasks are trained
jointly under the configured weights. Every phase starts from a fresh Adam
state and counts its epochs from 0 for the learning-rate schedule; random
streams (``shuffle`` and ``augment``) continue across phases.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import container
from .data import AugmentPolicy, Dataset, augment_batch, task_to_dict
from .evaluation import evaluate_arrays
from .model import (
    ExtractorConfig,
    MultiTaskNet,
    StageConfig,
    TaskSpec,
    build_model,
    loss_and_grads,
    resolve_alphas,
)
from .nn import Rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GCMT"


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            0,
            beta1,
            beta2,
            eps,
        )


def adam_step(params: dict, grads: Mapping, state: AdamState, lr: float):
    """Bias-corrected Adam update, applied to ``params`` and ``state`` in place."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise KeyError("params, grads and optimiser state must have identical keys")
    for k in params:
        if grads[k].shape != params[k].shape or state.m[k].shape != params[k].shape:
            raise ValueError(f"shape mismatch for {k!r}: param {params[k].shape}, grad {grads[k].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 10
    batch_size: int = 32
    pretrain_epochs: int = 3
    joint_epochs: int = 30
    seed: int = 0
    alphas: Mapping[str, float] | None = None
    freeze_trunk_in_pretrain: bool = False
    pretrain_order: tuple[str, ...] | None = None
    augment: AugmentPolicy | None = field(default_factory=AugmentPolicy)
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if not (self.base_lr > 0 and math.isfinite(self.base_lr)):
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.pretrain_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if isinstance(self.augment, Mapping):
            object.__setattr__(self, "augment", AugmentPolicy(**self.augment))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = None if self.augment is None else asdict(self.augment)
        d["alphas"] = None if self.alphas is None else dict(self.alphas)
        d["pretrain_order"] = None if self.pretrain_order is None else list(self.pretrain_order)
        return d


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * cfg.decay_factor ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------------------
# trainer


@dataclass
class Phase:
    name: str  # "pretrain" or "joint"
    task_id: str | None
    epochs: int


class Trainer:
    """Runs the phase schedule epoch by epoch; resumable at epoch boundaries."""

    def __init__(
        self,
        net: MultiTaskNet,
        data: Dataset,
        cfg: TrainConfig,
        rng: Rng | None = None,
        phases: Sequence[Phase] | None = None,
        on_epoch: Callable[[dict], None] | None = None,
    ):
        self.net = net
        self.data = data
        self.cfg = cfg
        self.rng = rng if rng is not None else Rng(cfg.seed)
        self.phases = list(phases) if phases is not None else default_phases(net, cfg)
        self.phase_idx = 0
        self.epoch = 0
        self.adam: AdamState | None = None
        self.history: list[dict] = []
        self.on_epoch = on_epoch
        if cfg.augment is not None and cfg.augment.crop_slack > data.slack:
            raise ValueError(
                f"augment.crop_slack={cfg.augment.crop_slack} exceeds the dataset's slack rows ({data.slack})"
            )
        if len(data.splits["train"]) == 0:
            raise ValueError("training split is empty")
        self._alphas = resolve_alphas(net.tasks, cfg.alphas)
        for t in net.tasks:
            if self._alphas[t.id] > 0 and t.id not in data.labels:
                raise KeyError(f"dataset has no labels for weighted task {t.id!r}")

    @property
    def done(self) -> bool:
        self._skip_empty()
        return self.phase_idx >= len(self.phases)

    def _skip_empty(self):
        while self.phase_idx < len(self.phases) and self.epoch >= self.phases[self.phase_idx].epochs:
            self.phase_idx += 1
            self.epoch = 0
            self.adam = None

    def phase_alphas(self, phase: Phase) -> dict[str, float]:
        if phase.name == "pretrain":
            return {t.id: (1.0 if t.id == phase.task_id else 0.0) for t in self.net.tasks}
        return dict(self._alphas)

    def run(self, max_epochs: int | None = None) -> list[dict]:
        """Run up to ``max_epochs`` epochs (all remaining when None)."""
        ran = 0
        while not self.done and (max_epochs is None or ran < max_epochs):
            self.run_epoch()
            ran += 1
        return self.history

    def run_epoch(self) -> dict:
        self._skip_empty()
        phase = self.phases[self.phase_idx]
        cfg, net, data = self.cfg, self.net, self.data
        if self.adam is None:
            self.adam = AdamState.zeros(net.params, cfg.beta1, cfg.beta2, cfg.eps_adam)
        alphas = self.phase_alphas(phase)
        lr = lr_at(self.epoch, cfg)
        frozen = set(net.trunk_param_names()) if (phase.name == "pretrain" and cfg.freeze_trunk_in_pretrain) else set()
        X_all, labels_all = data.split("train", extended=True)
        n = len(X_all)
        policy = cfg.augment
        shuffle = self.rng.stream("shuffle")
        aug = self.rng.stream("augment")
        perm = shuffle.permutation(n)
        feature_std = data.feature_std
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            xb = X_all[idx]
            if policy is not None:
                xb = augment_batch(xb[:, data.slack - policy.crop_slack :], policy, aug, feature_std)
            else:
                xb = xb[:, data.slack :]
            yb = {k: v[idx] for k, v in labels_all.items() if alphas.get(k, 0.0) > 0}
            with np.errstate(over="ignore", invalid="ignore"):  # the guard below reports it
                loss, grads, _ = loss_and_grads(net, xb, yb, alphas)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(
                    f"non-finite loss/gradient in phase {phase.name}"
                    f"{'(' + phase.task_id + ')' if phase.task_id else ''} epoch {self.epoch} batch {b}"
                )
            for k in frozen:
                grads[k][...] = 0.0
            adam_step(net.params, grads, self.adam, lr)
            total += loss * len(idx)
            count += len(idx)
        entry = {
            "phase": phase.name,
            "task": phase.task_id,
            "epoch": self.epoch,
            "lr": lr,
            "train_loss": total / count,
        }
        if len(data.splits.get("val", ())):
            Xv, yv = data.split("val")
            rep = evaluate_arrays(net, Xv, yv, split="val", with_loss=True)
            entry["val_loss"] = sum(alphas[t.task_id] * t.loss for t in rep.tasks)
            entry["val"] = [t.to_dict() for t in rep.tasks]
        log.info("%s", entry)
        self.history.append(entry)
        if self.on_epoch is not None:
            self.on_epoch(entry)
        self.epoch += 1
        self._skip_empty()
        return entry

    # -- checkpoints -------------------------------------------------------

    def checkpoint(self, meta: Mapping | None = None) -> "Checkpoint":
        return Checkpoint(
            config=self.net.config,
            tasks=self.net.tasks,
            params={k: v.copy() for k, v in self.net.params.items()},
            adam=None
            if self.adam is None
            else AdamState(
                {k: v.copy() for k, v in self.adam.m.items()},
                {k: v.copy() for k, v in self.adam.v.items()},
                self.adam.t,
                self.adam.beta1,
                self.adam.beta2,
                self.adam.eps,
            ),
            phase_idx=self.phase_idx,
            epoch=self.epoch,
            rng_state=self.rng.get_state(),
            train_config=self.cfg.to_dict(),
            phases=[asdict(p) for p in self.phases],
            norm={
                "columns": list(self.data.norm.columns),
                "fit_start": str(self.data.norm.fit_start),
                "fit_end": str(self.data.norm.fit_end),
            },
            history=list(self.history),
            meta=dict(meta or {}),
        )

    @classmethod
    def resume(cls, ckpt: "Checkpoint", data: Dataset, cfg: TrainConfig | None = None, **kw) -> "Trainer":
        cfg = cfg if cfg is not None else train_config_from_dict(ckpt.train_config)
        net = ckpt.to_net()
        tr = cls(net, data, cfg, rng=Rng.from_state(ckpt.rng_state), phases=[Phase(**p) for p in ckpt.phases], **kw)
        tr.phase_idx, tr.epoch = ckpt.phase_idx, ckpt.epoch
        if ckpt.adam is not None:
            a = ckpt.adam
            tr.adam = AdamState({k: v.copy() for k, v in a.m.items()}, {k: v.copy() for k, v in a.v.items()}, a.t, a.beta1, a.beta2, a.eps)
        tr.history = list(ckpt.history)
        return tr


def default_phases(net: MultiTaskNet, cfg: TrainConfig) -> list[Phase]:
    order = list(cfg.pretrain_order) if cfg.pretrain_order else [t.id for t in net.tasks]
    for tid in order:
        net.task(tid)
    return [Phase("pretrain", tid, cfg.pretrain_epochs) for tid in order] + [Phase("joint", None, cfg.joint_epochs)]


def train(net: MultiTaskNet, data: Dataset, cfg: TrainConfig, rng: Rng | None = None):
    """Full schedule: sequential single-task pretraining, then joint training.

    ``net`` is updated in place and returned with the epoch log.
    """
    tr = Trainer(net, data, cfg, rng)
    tr.run()
    return net, tr.history


def pretrain_single_task(net: MultiTaskNet, data: Dataset, task_id: str, cfg: TrainConfig, rng: Rng | None = None):
    """Optimise only ``task_id``'s loss for ``cfg.pretrain_epochs`` epochs (in place)."""
    net.task(task_id)
    tr = Trainer(net, data, cfg, rng, phases=[Phase("pretrain", task_id, cfg.pretrain_epochs)])
    tr.run()
    return net, tr.history


def train_joint(net: MultiTaskNet, data: Dataset, cfg: TrainConfig, rng: Rng | None = None):
    """Joint phase only, ``cfg.joint_epochs`` epochs under the configured weights (in place)."""
    tr = Trainer(net, data, cfg, rng, phases=[Phase("joint", None, cfg.joint_epochs)])
    tr.run()
    return net, tr.history


def train_config_from_dict(d: Mapping) -> TrainConfig:
    d = dict(d)
    if d.get("augment") is not None:
        d["augment"] = AugmentPolicy(**d["augment"])
    if d.get("pretrain_order") is not None:
        d["pretrain_order"] = tuple(d["pretrain_order"])
    return TrainConfig(**d)


# ---------------------------------------------------------------------------
# checkpoint file


@dataclass
class Checkpoint:
    config: ExtractorConfig
    tasks: tuple[TaskSpec, ...]
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    phase_idx: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    train_config: dict | None = None
    phases: list[dict] = field(default_factory=list)
    norm: dict | None = None
    history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_net(self) -> MultiTaskNet:
        return MultiTaskNet(self.config, tuple(self.tasks), {k: v.copy() for k, v in self.params.items()})


def extractor_to_dict(cfg: ExtractorConfig) -> dict:
    return {
        "in_features": cfg.in_features,
        "stem_channels": cfg.stem_channels,
        "stages": [asdict(s) for s in cfg.stages],
        "cardinality": cfg.cardinality,
        "bottleneck_width": cfg.bottleneck_width,
    }


def extractor_from_dict(d: Mapping) -> ExtractorConfig:
    d = dict(d)
    d["stages"] = tuple(StageConfig(**s) for s in d["stages"])
    return ExtractorConfig(**d)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "kind": "checkpoint",
        "extractor": extractor_to_dict(ckpt.config),
        "tasks": [task_to_dict(t) for t in ckpt.tasks],
        "param_names": list(ckpt.params),
        "adam": None
        if ckpt.adam is None
        else {"t": ckpt.adam.t, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "phase_idx": ckpt.phase_idx,
        "epoch": ckpt.epoch,
        "rng": ckpt.rng_state,
        "train_config": ckpt.train_config,
        "phases": ckpt.phases,
        "norm": ckpt.norm,
        "history": ckpt.history,
        "meta": ckpt.meta,
    }
    tensors = {f"param/{k}": v for k, v in ckpt.params.items()}
    if ckpt.adam is not None:
        tensors.update({f"adam.m/{k}": ckpt.adam.m[k] for k in ckpt.params})
        tensors.update({f"adam.v/{k}": ckpt.adam.v[k] for k in ckpt.params})
    container.write(path, CHECKPOINT_MAGIC, meta, tensors)


def load_checkpoint(path) -> Checkpoint:
    meta, t = container.read(path, CHECKPOINT_MAGIC)
    names = meta["param_names"]
    try:
        params = {k: t[f"param/{k}"] for k in names}
        adam = None
        if meta["adam"] is not None:
            a = meta["adam"]
            adam = AdamState(
                {k: t[f"adam.m/{k}"] for k in names},
                {k: t[f"adam.v/{k}"] for k in names},
                a["t"],
                a["beta1"],
                a["beta2"],
                a["eps"],
            )
    except KeyError as exc:
        raise container.ContainerError(f"checkpoint is missing tensor {exc}") from None
    ckpt = Checkpoint(
        config=extractor_from_dict(meta["extractor"]),
        tasks=tuple(TaskSpec(**d) for d in meta["tasks"]),
        params=params,
        adam=adam,
        phase_idx=meta["phase_idx"],
        epoch=meta["epoch"],
        rng_state=meta["rng"],
        train_config=meta["train_config"],
        phases=meta["phases"],
        norm=meta["norm"],
        history=meta["history"],
        meta=meta["meta"],
    )
    ref = build_model(ckpt.config, ckpt.tasks, Rng(0))
    if list(ref.params) != names:
        raise container.ContainerError("checkpoint parameter names do not match its architecture")
    for k, v in ref.params.items():
        if params[k].shape != v.shape:
            raise container.ContainerError(f"checkpoint parameter {k!r} has shape {params[k].shape}, expected {v.shape}")
    return ckpt
