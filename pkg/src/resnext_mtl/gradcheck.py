"""Seeded finite-difference suites for every layer type and small whole models."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import nn
from .model import (
    CLASSIFICATION,
    REGRESSION,
    ExtractorConfig,
    StageConfig,
    TaskSpec,
    build_model,
    loss_and_grads,
)
from .nn import ConvSpec, Rng, finite_difference_check


@dataclass
class CaseResult:
    name: str
    error: float
    detail: str = ""

    def passed(self, tol: float) -> bool:
        return self.error < tol


def _away_from_zero(gen, shape, margin=0.05):
    return gen.uniform(margin, 2.0, shape) * gen.choice([-1.0, 1.0], shape)


def _conv_case(gen, eps):
    g = int(gen.choice([1, 2, 4]))
    cin = g * int(gen.integers(1, 3))
    cout = g * int(gen.integers(1, 3))
    k = int(gen.integers(1, 4))
    stride = int(gen.integers(1, 3))
    pad = int(gen.integers(0, 2))
    t = int(gen.integers(k, k + 5))
    spec = ConvSpec(cin, cout, kernel=k, stride=stride, padding=pad, groups=g)
    n = int(gen.integers(1, 3))
    inputs = {
        "x": gen.standard_normal((n, t, cin)),
        "w": gen.standard_normal(spec.weight_shape),
        "b": gen.standard_normal(cout),
    }
    out, cache = nn.conv1d_grouped_forward(inputs["x"], inputs["w"], inputs["b"], spec)
    proj = gen.standard_normal(out.shape)
    dx, dw, db = nn.conv1d_grouped_backward(proj, cache)
    fn = lambda p: float(np.sum(nn.conv1d_grouped(p["x"], p["w"], p["b"], spec) * proj))
    err = finite_difference_check(fn, inputs, {"x": dx, "w": dw, "b": db}, eps)
    return f"conv1d G={g} Cin={cin} Cout={cout} K={k} s={stride} p={pad} T={t}", err


def _dense_case(gen, eps):
    din, dout = int(gen.integers(1, 6)), int(gen.integers(1, 6))
    inputs = {
        "x": gen.standard_normal((int(gen.integers(1, 4)), din)),
        "W": gen.standard_normal((dout, din)),
        "b": gen.standard_normal(dout),
    }
    proj = gen.standard_normal((len(inputs["x"]), dout))
    dx, dW, db = nn.dense_backward(proj, inputs["x"], inputs["W"])
    fn = lambda p: float(np.sum(nn.dense(p["x"], p["W"], p["b"]) * proj))
    return f"dense {din}->{dout}", finite_difference_check(fn, inputs, {"x": dx, "W": dW, "b": db}, eps)


def _relu_case(gen, eps):
    x = _away_from_zero(gen, (int(gen.integers(1, 4)), int(gen.integers(1, 6))))
    proj = gen.standard_normal(x.shape)
    fn = lambda p: float(np.sum(nn.relu(p["x"]) * proj))
    return "relu", finite_difference_check(fn, {"x": x}, {"x": nn.relu_backward(proj, x)}, eps)


def _pool_case(gen, eps):
    t, c = int(gen.integers(1, 6)), int(gen.integers(1, 5))
    x = gen.standard_normal((int(gen.integers(1, 3)), t, c))
    proj = gen.standard_normal((len(x), c))
    fn = lambda p: float(np.sum(nn.global_avg_pool(p["x"]) * proj))
    return f"global_avg_pool T={t}", finite_difference_check(
        fn, {"x": x}, {"x": nn.global_avg_pool_backward(proj, t)}, eps
    )


def _softmax_ce_case(gen, eps):
    n, k = int(gen.integers(1, 4)), int(gen.integers(2, 7))
    logits = gen.standard_normal((n, k)) * 2
    labels = gen.integers(0, k, size=n)
    _, _, d = nn.softmax_cross_entropy(logits, labels)
    fn = lambda p: nn.softmax_cross_entropy(p["z"], labels)[0]
    return f"softmax+cross_entropy K={k}", finite_difference_check(fn, {"z": logits}, {"z": d}, eps)


def _mse_case(gen, eps):
    n = int(gen.integers(1, 8))
    pred, target = gen.standard_normal(n), gen.standard_normal(n)
    fn = lambda p: nn.mse(p["pred"], target)
    return f"mse n={n}", finite_difference_check(fn, {"pred": pred}, {"pred": nn.mse_backward(pred, target)}, eps)


LAYER_CASES = (_conv_case, _dense_case, _relu_case, _pool_case, _softmax_ce_case, _mse_case)


def layer_suite(n_cases: int = 120, seed: int = 0, eps: float = 1e-6) -> Iterator[CaseResult]:
    """``n_cases`` random layer checks cycling over every primitive."""
    gen = Rng(seed).stream("gradcheck.layers")
    for i in range(n_cases):
        name, err = LAYER_CASES[i % len(LAYER_CASES)](gen, eps)
        yield CaseResult(f"layer[{i}] {name}", err)


def small_model(case: int, seed: int = 0):
    """A tiny random architecture; cases rotate over G in {1,2,4}, strides {1,2} and both heads."""
    gen = Rng(seed).stream(f"gradcheck.model.{case}")
    g = (1, 2, 4)[case % 3]
    strides = ((1,), (2,), (2, 1), (1, 2))[case % 4]
    f = int(gen.integers(1, 4))
    stages = tuple(StageConfig(1 + (case % 2 if i == 0 else 0), g * int(gen.integers(1, 3)), s) for i, s in enumerate(strides))
    cfg = ExtractorConfig(in_features=f, stem_channels=int(gen.integers(2, 5)), stages=stages, cardinality=g, bottleneck_width=int(gen.integers(1, 3)))
    kinds = [(CLASSIFICATION, REGRESSION), (CLASSIFICATION,), (REGRESSION,)][case % 3]
    tasks = []
    for j, kind in enumerate(kinds):
        tasks.append(
            TaskSpec(
                f"t{j}",
                kind,
                num_classes=int(gen.integers(2, 4)) if kind == CLASSIFICATION else None,
                alpha=float(gen.uniform(0.2, 1.0)),
                adapter_dim=int(gen.integers(2, 4)),
            )
        )
    net = build_model(cfg, tasks, Rng(seed + case))
    # nonzero biases so ReLU kinks are not hit at exactly zero
    for k, v in net.params.items():
        if k.endswith(".b"):
            v[...] = gen.uniform(-0.3, 0.3, v.shape)
    t = cfg.downsample * int(gen.integers(2, 4))
    n = int(gen.integers(1, 4))
    X = gen.standard_normal((n, t, f))
    labels = {}
    for task in tasks:
        if task.kind == CLASSIFICATION:
            labels[task.id] = gen.integers(0, task.num_classes, size=n)
        else:
            labels[task.id] = gen.standard_normal(n)
    alphas = {task.id: task.alpha for task in tasks}
    return net, X, labels, alphas


def model_suite(n_cases: int = 12, seed: int = 0, eps: float = 1e-6) -> Iterator[CaseResult]:
    for case in range(n_cases):
        net, X, labels, alphas = small_model(case, seed)
        _, grads, _ = loss_and_grads(net, X, labels, alphas)
        fn = lambda p: loss_and_grads(net, X, labels, alphas)[0]
        err = finite_difference_check(fn, net.params, grads, eps)
        cfg = net.config
        desc = (
            f"G={cfg.cardinality} strides={[s.stride for s in cfg.stages]} "
            f"heads={[t.kind[:3] for t in net.tasks]} T={X.shape[1]}"
        )
        yield CaseResult(f"model[{case}] {desc}", err)


def run_all(layer_cases: int = 120, model_cases: int = 12, seed: int = 0, eps: float = 1e-6) -> list[CaseResult]:
    return list(layer_suite(layer_cases, seed, eps)) + list(model_suite(model_cases, seed, eps))
