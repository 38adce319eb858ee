"""Differentiable primitives with hand-paired backward passes.

Every tensor is a float64 ``numpy.ndarray``. Sequence tensors are laid out
time-major, ``(T, C)`` for a single window or ``(N, T, C)`` for a batch; all
ops accept either and keep the leading batch axis when it is given.

Backward functions take the upstream gradient plus whatever the forward
needs, and return gradients in the order of the forward's arguments.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
CE_CLAMP = 1e-12

ParamSet = dict  # str -> np.ndarray, insertion ordered


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# random streams


class Rng:
    """Seeded, splittable random source.

    Each named stream is an independent ``numpy.random.PCG64`` generator whose
    seed material is ``SeedSequence(seed, spawn_key=(crc32(name),))``. PCG64 and
    SeedSequence are fully specified by numpy and produce the same stream on
    every platform, so a ``(seed, name)`` pair pins a stream exactly.

    The trainer uses three streams: ``init``, ``shuffle`` and ``augment``.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            key = zlib.crc32(name.encode("utf-8"))
            ss = np.random.SeedSequence(self.seed, spawn_key=(key,))
            gen = np.random.Generator(np.random.PCG64(ss))
            self._streams[name] = gen
        return gen

    def get_state(self) -> dict:
        return {
            "seed": self.seed,
            "streams": {k: g.bit_generator.state for k, g in self._streams.items()},
        }

    @classmethod
    def from_state(cls, state: Mapping) -> "Rng":
        rng = cls(state["seed"])
        for name, st in state["streams"].items():
            rng.stream(name).bit_generator.state = st
        return rng


# ---------------------------------------------------------------------------
# grouped 1-D convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "stride", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} not divisible by groups={self.groups}"
            )
        if self.out_channels % self.groups:
            raise ValueError(
                f"out_channels={self.out_channels} not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel)

    @property
    def n_params(self) -> int:
        return (self.in_channels // self.groups) * self.kernel * self.out_channels + self.out_channels

    def out_length(self, t: int) -> int:
        return (t + 2 * self.padding - self.kernel) // self.stride + 1


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected a (T, C) or (N, T, C) tensor, got shape {x.shape}")


def _check_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> int:
    if x.shape[-1] != spec.in_channels:
        raise ShapeError(
            f"input channel dimension is {x.shape[-1]}, spec.in_channels is {spec.in_channels}"
        )
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} does not match expected {spec.weight_shape}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {b.shape} does not match expected ({spec.out_channels},)")
    t_out = spec.out_length(x.shape[-2])
    if t_out < 1:
        raise ShapeError(
            f"time dimension {x.shape[-2]} too short for kernel={spec.kernel}, "
            f"padding={spec.padding}, stride={spec.stride} (output length {t_out})"
        )
    return t_out


def _im2col(x: np.ndarray, spec: ConvSpec, t_out: int) -> np.ndarray:
    """(N, T, C_in) -> (G, N*T_out, C_in/G * K), columns ordered (channel, tap)."""
    n = x.shape[0]
    g, k = spec.groups, spec.kernel
    cg = spec.in_channels // g
    if spec.padding:
        x = np.pad(x, ((0, 0), (spec.padding, spec.padding), (0, 0)))
    if k == 1:
        win = x[:, : (t_out - 1) * spec.stride + 1 : spec.stride, :, None]
    else:
        win = sliding_window_view(x, k, axis=1)[:, : (t_out - 1) * spec.stride + 1 : spec.stride]
    # win: (N, T_out, C_in, K)
    if g == 1:
        return win.reshape(1, n * t_out, cg * k)
    cols = win.reshape(n * t_out, g, cg * k)
    return np.ascontiguousarray(cols.transpose(1, 0, 2))


def _wmat(w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """(C_out, C_in/G, K) -> (G, C_in/G * K, C_out/G)."""
    g = spec.groups
    cog = spec.out_channels // g
    return w.reshape(g, cog, -1).transpose(0, 2, 1)


def conv1d_grouped_forward(x, w, b, spec: ConvSpec):
    """Forward pass returning ``(out, cache)`` for :func:`conv1d_grouped_backward`."""
    xb, squeeze = _as_batch(np.asarray(x, dtype=DTYPE))
    t_out = _check_conv(xb, w, b, spec)
    n = xb.shape[0]
    cols = _im2col(xb, spec, t_out)
    if spec.groups == 1:
        out = (cols[0] @ w.reshape(spec.out_channels, -1).T).reshape(n, t_out, spec.out_channels)
    else:
        out = np.matmul(cols, _wmat(w, spec))  # (G, N*T_out, C_out/G)
        out = out.transpose(1, 0, 2).reshape(n, t_out, spec.out_channels)
    out += b
    cache = (xb.shape, cols, w, spec, squeeze)
    return (out[0] if squeeze else out), cache


def conv1d_grouped(x, w, b, spec: ConvSpec) -> np.ndarray:
    """Grouped 1-D convolution (cross-correlation) over the time axis.

    Output channel ``c`` of group ``g`` sees only input channels
    ``g*C_in/G .. (g+1)*C_in/G - 1``. Weights have shape ``(C_out, C_in/G, K)``.
    """
    return conv1d_grouped_forward(x, w, b, spec)[0]


def conv1d_grouped_backward(dout, cache):
    """Gradients ``(dx, dw, db)`` of a grouped convolution."""
    x_shape, cols, w, spec, squeeze = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if squeeze:
        dout = dout[None]
    n, t, _ = x_shape
    t_out = dout.shape[1]
    g, k, stride, pad = spec.groups, spec.kernel, spec.stride, spec.padding
    cg = spec.in_channels // g
    cog = spec.out_channels // g

    db = dout.sum(axis=(0, 1))
    if g == 1:
        d2 = dout.reshape(n * t_out, spec.out_channels)
        w2 = w.reshape(spec.out_channels, -1)
        dw = (d2.T @ cols[0]).reshape(w.shape)
        dcols = d2 @ w2
    else:
        dg = np.ascontiguousarray(dout.reshape(n * t_out, g, cog).transpose(1, 0, 2))
        dw = np.matmul(cols.transpose(0, 2, 1), dg)  # (G, cg*K, cog)
        dw = dw.transpose(0, 2, 1).reshape(spec.out_channels, cg, k)
        dcols = np.matmul(dg, _wmat(w, spec).transpose(0, 2, 1))  # (G, N*T_out, cg*K)
        dcols = dcols.transpose(1, 0, 2)
    dcols = dcols.reshape(n, t_out, spec.in_channels, k)

    if k == 1 and stride == 1 and pad == 0:
        dx = dcols[..., 0]
    else:
        dxp = np.zeros((n, t + 2 * pad, spec.in_channels), dtype=DTYPE)
        span = (t_out - 1) * stride + 1
        for tap in range(k):
            dxp[:, tap : tap + span : stride, :] += dcols[..., tap]
        dx = dxp[:, pad : pad + t, :] if pad else dxp
    if squeeze:
        dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------------------
# dense, activation, pooling


def dense(x, W, b) -> np.ndarray:
    """``y = W x + b`` over the last axis of ``x``."""
    x = np.asarray(x, dtype=DTYPE)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight shape {W.shape}")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match output width {W.shape[0]}")
    return x @ W.T + b


def dense_backward(dy, x, W):
    x2 = np.asarray(x, dtype=DTYPE).reshape(-1, W.shape[1])
    dy2 = np.asarray(dy, dtype=DTYPE).reshape(-1, W.shape[0])
    dx = (dy2 @ W).reshape(np.shape(x))
    return dx, dy2.T @ x2, dy2.sum(axis=0)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy, x) -> np.ndarray:
    # subgradient at exactly 0 is taken as 0
    return dy * (x > 0)


def global_avg_pool(x) -> np.ndarray:
    """Mean over the time axis: ``(T, C) -> (C,)`` or ``(N, T, C) -> (N, C)``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError(f"cannot pool over an empty time axis (shape {x.shape})")
    return x.mean(axis=-2)


def global_avg_pool_backward(dy, t: int) -> np.ndarray:
    dy = np.asarray(dy, dtype=DTYPE)
    return np.repeat(dy[..., None, :] / t, t, axis=-2)


# ---------------------------------------------------------------------------
# softmax and losses


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=DTYPE)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], CE_CLAMP)))


def softmax_cross_entropy(logits, labels):
    """Fused mean cross-entropy over a batch of logits ``(N, K)``.

    Returns ``(loss, probs, dlogits)`` where ``dlogits = (probs - onehot) / N``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    probs = softmax(logits)
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, CE_CLAMP)).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, probs, dlogits


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ShapeError("mse of empty input")
    d = pred - target
    return float(np.mean(d * d))


def mse_backward(pred, target) -> np.ndarray:
    pred = np.asarray(pred, dtype=DTYPE)
    return 2.0 * (pred - np.asarray(target, dtype=DTYPE)) / pred.size


# ---------------------------------------------------------------------------
# gradient verification


class NonFiniteError(FloatingPointError):
    pass


def finite_difference_check(
    fn: Callable[[dict], float],
    inputs: dict,
    grads: Mapping[str, np.ndarray],
    eps: float = 1e-6,
) -> float:
    """Compare analytic gradients against central differences.

    ``fn`` maps a dict of arrays to a scalar; ``grads`` holds its analytic
    gradients for some or all of those arrays. Each coordinate is perturbed in
    place and restored. Returns the max over coordinates of
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    worst = 0.0
    for name, g in grads.items():
        arr = inputs[name]
        if arr.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks require float64, got {arr.dtype}")
        if g.shape != arr.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != input shape {arr.shape}")
        if not arr.flags.c_contiguous:
            raise ValueError(f"{name}: input must be C-contiguous to be perturbed in place")
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(inputs)
            flat[i] = orig - eps
            fm = fn(inputs)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = gflat[i]
            if not (np.isfinite(num) and np.isfinite(ana)):
                idx = np.unravel_index(i, arr.shape)
                raise NonFiniteError(
                    f"non-finite gradient at {name}{[int(j) for j in idx]}: analytic={ana}, numeric={num}"
                )
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst
