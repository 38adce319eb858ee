"""Synthetic price + macro fixtures with a planted, learnable signal.

Generator
---------
Two latent daily series ``signal_0`` and ``signal_1`` are stationary AR(1)
processes with unit variance and persistence ``phi``; both are written to the
macro CSV. For a trading day ``t`` with at least ``window`` rows of history let

    z_k(t) = mean(signal_k[t-window+1 .. t]) / sd_window

where ``sd_window`` is the exact standard deviation of a ``window``-day mean of
the AR(1) process, so ``z_k(t) ~ N(0, 1)``. The next close-to-close log return is

    r(t+1) = return_scale * sign(z_0(t) + class_noise * eps(t)) * exp(coupling * z_1(t))

with ``eps ~ N(0, 1)`` independent. Hence the ``direction`` label of the window
ending at ``t`` is the sign of the window mean of ``signal_0`` plus noise, and
the magnitude of the ``log_return`` target is driven by the window mean of
``signal_1``.

Because ``z_0`` and ``eps`` are independent standard normals, the best any
classifier can do from the window is predict ``sign(z_0)``, which is right
with probability ``1 - arctan(class_noise) / pi`` (:func:`bayes_accuracy`).

The remaining price columns are nuisance: opens gap from the previous close by
small noise, highs/lows widen the open-close range, volume is log-normal. Extra
macro columns are stationary monthly AR(1) levels reported on the first trading
day of each month (empty otherwise); a trending column would let a model
memorise calendar time. A fraction ``missing_rate`` of volume cells is blanked.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .nn import Rng


@dataclass(frozen=True)
class SynthConfig:
    n_days: int = 20100
    window: int = 32
    seed: int = 0
    ticker: str = "SYN"
    start_date: str = "1990-01-01"
    persistence: float = 0.0
    class_noise: float = 0.1
    return_scale: float = 0.01
    coupling: float = 0.5
    n_distractors: int = 1
    missing_rate: float = 0.01

    def __post_init__(self):
        if self.n_days < self.window + 2:
            raise ValueError(f"n_days={self.n_days} must exceed window + 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 <= self.persistence < 1:
            raise ValueError("persistence must lie in [0, 1)")
        if self.class_noise < 0 or self.return_scale <= 0:
            raise ValueError("class_noise must be >= 0 and return_scale > 0")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.n_distractors < 0:
            raise ValueError("n_distractors must be >= 0")


def bayes_accuracy(class_noise: float) -> float:
    """Best achievable direction accuracy: P(sign(z) == sign(z + s*eps)) = 1 - atan(s)/pi."""
    return 1.0 - math.atan(class_noise) / math.pi


def window_mean_sd(phi: float, window: int) -> float:
    """Std of the mean of ``window`` consecutive values of a unit-variance AR(1)."""
    lags = np.arange(1, window)
    var = window + 2.0 * np.sum((window - lags) * phi**lags)
    return math.sqrt(var) / window


def trading_days(start: str, n: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward")


def _ar1(gen: np.random.Generator, n: int, phi: float) -> np.ndarray:
    e = gen.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0]
    s = math.sqrt(1.0 - phi * phi)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + s * e[i]
    return x


def planted_scores(signal: np.ndarray, window: int, phi: float) -> np.ndarray:
    """``z(t)`` for every day; NaN for the first ``window - 1`` days."""
    c = np.concatenate([[0.0], np.cumsum(signal)])
    z = np.full(len(signal), np.nan)
    z[window - 1 :] = (c[window:] - c[:-window]) / window / window_mean_sd(phi, window)
    return z


def generate(cfg: SynthConfig) -> dict:
    """Generate the series in memory. Returns a dict of arrays plus metadata."""
    gen = Rng(cfg.seed).stream("synth")
    n, w = cfg.n_days, cfg.window
    dates = trading_days(cfg.start_date, n)
    s0 = _ar1(gen, n, cfg.persistence)
    s1 = _ar1(gen, n, cfg.persistence)
    eps = gen.standard_normal(n)
    warm_sign = gen.choice([-1.0, 1.0], size=n)
    z0 = planted_scores(s0, w, cfg.persistence)
    z1 = planted_scores(s1, w, cfg.persistence)

    # r[t] is the return from day t-1 to day t, planted from the window ending at t-1
    r = np.zeros(n)
    direction = np.where(z0 + cfg.class_noise * eps > 0, 1.0, -1.0)
    prev = np.arange(1, n) - 1
    ok = prev >= w - 1
    r[1:] = cfg.return_scale * np.where(ok, direction[prev] * np.exp(cfg.coupling * np.nan_to_num(z1[prev])), warm_sign[1:])
    close = 100.0 * np.exp(np.cumsum(r))

    prev_close = np.concatenate([[100.0], close[:-1]])
    open_ = prev_close * np.exp(0.2 * cfg.return_scale * gen.standard_normal(n))
    top = np.maximum(open_, close)
    bottom = np.minimum(open_, close)
    high = top * np.exp(0.5 * cfg.return_scale * np.abs(gen.standard_normal(n)))
    low = bottom * np.exp(-0.5 * cfg.return_scale * np.abs(gen.standard_normal(n)))
    volume = np.round(np.exp(13.0 + 0.3 * gen.standard_normal(n)))
    volume[gen.random(n) < cfg.missing_rate] = np.nan
    volume[0] = np.exp(13.0)  # keep the first row complete

    months = dates.astype("datetime64[M]")
    first_of_month = np.concatenate([[True], months[1:] != months[:-1]])
    distractors = {}
    month_idx = np.cumsum(first_of_month) - 1
    for k in range(cfg.n_distractors):
        level = 2.0 + 0.5 * _ar1(gen, int(month_idx[-1]) + 1, 0.8)
        distractors[f"macro_{k}"] = np.where(first_of_month, level[month_idx], np.nan)

    eligible = ~np.isnan(z0[:-1]) & (np.arange(n - 1) >= w - 1)
    oracle = float(np.mean((z0[:-1][eligible] > 0) == (r[1:][eligible] > 0)))
    meta = {
        "config": asdict(cfg),
        "bayes_accuracy": bayes_accuracy(cfg.class_noise),
        "oracle_accuracy_in_sample": oracle,
        "class_balance": float(np.mean(r[1:][eligible] > 0)),
    }
    return {
        "dates": dates,
        "open": open_,
        "high": high,
        "low": low,
        "close": close,
        "volume": volume,
        "signal_0": s0,
        "signal_1": s1,
        "distractors": distractors,
        "meta": meta,
    }


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_csvs(cfg: SynthConfig, out_dir) -> dict:
    """Write ``prices.csv``, ``macro.csv`` and ``synth_meta.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = generate(cfg)
    with (out / "prices.csv").open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["date", "ticker", "open", "high", "low", "close", "volume"])
        for i, d in enumerate(g["dates"]):
            wr.writerow([str(d), cfg.ticker] + [_fmt(g[k][i]) for k in ("open", "high", "low", "close", "volume")])
    names = ["signal_0", "signal_1"] + list(g["distractors"])
    cols = [g["signal_0"], g["signal_1"]] + list(g["distractors"].values())
    with (out / "macro.csv").open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["date"] + names)
        for i, d in enumerate(g["dates"]):
            wr.writerow([str(d)] + [_fmt(c[i]) for c in cols])
    (out / "synth_meta.json").write_text(json.dumps(g["meta"], indent=2, sort_keys=True) + "\n")
    return g["meta"]
