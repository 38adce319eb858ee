"""Price/macro ingestion, cleaning, windowing, labelling, splitting, augmentation.

CSV schemas
-----------
Prices: header ``date,ticker,open,high,low,close,volume`` (any column order).
Macro:  header ``date,<indicator>,...``.
Both are UTF-8, ISO-8601 dates, ``.`` decimal separator; an empty field is a
missing value.

Features
--------
For the reference ticker every trading day ``t`` yields five features, in
this order, followed by the macro indicators forward-filled onto trading days::

    ret     log(close_t / close_{t-1})
    range   log(high_t / low_t)
    body    log(close_t / open_t)
    gap     log(open_t / close_{t-1})
    logvol  log(1 + volume_t)

Labels
------
``direction``: class 1 if ``close_{t+h} > close_t`` else 0 (ties are class 0).
``log_return``: ``log(close_{t+h} / close_t)``. ``t`` is the window's last row.
"""
from __future__ import annotations

import csv
import datetime as _dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from .model import CLASSIFICATION, TaskSpec

log = logging.getLogger(__name__)

PRICE_FIELDS = ("open", "high", "low", "close", "volume")
PRICE_HEADER = ("date", "ticker") + PRICE_FIELDS
TICKER_FEATURES = ("ret", "range", "body", "gap", "logvol")
LABEL_TARGETS = ("direction", "log_return")
DEGENERATE_STD = 1e-12
DATASET_MAGIC = b"GCMD"


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tables


@dataclass
class TickerPrices:
    dates: np.ndarray  # datetime64[D], strictly increasing
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __len__(self):
        return len(self.dates)


@dataclass
class PriceTable:
    tickers: dict[str, TickerPrices]

    @property
    def n_rows(self) -> int:
        return sum(len(t) for t in self.tickers.values())


@dataclass
class MacroTable:
    dates: np.ndarray
    columns: list[str]
    values: np.ndarray  # (n, m), NaN = missing


@dataclass
class FeatureTable:
    ticker: str
    dates: np.ndarray
    columns: list[str]
    values: np.ndarray  # (n_rows, F)
    mask: np.ndarray  # True where the cell was missing before filling
    close: np.ndarray  # raw reference close, used for labels only

    def __len__(self):
        return len(self.dates)


# ---------------------------------------------------------------------------
# CSV loading


def _parse_date(text: str, where: str) -> np.datetime64:
    try:
        return np.datetime64(_dt.date.fromisoformat(text.strip()), "D")
    except ValueError:
        raise DataError(f"{where}: invalid ISO-8601 date {text!r}") from None


def _parse_float(text: str, where: str, column: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        val = float(text)
    except ValueError:
        raise DataError(f"{where}: column {column!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(val):
        raise DataError(f"{where}: column {column!r}: non-finite value {text!r}")
    return val


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            rows.append((reader.line_num, row))
    return path, header, rows


def load_prices(path) -> PriceTable:
    path, header, rows = _read_rows(path)
    unknown = [h for h in header if h not in PRICE_HEADER]
    if unknown:
        raise DataError(f"{path}: unknown column {unknown[0]!r} (expected {','.join(PRICE_HEADER)})")
    missing = [h for h in PRICE_HEADER if h not in header]
    if missing:
        raise DataError(f"{path}: missing column {missing[0]!r}")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    col = {h: i for i, h in enumerate(header)}

    per: dict[str, list] = {}
    for line, row in rows:
        where = f"{path}:{line}"
        ticker = row[col["ticker"]].strip()
        if not ticker:
            raise DataError(f"{where}: empty ticker")
        date = _parse_date(row[col["date"]], where)
        vals = [_parse_float(row[col[f]], where, f) for f in PRICE_FIELDS]
        o, h, lo, c, v = vals
        for name, x in zip(PRICE_FIELDS[:4], vals[:4]):
            if not math.isnan(x) and x <= 0:
                raise DataError(f"{where}: column {name!r} must be positive, got {x}")
        if not math.isnan(v) and v < 0:
            raise DataError(f"{where}: volume must be >= 0, got {v}")
        present = [x for x in (o, c) if not math.isnan(x)]
        if present:
            if not math.isnan(h) and h < max(present):
                raise DataError(f"{where}: high {h} below max(open, close)")
            if not math.isnan(lo) and lo > min(present):
                raise DataError(f"{where}: low {lo} above min(open, close)")
        if not math.isnan(h) and not math.isnan(lo) and h < lo:
            raise DataError(f"{where}: high {h} below low {lo}")
        per.setdefault(ticker, []).append((date, line, vals))

    tickers = {}
    for ticker, recs in per.items():
        recs.sort(key=lambda r: (r[0], r[1]))
        for a, b in zip(recs, recs[1:]):
            if a[0] == b[0]:
                raise DataError(f"{path}:{b[1]}: duplicate date {a[0]} for ticker {ticker!r} (first at line {a[1]})")
        arr = np.array([r[2] for r in recs], dtype=np.float64).reshape(-1, 5)
        tickers[ticker] = TickerPrices(np.array([r[0] for r in recs], dtype="datetime64[D]"), *arr.T.copy())
    return PriceTable(tickers)


def load_macro(path) -> MacroTable:
    path, header, rows = _read_rows(path)
    if not header or header[0] != "date":
        raise DataError(f"{path}: first column must be 'date', got {header[:1]}")
    columns = header[1:]
    if len(set(columns)) != len(columns) or any(not c for c in columns) or "date" in columns:
        raise DataError(f"{path}: indicator names must be unique and non-empty")
    recs = []
    for line, row in rows:
        where = f"{path}:{line}"
        recs.append((_parse_date(row[0], where), line, [_parse_float(x, where, c) for c, x in zip(columns, row[1:])]))
    recs.sort(key=lambda r: (r[0], r[1]))
    for a, b in zip(recs, recs[1:]):
        if a[0] == b[0]:
            raise DataError(f"{path}:{b[1]}: duplicate date {a[0]} (first at line {a[1]})")
    dates = np.array([r[0] for r in recs], dtype="datetime64[D]")
    values = np.array([r[2] for r in recs], dtype=np.float64).reshape(len(recs), len(columns))
    return MacroTable(dates, columns, values)


def load_tables(price_path, macro_path=None) -> tuple[PriceTable, MacroTable | None]:
    prices = load_prices(price_path)
    macro = load_macro(macro_path) if macro_path is not None else None
    return prices, macro


# ---------------------------------------------------------------------------
# alignment and cleaning


def ticker_features(p: TickerPrices) -> np.ndarray:
    prev_close = np.concatenate([[np.nan], p.close[:-1]])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.stack(
            [
                np.log(p.close / prev_close),
                np.log(p.high / p.low),
                np.log(p.close / p.open),
                np.log(p.open / prev_close),
                np.log1p(p.volume),
            ],
            axis=1,
        )


def align_and_join(prices: PriceTable, macro: MacroTable | None, ticker: str | None = None) -> FeatureTable:
    """Put the reference ticker's features and the macro columns on its trading days.

    Each macro column is forward-filled from its latest observation on or before
    the trading day; days before the first observation stay missing.
    """
    if ticker is None:
        ticker = next(iter(prices.tickers))
    if ticker not in prices.tickers:
        raise DataError(f"unknown ticker {ticker!r}; available: {sorted(prices.tickers)}")
    p = prices.tickers[ticker]
    if len(p) == 0:
        raise DataError(f"ticker {ticker!r} has no rows")
    feats = ticker_features(p)
    columns = [f"{ticker}.{f}" for f in TICKER_FEATURES]
    if macro is not None and macro.columns:
        if len(macro.dates) == 0 or macro.dates[-1] < p.dates[0] or macro.dates[0] > p.dates[-1]:
            raise DataError(
                f"macro dates do not overlap the price dates of {ticker!r} "
                f"({p.dates[0]}..{p.dates[-1]})"
            )
        mcols = np.full((len(p), len(macro.columns)), np.nan)
        for j in range(len(macro.columns)):
            obs = ~np.isnan(macro.values[:, j])
            od, ov = macro.dates[obs], macro.values[obs, j]
            idx = np.searchsorted(od, p.dates, side="right") - 1
            ok = idx >= 0
            mcols[ok, j] = ov[idx[ok]]
        feats = np.concatenate([feats, mcols], axis=1)
        columns += list(macro.columns)
    return FeatureTable(ticker, p.dates.copy(), columns, feats, np.isnan(feats), p.close.copy())


def _interp_column(v: np.ndarray) -> np.ndarray:
    obs = ~np.isnan(v)
    if obs.all():
        return v.copy()
    idx = np.arange(len(v), dtype=np.float64)
    # np.interp holds the end values outside the observed range: back-fill
    # leading gaps and forward-fill trailing gaps
    return np.interp(idx, idx[obs], v[obs])


def interpolate_missing(table: FeatureTable) -> FeatureTable:
    """Linear interpolation on the row index; edges are filled with the nearest value."""
    values = table.values.copy()
    for j, name in enumerate(table.columns):
        if np.isnan(values[:, j]).all():
            raise DataError(f"column {name!r} has no observed values")
        values[:, j] = _interp_column(values[:, j])
    close = table.close
    if np.isnan(close).any():
        if np.isnan(close).all():
            raise DataError(f"ticker {table.ticker!r} has no observed close prices")
        close = _interp_column(close)
    return FeatureTable(table.ticker, table.dates, list(table.columns), values, table.mask.copy(), close)


# ---------------------------------------------------------------------------
# z-score


@dataclass
class NormStats:
    columns: list[str]
    mean: np.ndarray
    std: np.ndarray
    fit_start: np.datetime64
    fit_end: np.datetime64

    @property
    def degenerate(self) -> np.ndarray:
        return self.std < DEGENERATE_STD

    @property
    def degenerate_columns(self) -> list[str]:
        return [c for c, d in zip(self.columns, self.degenerate) if d]


def _rows_in(table: FeatureTable, start, end) -> np.ndarray:
    return (table.dates >= np.datetime64(start, "D")) & (table.dates <= np.datetime64(end, "D"))


def fit_norm_stats(table, train_range: tuple) -> NormStats:
    """Population mean/std of each column over rows whose date is in ``train_range``.

    ``table`` may be one FeatureTable or a list of them (pooled rows).
    """
    tables = [table] if isinstance(table, FeatureTable) else list(table)
    start, end = (np.datetime64(x, "D") for x in train_range)
    rows = np.concatenate([t.values[_rows_in(t, start, end)] for t in tables], axis=0)
    if len(rows) == 0:
        raise DataError(f"empty fit range {start}..{end}")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    return NormStats(list(tables[0].columns), mean, std, start, end)


def apply_zscore(table: FeatureTable, stats: NormStats) -> FeatureTable:
    if list(table.columns) != list(stats.columns):
        raise DataError("normalisation statistics were fit on different columns")
    degenerate = stats.degenerate
    safe = np.where(degenerate, 1.0, stats.std)
    values = (table.values - stats.mean) / safe
    values[:, degenerate] = 0.0
    return FeatureTable(table.ticker, table.dates, list(table.columns), values, table.mask, table.close)


# ---------------------------------------------------------------------------
# windows, labels, samples


@dataclass
class Sample:
    X: np.ndarray  # (rows, F); the model reads the last T rows
    labels: dict
    anchor: np.datetime64
    start: np.datetime64  # first date of the stored window, slack rows included
    ticker: str = ""

    def window(self, t: int) -> np.ndarray:
        return self.X[-t:]


def window_count(n_rows: int, t: int, stride: int) -> int:
    return 0 if n_rows < t else (n_rows - t) // stride + 1


def make_windows(table: FeatureTable, t: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """All length-``t`` windows taken every ``stride`` rows.

    Returns ``(windows, anchors)``: a read-only ``(n_windows, t, F)`` view and the
    row index of each window's last row.
    """
    if t < 1 or stride < 1:
        raise ValueError(f"window length and stride must be >= 1 (got T={t}, stride={stride})")
    n = window_count(len(table), t, stride)
    if n == 0:
        log.warning("table %s has %d rows, fewer than T=%d: no windows", table.ticker, len(table), t)
        return np.empty((0, t, table.values.shape[1])), np.empty(0, dtype=np.int64)
    view = sliding_window_view(table.values, t, axis=0)[::stride]  # (n, F, t)
    anchors = np.arange(n, dtype=np.int64) * stride + t - 1
    return view.transpose(0, 2, 1), anchors


def _target(close: np.ndarray, anchors: np.ndarray, task: TaskSpec) -> np.ndarray:
    ret = np.log(close[anchors + task.horizon] / close[anchors])
    if task.target == "log_return":
        return ret
    if task.target == "direction":
        return (ret > 0).astype(np.int64)
    raise DataError(f"task {task.id!r}: unknown target {task.target!r} (expected one of {LABEL_TARGETS})")


def check_label_defs(tasks: Sequence[TaskSpec]) -> None:
    for t in tasks:
        if t.target not in LABEL_TARGETS:
            raise DataError(f"task {t.id!r}: unknown target {t.target!r} (expected one of {LABEL_TARGETS})")
        if t.target == "direction" and (t.kind != CLASSIFICATION or t.num_classes != 2):
            raise DataError(f"task {t.id!r}: 'direction' labels need a 2-class classification task")
        if t.target == "log_return" and t.kind == CLASSIFICATION:
            raise DataError(f"task {t.id!r}: 'log_return' labels need a regression task")


def label_arrays(table: FeatureTable, anchors: np.ndarray, tasks: Sequence[TaskSpec]):
    """Labels for each anchor row; anchors without a horizon row are dropped.

    Returns ``(kept_anchors, labels, n_dropped)``.
    """
    check_label_defs(tasks)
    hmax = max(t.horizon for t in tasks)
    keep = anchors + hmax < len(table)
    kept = anchors[keep]
    labels = {t.id: _target(table.close, kept, t) for t in tasks}
    return kept, labels, int((~keep).sum())


def make_labels(windows: np.ndarray, anchors: np.ndarray, table: FeatureTable, tasks: Sequence[TaskSpec]):
    """Attach per-task labels to windows. Returns ``(samples, n_dropped)``."""
    kept, labels, dropped = label_arrays(table, anchors, tasks)
    t = windows.shape[1]
    samples = []
    for i, a in enumerate(kept):
        samples.append(
            Sample(
                X=windows[i],
                labels={k: v[i].item() for k, v in labels.items()},
                anchor=table.dates[a],
                start=table.dates[a - t + 1],
                ticker=table.ticker,
            )
        )
    return samples, dropped


# ---------------------------------------------------------------------------
# chronological split


def _check_ratios(ratios) -> tuple[float, float, float]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    return tuple(float(r) for r in ratios)


def split_indices(anchors: np.ndarray, starts: np.ndarray, ratios=(0.70, 0.15, 0.15)):
    """Index arrays for a chronological train/val/test split of date-sorted samples.

    Validation and test get ``floor(ratio * n)`` samples each and the remainder
    goes to training. Afterwards any validation/test sample whose window starts
    on or before the last training anchor is purged. Returns
    ``(splits, pre_embargo_counts)``.
    """
    _, rv, rt = _check_ratios(ratios)
    n = len(anchors)
    if np.any(anchors[1:] < anchors[:-1]):
        raise ValueError("samples must be sorted by anchor date")
    n_val = math.floor(rv * n + 1e-9)
    n_test = math.floor(rt * n + 1e-9)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"{n} samples are too few for three nonempty segments")
    idx = np.arange(n)
    tr = idx[:n_train]
    va = idx[n_train : n_train + n_val]
    te = idx[n_train + n_val :]
    last_train = anchors[tr].max()
    va = va[starts[va] > last_train]
    te = te[starts[te] > last_train]
    for name, kept, n_pre in (("validation", va, n_val), ("test", te, n_test)):
        if len(kept) == 0:
            log.warning("%s segment is empty after purging %d windows that overlap training dates", name, n_pre)
    return {"train": tr, "val": va, "test": te}, {"train": n_train, "val": n_val, "test": n_test}


def split_chronological(samples: Sequence[Sample], ratios=(0.70, 0.15, 0.15)):
    anchors = np.array([s.anchor for s in samples], dtype="datetime64[D]")
    starts = np.array([s.start for s in samples], dtype="datetime64[D]")
    splits, _ = split_indices(anchors, starts, ratios)
    return tuple([samples[i] for i in splits[k]] for k in ("train", "val", "test"))


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    crop_slack: int = 4
    scale_range: tuple[float, float] = (0.95, 1.05)
    shift_max: int = 2
    noise_sigma: float = 0.01
    smooth_window: int = 3

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(x) for x in self.scale_range))
        lo, hi = self.scale_range
        if self.crop_slack < 0:
            raise ValueError(f"crop_slack must be >= 0, got {self.crop_slack}")
        if not 0 < lo <= 1 <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= 1 <= hi, got {self.scale_range}")
        if self.shift_max < 0:
            raise ValueError(f"shift_max must be >= 0, got {self.shift_max}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ValueError(f"smooth_window must be odd and >= 1, got {self.smooth_window}")

    @classmethod
    def neutral(cls) -> "AugmentPolicy":
        return cls(crop_slack=0, scale_range=(1.0, 1.0), shift_max=0, noise_sigma=0.0, smooth_window=1)


def moving_average(x: np.ndarray, width: int, axis: int = 1) -> np.ndarray:
    """Centred moving average with edge replication."""
    if width == 1:
        return x
    half = width // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (half, half)
    xp = np.pad(x, pad, mode="edge")
    return sliding_window_view(xp, width, axis=axis).mean(axis=-1)


def augment_batch(
    X: np.ndarray,
    policy: AugmentPolicy,
    gen: np.random.Generator,
    feature_std: np.ndarray | None = None,
) -> np.ndarray:
    """Augment a batch of extended windows ``(B, T + crop_slack, F) -> (B, T, F)``.

    Order: crop, time shift, scale, smoothed noise. Random draws are taken in
    that order, one array per step for the whole batch.
    """
    X = np.asarray(X, dtype=np.float64)
    b, rows, f = X.shape
    slack = policy.crop_slack
    t = rows - slack
    if t < 1:
        raise DataError(f"window of {rows} rows is shorter than T + crop_slack (crop_slack={slack})")
    offsets = gen.integers(0, slack + 1, size=b)
    shifts = gen.integers(-policy.shift_max, policy.shift_max + 1, size=b)
    scales = gen.uniform(policy.scale_range[0], policy.scale_range[1], size=b)
    # crop then shift in one gather: out[t] = x[offset + clip(t - shift, 0, T-1)]
    src = offsets[:, None] + np.clip(np.arange(t)[None, :] - shifts[:, None], 0, t - 1)
    out = np.take_along_axis(X, src[:, :, None], axis=1)
    out = out * scales[:, None, None]
    if policy.noise_sigma > 0:
        std = np.ones(f) if feature_std is None else np.asarray(feature_std, dtype=np.float64)
        noise = gen.standard_normal((b, t, f)) * (policy.noise_sigma * std)
        out = out + moving_average(noise, policy.smooth_window, axis=1)
    return out


def augment(sample: Sample, policy: AugmentPolicy, gen: np.random.Generator, feature_std=None) -> Sample:
    X = augment_batch(sample.X[None], policy, gen, feature_std)[0]
    return Sample(X, dict(sample.labels), sample.anchor, sample.start, sample.ticker)


# ---------------------------------------------------------------------------
# whole pipeline and dataset artifact


@dataclass
class Dataset:
    """Normalised windows with labels and a chronological split.

    ``X`` holds ``window + slack`` rows per sample so training can crop; the
    model-ready window is the last ``window`` rows.
    """

    columns: list[str]
    X: np.ndarray
    labels: dict[str, np.ndarray]
    anchors: np.ndarray
    starts: np.ndarray
    splits: dict[str, np.ndarray]
    norm: NormStats
    window: int
    slack: int
    stride: int
    tasks: tuple[TaskSpec, ...]
    summary: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def feature_std(self) -> np.ndarray:
        """Std of each normalised feature over the fit range: 1, or 0 for degenerate columns."""
        return np.where(self.norm.degenerate, 0.0, 1.0)

    def split(self, name: str, extended: bool = False) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; expected one of {sorted(self.splits)}")
        idx = self.splits[name]
        X = self.X[idx] if extended else self.X[idx, self.slack :]
        return X, {k: v[idx] for k, v in self.labels.items()}

    def samples(self, name: str, extended: bool = False) -> list[Sample]:
        X, labels = self.split(name, extended)
        idx = self.splits[name]
        out = []
        for j, i in enumerate(idx):
            out.append(Sample(X[j], {k: v[j].item() for k, v in labels.items()}, self.anchors[i], self.starts[i]))
        return out

    def save(self, path) -> None:
        meta = {
            "kind": "dataset",
            "columns": self.columns,
            "window": self.window,
            "slack": self.slack,
            "stride": self.stride,
            "tasks": [task_to_dict(t) for t in self.tasks],
            "norm": {
                "fit_start": str(self.norm.fit_start),
                "fit_end": str(self.norm.fit_end),
                "degenerate_columns": self.norm.degenerate_columns,
            },
            "summary": self.summary,
            "meta": self.meta,
        }
        tensors = {
            "X": self.X,
            "anchors": self.anchors.astype(np.int64).astype(np.float64),
            "starts": self.starts.astype(np.int64).astype(np.float64),
            "norm.mean": self.norm.mean,
            "norm.std": self.norm.std,
        }
        for k, v in self.labels.items():
            tensors[f"labels.{k}"] = v.astype(np.float64)
        for k, v in self.splits.items():
            tensors[f"split.{k}"] = v.astype(np.float64)
        container.write(path, DATASET_MAGIC, meta, tensors)

    @classmethod
    def load(cls, path) -> "Dataset":
        meta, t = container.read(path, DATASET_MAGIC)
        tasks = tuple(TaskSpec(**d) for d in meta["tasks"])
        labels = {}
        for task in tasks:
            arr = t[f"labels.{task.id}"]
            labels[task.id] = arr.astype(np.int64) if task.kind == CLASSIFICATION else arr
        norm = NormStats(
            list(meta["columns"]),
            t["norm.mean"],
            t["norm.std"],
            np.datetime64(meta["norm"]["fit_start"], "D"),
            np.datetime64(meta["norm"]["fit_end"], "D"),
        )
        return cls(
            columns=list(meta["columns"]),
            X=t["X"],
            labels=labels,
            anchors=t["anchors"].astype(np.int64).astype("datetime64[D]"),
            starts=t["starts"].astype(np.int64).astype("datetime64[D]"),
            splits={k[6:]: v.astype(np.int64) for k, v in t.items() if k.startswith("split.")},
            norm=norm,
            window=meta["window"],
            slack=meta["slack"],
            stride=meta["stride"],
            tasks=tasks,
            summary=meta["summary"],
            meta=meta["meta"],
        )


def task_to_dict(t: TaskSpec) -> dict:
    return {
        "id": t.id,
        "kind": t.kind,
        "num_classes": t.num_classes,
        "alpha": t.alpha,
        "adapter_dim": t.adapter_dim,
        "target": t.target,
        "horizon": t.horizon,
    }


def build_dataset(
    prices: PriceTable,
    macro: MacroTable | None,
    tasks: Sequence[TaskSpec],
    window: int = 32,
    stride: int = 1,
    slack: int = 0,
    ratios=(0.70, 0.15, 0.15),
    tickers: Sequence[str] | None = None,
    meta: Mapping | None = None,
) -> Dataset:
    """align -> interpolate -> window -> label -> split -> fit z-score on train -> normalise.

    With several tickers, each ticker's samples are built separately and the
    streams are merged by anchor date (ticker order breaks ties).
    """
    tasks = tuple(tasks)
    check_label_defs(tasks)
    _check_ratios(ratios)
    if tickers is None:
        tickers = [next(iter(prices.tickers))]
    rows = window + slack
    tables, parts = [], []
    dropped = 0
    for ti, tk in enumerate(tickers):
        table = interpolate_missing(align_and_join(prices, macro, tk))
        _, anchors = make_windows(table, rows, stride)
        kept, labels, nd = label_arrays(table, anchors, tasks)
        dropped += nd
        tables.append(table)
        parts.append((ti, kept, labels))
    columns = tables[0].columns
    for tb in tables[1:]:
        if [c.split(".", 1)[-1] for c in tb.columns] != [c.split(".", 1)[-1] for c in columns]:
            raise DataError("tickers produce different feature layouts")
    # pooled tickers share one column naming: strip the ticker prefix
    if len(tickers) > 1:
        columns = [c.split(".", 1)[1] if i < len(TICKER_FEATURES) else c for i, c in enumerate(columns)]
        for tb in tables:
            tb.columns = list(columns)

    tick_id = np.concatenate([np.full(len(k), ti) for ti, k, _ in parts])
    row_idx = np.concatenate([k for _, k, _ in parts])
    anchor_dates = np.concatenate([tables[ti].dates[k] for ti, k, _ in parts])
    start_dates = np.concatenate([tables[ti].dates[k - rows + 1] for ti, k, _ in parts])
    label_cat = {t.id: np.concatenate([lab[t.id] for _, _, lab in parts]) for t in tasks}
    order = np.lexsort((tick_id, anchor_dates))
    tick_id, row_idx = tick_id[order], row_idx[order]
    anchor_dates, start_dates = anchor_dates[order], start_dates[order]
    label_cat = {k: v[order] for k, v in label_cat.items()}

    splits, pre = split_indices(anchor_dates, start_dates, ratios)
    tr = splits["train"]
    stats = fit_norm_stats(tables, (start_dates[tr].min(), anchor_dates[tr].max()))
    normed = [apply_zscore(tb, stats) for tb in tables]

    X = np.empty((len(row_idx), rows, len(columns)))
    for ti, tb in enumerate(normed):
        sel = tick_id == ti
        starts = row_idx[sel] - rows + 1
        X[sel] = tb.values[starts[:, None] + np.arange(rows)[None, :]]

    summary = {
        "tickers": list(tickers),
        "n_rows": int(sum(len(t) for t in tables)),
        "n_samples": int(len(row_idx)),
        "dropped_no_horizon": dropped,
        "split_pre_embargo": pre,
        "split": {k: int(len(v)) for k, v in splits.items()},
        "degenerate_columns": stats.degenerate_columns,
        "missing_cells": {c: int(sum(t.mask[:, j].sum() for t in tables)) for j, c in enumerate(columns)},
        "date_range": [str(anchor_dates[0]), str(anchor_dates[-1])],
    }
    return Dataset(
        columns=list(columns),
        X=X,
        labels=label_cat,
        anchors=anchor_dates,
        starts=start_dates,
        splits=splits,
        norm=stats,
        window=window,
        slack=slack,
        stride=stride,
        tasks=tasks,
        summary=summary,
        meta=dict(meta or {}),
    )
