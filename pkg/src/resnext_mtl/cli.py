"""Command line entry point: ``resnext-mtl {synth,ingest,train,eval,gradcheck}``.

Configuration is one YAML document. Every key is optional; missing keys take
the defaults in :data:`DEFAULTS`, and the fully resolved document is what gets
hashed into ``config_hash``. Relative paths resolve against the config file's
directory; unset data paths fall back to ``<out>/prices.csv`` and
``<out>/macro.csv`` so ``synth`` followed by ``ingest`` needs no paths at all.

Exit codes: 0 success, 1 invalid configuration or inputs, 2 runtime or
numerical failure (including a failed gradient check).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from . import gradcheck as gc
from .container import FORMAT_VERSION, ContainerError, dumps_json
from .data import AugmentPolicy, DataError, Dataset, build_dataset, check_label_defs, load_macro, load_prices
from .evaluation import evaluate_arrays
from .model import ExtractorConfig, StageConfig, TaskSpec, build_model, resolve_alphas, validate_tasks
from .nn import Rng
from .synth import SynthConfig, write_csvs
from .training import (
    Trainer,
    TrainConfig,
    TrainingDiverged,
    extractor_to_dict,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("resnext_mtl")

DEFAULTS = {
    "seed": 0,
    "data": {
        "prices": None,
        "macro": None,
        "tickers": None,
        "window": 32,
        "stride": 1,
        "split": [0.70, 0.15, 0.15],
    },
    "synth": {k: v for k, v in asdict(SynthConfig()).items() if k != "seed"},
    "model": {
        "stem_channels": 64,
        "stages": [{"blocks": 2, "out_channels": 128, "stride": 2}, {"blocks": 2, "out_channels": 128, "stride": 2}],
        "cardinality": 8,
        "bottleneck_width": 16,
    },
    "tasks": [
        {"id": "direction", "kind": "classification", "num_classes": 2, "alpha": None, "adapter_dim": 64, "target": "direction", "horizon": 1},
        {"id": "log_return", "kind": "regression", "num_classes": None, "alpha": None, "adapter_dim": 64, "target": "log_return", "horizon": 1},
    ],
    "train": {
        k: v for k, v in TrainConfig().to_dict().items() if k not in ("seed", "augment")
    },
    "augment": asdict(AugmentPolicy()),
    "gradcheck": {"layer_cases": 120, "model_cases": 12, "eps": 1e-6, "tol": 1e-5},
}
TASK_DEFAULT = {"num_classes": None, "alpha": None, "adapter_dim": 64, "target": None, "horizon": 1}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


def _merge(base, over, where="config"):
    if not isinstance(over, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(over).__name__}")
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"{where}: unknown key {k!r}")
        if isinstance(base[k], dict) and base[k] and v is not None:
            out[k] = _merge(base[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


class RunConfig:
    """Resolved, validated configuration for one run."""

    def __init__(self, raw: dict, base_dir: Path, out: Path):
        self.raw = raw
        self.base_dir = base_dir
        self.out = out
        self.validate()

    @classmethod
    def load(cls, path: str | None, seed: int | None = None, out: str | None = None) -> "RunConfig":
        user = {}
        base = Path.cwd()
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {p} not found")
            try:
                user = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{p}: invalid YAML: {exc}") from None
            base = p.parent
        tasks = user.pop("tasks", None) if isinstance(user, dict) else None
        raw = _merge(DEFAULTS, user)
        if tasks is not None:
            if not isinstance(tasks, list):
                raise ConfigError("config.tasks must be a list")
            resolved = []
            for i, t in enumerate(tasks):
                if not isinstance(t, dict) or "id" not in t or "kind" not in t:
                    raise ConfigError(f"config.tasks[{i}] needs at least 'id' and 'kind'")
                extra = set(t) - set(TASK_DEFAULT) - {"id", "kind"}
                if extra:
                    raise ConfigError(f"config.tasks[{i}]: unknown key {sorted(extra)[0]!r}")
                resolved.append({**TASK_DEFAULT, **t})
            raw["tasks"] = resolved
        if seed is not None:
            raw["seed"] = seed
        out_dir = Path(out) if out is not None else base / "out"
        return cls(raw, base, out_dir)

    # -- typed views --------------------------------------------------------

    def validate(self):
        r = self.raw
        try:
            seed = int(r["seed"])
            if not 0 <= seed < 2**64:
                raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
            self.tasks = tuple(TaskSpec(**t) for t in r["tasks"])
            validate_tasks(self.tasks)
            check_label_defs(self.tasks)
            alphas = resolve_alphas(self.tasks, r["train"].get("alphas"))
            # materialise the 1/N default so the hash captures it
            r["tasks"] = [{**t, "alpha": alphas[t["id"]], "num_classes": spec.num_classes, "target": spec.target} for t, spec in zip(r["tasks"], self.tasks)]
            self.tasks = tuple(TaskSpec(**t) for t in r["tasks"])
            self.augment = AugmentPolicy(**r["augment"]) if r["augment"] is not None else None
            self.train = TrainConfig(**{**r["train"], "seed": seed, "augment": self.augment})
            stages = tuple(StageConfig(**s) for s in r["model"]["stages"])
            self.model_kwargs = {**r["model"], "stages": stages}
            ExtractorConfig(in_features=1, **self.model_kwargs).output_length(int(r["data"]["window"]))
            self.synth = SynthConfig(**{**r["synth"], "seed": seed})
            d = r["data"]
            if int(d["stride"]) < 1:
                raise ValueError("data.stride must be >= 1")
            ratios = tuple(float(x) for x in d["split"])
            if len(ratios) != 3 or any(x <= 0 for x in ratios) or abs(sum(ratios) - 1) > 1e-9:
                raise ValueError(f"data.split must be three positive ratios summing to 1, got {d['split']}")
            g = r["gradcheck"]
            if not 1e-7 <= float(g["eps"]) <= 1e-4:
                raise ValueError("gradcheck.eps must lie in [1e-7, 1e-4]")
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        self.seed = seed

    @property
    def config_hash(self) -> str:
        body = {k: v for k, v in self.raw.items() if k != "seed"}
        return hashlib.sha256(dumps_json(body).encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        return {"seed": self.seed, "config_hash": self.config_hash, "format_version": FORMAT_VERSION}

    def path(self, key: str, default_name: str) -> Path:
        v = self.raw["data"][key]
        if v is None:
            return self.out / default_name
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def extractor(self, in_features: int) -> ExtractorConfig:
        return ExtractorConfig(in_features=in_features, **self.model_kwargs)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(rc: RunConfig, args) -> int:
    meta = write_csvs(rc.synth, rc.out)
    meta.update(rc.stamp())
    (rc.out / "synth_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {rc.out / 'prices.csv'} and {rc.out / 'macro.csv'} ({rc.synth.n_days} days)")
    print(f"documented Bayes-optimal direction accuracy: {meta['bayes_accuracy']:.4f}")
    return 0


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (DataError, ValueError, KeyError) as exc:
        raise StageError(f"[{name}] {exc}") from exc


def cmd_ingest(rc: RunConfig, args) -> int:
    d = rc.raw["data"]
    prices = _stage("load", load_prices, rc.path("prices", "prices.csv"))
    macro_path = rc.path("macro", "macro.csv")
    macro = None
    if rc.raw["data"]["macro"] is not None or macro_path.exists():
        macro = _stage("load", load_macro, macro_path)
    slack = rc.augment.crop_slack if rc.augment is not None else 0
    ds = _stage(
        "pipeline",
        build_dataset,
        prices,
        macro,
        rc.tasks,
        window=int(d["window"]),
        stride=int(d["stride"]),
        slack=slack,
        ratios=tuple(d["split"]),
        tickers=d["tickers"],
        meta=rc.stamp(),
    )
    rc.out.mkdir(parents=True, exist_ok=True)
    ds.save(rc.out / "dataset.gcmd")
    summary = {**ds.summary, "columns": ds.columns, **rc.stamp()}
    (rc.out / "dataset_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    s = ds.summary
    print(f"samples: {s['n_samples']} (dropped without horizon: {s['dropped_no_horizon']})")
    pre = s["split_pre_embargo"]
    print(f"split pre-embargo train/val/test: {pre['train']}/{pre['val']}/{pre['test']}")
    print(f"split after embargo: {s['split']['train']}/{s['split']['val']}/{s['split']['test']}")
    if s["degenerate_columns"]:
        print(f"degenerate (constant) columns zeroed: {', '.join(s['degenerate_columns'])}")
    return 0


def _load_dataset(rc: RunConfig) -> Dataset:
    path = rc.out / "dataset.gcmd"
    if not path.exists():
        raise ConfigError(f"dataset {path} not found; run 'ingest' first")
    ds = Dataset.load(path)
    have = {t.id: t for t in ds.tasks}
    for t in rc.tasks:
        if t.alpha and t.alpha > 0:
            if t.id not in have or (have[t.id].target, have[t.id].horizon) != (t.target, t.horizon):
                raise ConfigError(f"dataset has no matching labels for weighted task {t.id!r}; re-run 'ingest'")
    return ds


def cmd_train(rc: RunConfig, args) -> int:
    ds = _load_dataset(rc)
    rc.out.mkdir(parents=True, exist_ok=True)
    ckpt_path = rc.out / "checkpoint.gcmt"
    log_path = rc.out / "train_log.jsonl"
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        if ck.meta.get("config_hash") != rc.config_hash or ck.meta.get("seed") != rc.seed:
            raise ConfigError("checkpoint was written by a different (seed, config); refusing to resume")
        trainer = Trainer.resume(ck, ds, rc.train)
    else:
        net = build_model(rc.extractor(len(ds.columns)), rc.tasks, Rng(rc.seed))
        trainer = Trainer(net, ds, rc.train, rng=Rng(rc.seed))
    log_path.write_text("".join(json.dumps({**e, **rc.stamp()}, sort_keys=True) + "\n" for e in trainer.history))

    def on_epoch(entry):
        with log_path.open("a") as fh:
            fh.write(json.dumps({**entry, **rc.stamp()}, sort_keys=True) + "\n")
        save_checkpoint(ckpt_path, trainer.checkpoint(rc.stamp()))
        tag = entry["phase"] + (f"[{entry['task']}]" if entry["task"] else "")
        print(f"{tag} epoch {entry['epoch']} lr {entry['lr']:.2e} train_loss {entry['train_loss']:.5f} val_loss {entry.get('val_loss', float('nan')):.5f}")

    trainer.on_epoch = on_epoch
    try:
        trainer.run()
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    save_checkpoint(ckpt_path, trainer.checkpoint(rc.stamp()))
    print(f"wrote {ckpt_path}")
    return 0


def cmd_eval(rc: RunConfig, args) -> int:
    ds = _load_dataset(rc)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else rc.out / "checkpoint.gcmt"
    ck = load_checkpoint(ckpt_path)
    net = ck.to_net()
    if net.config.in_features != len(ds.columns):
        raise ConfigError(f"checkpoint expects {net.config.in_features} features, dataset has {len(ds.columns)}")
    X, labels = ds.split(args.split)
    if len(X) == 0:
        raise StageError(f"[eval] split {args.split!r} has no samples (all purged by the embargo?)")
    report = evaluate_arrays(net, X, labels, split=args.split, seed=ck.meta.get("seed"), config_hash=ck.meta.get("config_hash"))
    rc.out.mkdir(parents=True, exist_ok=True)
    out = rc.out / f"metrics_{args.split}.json"
    out.write_text(report.to_json() + "\n")
    print(report.text())
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(rc: RunConfig, args) -> int:
    g = rc.raw["gradcheck"]
    tol = float(g["tol"])
    results = gc.run_all(int(g["layer_cases"]), int(g["model_cases"]), rc.seed, float(g["eps"]))
    failed = 0
    for r in results:
        ok = r.passed(tol)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {r.error:.3e}  {r.name}")
    worst = max(r.error for r in results)
    print(f"{len(results) - failed}/{len(results)} cases below {tol:g}; max relative error {worst:.3e}")
    return 0 if failed == 0 else 2


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resnext-mtl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file (all keys optional)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="output directory (default: <config dir>/out)")
        if name in ("train", "eval"):
            p.add_argument("--checkpoint", help="checkpoint to resume from (train) or evaluate (eval)")
        if name == "eval":
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = RunConfig.load(args.config, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](rc, args)
    except (ConfigError, StageError, ContainerError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
