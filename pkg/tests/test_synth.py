import json
import math

import numpy as np
import pytest

from resnext_mtl.data import build_dataset, load_tables
from resnext_mtl.model import CLASSIFICATION, REGRESSION, TaskSpec
from resnext_mtl.synth import SynthConfig, bayes_accuracy, generate, planted_scores, window_mean_sd, write_csvs


def test_bayes_bound_closed_form():
    assert bayes_accuracy(0.0) == 1.0
    assert bayes_accuracy(0.1) == pytest.approx(1 - math.atan(0.1) / math.pi)
    # Monte Carlo check of P(sign z == sign(z + s e))
    r = np.random.default_rng(0)
    z, e = r.standard_normal(400_000), r.standard_normal(400_000)
    assert np.mean(np.sign(z) == np.sign(z + 0.1 * e)) == pytest.approx(bayes_accuracy(0.1), abs=2e-3)


@pytest.mark.parametrize("phi", [0.0, 0.5, 0.9])
def test_window_mean_sd_matches_brute_force(phi):
    w = 6
    cov = phi ** np.abs(np.subtract.outer(np.arange(w), np.arange(w)))
    assert window_mean_sd(phi, w) == pytest.approx(math.sqrt(cov.sum()) / w, rel=1e-12)


def test_planted_scores_are_standardised():
    r = np.random.default_rng(1)
    z = planted_scores(r.standard_normal(200_000), 32, 0.0)
    assert np.isnan(z[:31]).all()
    assert np.nanstd(z) == pytest.approx(1.0, abs=0.02)


def test_noiseless_labels_follow_the_planted_statistic():
    cfg = SynthConfig(n_days=600, window=16, class_noise=0.0, seed=2)
    g = generate(cfg)
    assert g["meta"]["oracle_accuracy_in_sample"] == 1.0


def test_same_seed_same_files(tmp_path):
    cfg = SynthConfig(n_days=300, seed=5)
    write_csvs(cfg, tmp_path / "a")
    write_csvs(cfg, tmp_path / "b")
    for name in ("prices.csv", "macro.csv", "synth_meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    write_csvs(SynthConfig(n_days=300, seed=6), tmp_path / "c")
    assert (tmp_path / "a" / "prices.csv").read_bytes() != (tmp_path / "c" / "prices.csv").read_bytes()


def test_files_reingest_with_row_counts(tmp_path):
    cfg = SynthConfig(n_days=400, seed=0)
    meta = write_csvs(cfg, tmp_path)
    assert json.loads((tmp_path / "synth_meta.json").read_text()) == meta
    prices, macro = load_tables(tmp_path / "prices.csv", tmp_path / "macro.csv")
    assert len(prices.tickers["SYN"]) == 400 and len(macro.dates) == 400
    tasks = (TaskSpec("direction", CLASSIFICATION), TaskSpec("log_return", REGRESSION))
    ds = build_dataset(prices, macro, tasks, window=32)
    assert ds.X.shape == (400 - 32, 32, 8)
    assert ds.summary["missing_cells"]["SYN.logvol"] > 0


def test_labels_match_planted_direction(tmp_path):
    """The direction label of the window ending at t is sign(z0(t) + noise)."""
    cfg = SynthConfig(n_days=500, window=32, class_noise=0.0, seed=3)
    g = generate(cfg)
    z0 = planted_scores(g["signal_0"], 32, 0.0)
    r = np.diff(np.log(g["close"]))
    ok = ~np.isnan(z0[:-1])
    assert np.array_equal(z0[:-1][ok] > 0, r[ok] > 0)


def test_invalid_config():
    with pytest.raises(ValueError):
        SynthConfig(n_days=10, window=32)
    with pytest.raises(ValueError):
        SynthConfig(persistence=1.0)
