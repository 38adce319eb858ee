import numpy as np
import pytest

from resnext_mtl.model import CLASSIFICATION, REGRESSION, ExtractorConfig, StageConfig, TaskSpec


def tiny_config(in_features=2, cardinality=2, stride=2):
    return ExtractorConfig(
        in_features=in_features,
        stem_channels=4,
        stages=(StageConfig(1, 4, stride),),
        cardinality=cardinality,
        bottleneck_width=2,
    )


def two_tasks(alpha_cls=None, alpha_reg=None, adapter_dim=3):
    return (
        TaskSpec("direction", CLASSIFICATION, num_classes=2, alpha=alpha_cls, adapter_dim=adapter_dim),
        TaskSpec("log_return", REGRESSION, alpha=alpha_reg, adapter_dim=adapter_dim),
    )


def write_prices(path, closes, start="2020-01-01", ticker="AAA", volume=1000.0):
    days = np.busday_offset(np.datetime64(start, "D"), np.arange(len(closes)), roll="forward")
    lines = ["date,ticker,open,high,low,close,volume"]
    prev = closes[0]
    for i, (d, c) in enumerate(zip(days, closes)):
        o, c = float(prev) * (1 + 0.001 * (i % 3 - 1)), float(c)
        lines.append(f"{d},{ticker},{o!r},{max(o, c) * 1.01!r},{min(o, c) * 0.99!r},{c!r},{volume + i % 7!r}")
        prev = c
    path.write_text("\n".join(lines) + "\n")
    return days


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
