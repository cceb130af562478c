import sys

import numpy as np
import pytest

from dagafl.ledger import Ledger, TipMetadata


def meta(client=0, acc=0.5, epoch=1, ts=1.0, sig=(0.25, 0.5)):
    return TipMetadata(client, sig, acc, epoch, client, ts)


def genesis_meta():
    return TipMetadata(99, (), 0.0, 0, 99, 0.0)


def random_ledger(n_nodes: int, rng: np.random.Generator, tip_bias: float = 0.7) -> Ledger:
    """Random DAG; parents are drawn mostly from current tips, sometimes from anywhere."""
    ledger = Ledger(genesis_meta())
    for i in range(1, n_nodes):
        tips = sorted(ledger.tips())
        pool = tips if rng.random() < tip_bias else list(range(len(ledger)))
        parents = rng.choice(pool, size=2, replace=len(pool) < 2)
        ts = max(ledger.node(int(p)).metadata.timestamp for p in parents) + float(rng.random())
        sig = tuple(rng.random(3).tolist())
        ledger.append([int(p) for p in parents],
                      TipMetadata(int(rng.integers(0, 10)), sig, float(rng.random()),
                                  int(rng.integers(0, 50)), int(rng.integers(0, 10)), ts))
    return ledger


@pytest.fixture
def diamond():
    led = Ledger(genesis_meta())
    led.append([0, 0], meta(client=1, ts=1.0))
    led.append([0, 0], meta(client=2, ts=1.5))
    led.append([1, 2], meta(client=3, ts=2.0))
    return led


@pytest.fixture
def chain():
    led = Ledger(genesis_meta())
    led.append([0, 0], meta(client=1, ts=1.0))
    led.append([1, 1], meta(client=1, ts=2.0, epoch=2))
    return led


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
