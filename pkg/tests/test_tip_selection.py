import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dagafl.ledger import Ledger, UnknownNodeError
from dagafl.signature import SimilarityRegistry
from dagafl.tip_selection import (
    SelectionConfig,
    aggregate,
    freshness,
    partition_tips,
    select_random,
    select_tips,
    tipc,
)

from conftest import genesis_meta, meta, random_ledger


def test_tipc_examples():
    assert tipc(5, 5) == 1.0
    assert tipc(5, 3) == pytest.approx(0.135335283, abs=1e-9)
    assert tipc(3, 5) == tipc(5, 3)


def test_freshness_examples():
    assert freshness(4, 4, 3.0, 3.0, 0.1) == 1.0
    assert freshness(4, 4, 10.0, 0.0, 0.1) == pytest.approx(0.5, abs=1e-12)
    assert freshness(4, 2, 10.0, 0.0, 0.1) == pytest.approx(0.067667642, abs=1e-9)
    with pytest.raises(ValueError, match="clock regression"):
        freshness(1, 1, 1.0, 2.0, 0.1)


@given(st.integers(0, 50), st.integers(0, 50), st.floats(0, 100), st.floats(0, 100), st.floats(0.01, 5))
def test_freshness_monotone(t_cur, t_tip, dwell, extra, alpha):
    f = freshness(t_cur, t_tip, dwell, 0.0, alpha)
    assert 0.0 < f <= tipc(t_cur, t_tip)
    assert freshness(t_cur, t_tip, dwell + extra, 0.0, alpha) <= f
    assert freshness(t_cur + 1 if t_cur >= t_tip else t_cur - 1, t_tip, dwell, 0.0, alpha) <= f \
        if t_cur - 1 >= 0 or t_cur >= t_tip else True


def descendants_oracle(ledger, start):
    """Transitive closure by repeated relaxation over all edges, O(V * E)."""
    reach = {start}
    changed = True
    while changed:
        changed = False
        for node in ledger:
            if node.id not in reach and any(p in reach for p in node.parents):
                reach.add(node.id)
                changed = True
    tips = {n.id for n in ledger} - {p for n in ledger for p in n.parents}
    return reach & tips, tips - reach


def test_partition_examples(diamond):
    led = Ledger(genesis_meta())
    led.append([0, 0], meta(ts=1))
    led.append([0, 0], meta(ts=1))
    assert partition_tips(led, 2) == ({2}, {1})
    assert partition_tips(diamond, 1) == ({3}, set())
    with pytest.raises(UnknownNodeError):
        partition_tips(diamond, 42)


def test_partition_matches_closure_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        led = random_ledger(int(rng.integers(2, 200)), rng)
        start = int(rng.integers(len(led)))
        reach, unreach = partition_tips(led, start)
        assert (reach, unreach) == descendants_oracle(led, start)
        assert reach | unreach == led.tips() and not reach & unreach


@pytest.fixture
def four_tips():
    """Selector = client 0 whose latest node is 1; tips 3, 4 build on it, 5, 6 do not."""
    led = Ledger(genesis_meta())
    led.append([0, 0], meta(client=0, epoch=1, ts=1))   # 1
    led.append([0, 0], meta(client=1, epoch=1, ts=1))   # 2
    led.append([1, 1], meta(client=2, epoch=2, ts=3))   # 3
    led.append([1, 1], meta(client=3, epoch=1, ts=2))   # 4
    led.append([2, 2], meta(client=4, epoch=2, ts=4))   # 5
    led.append([2, 2], meta(client=5, epoch=3, ts=5))   # 6
    reg = SimilarityRegistry()
    reg.record(1, 0, 4, 0.9)
    reg.record(1, 0, 5, 0.2)
    acc = {3: 0.6, 4: 0.9, 5: 0.5, 6: 0.7}
    return led, reg, acc


def _select(led, reg, acc, **cfg):
    calls = []

    def evaluator(t):
        calls.append(t)
        return acc[t]

    sel = select_tips(led, client_id=0, epoch=2, latest_node=1, now=10.0,
                      config=SelectionConfig(**cfg), registry=reg, evaluator=evaluator)
    return sel, calls


def test_select_one_per_branch(four_tips):
    led, reg, acc = four_tips
    # hand-enumerated freshness x accuracy for the reachable side
    f3 = math.exp(0) / (1 + 0.1 * 7)
    f4 = math.exp(-1) / (1 + 0.1 * 8)
    assert f3 * 0.6 > f4 * 0.9
    # unreachable side: both candidates evaluated (p = 2), ranked by accuracy: 6 (0.7) over 5 (0.5)
    sel, calls = _select(led, reg, acc)
    assert sel.chosen == [3, 6]
    assert sorted(calls) == [3, 4, 5, 6]
    assert (sel.reachable_picks, sel.unreachable_picks) == (1, 1)
    by_tip = {s.tip: s for s in sel.scores}
    assert by_tip[4].freshness == pytest.approx(f4, abs=1e-12)
    assert by_tip[5].similarity_to_selector == 0.9 and by_tip[6].similarity_to_selector == 0.2


def test_similarity_prefilter_limits_evaluations(four_tips):
    led, reg, acc = four_tips
    sel, calls = _select(led, reg, acc, p=1)
    assert sel.chosen == [3, 5]
    assert 6 not in calls and sel.n_evaluations == 3


def test_policies_change_reachable_ranking(four_tips):
    led, reg, acc = four_tips
    assert _select(led, reg, acc, freshness_policy="tiebreak")[0].chosen == [4, 6]
    assert _select(led, reg, acc, freshness_policy="ignore")[0].chosen == [4, 6]


def test_lambda_one_takes_reachable_only(four_tips):
    led, reg, acc = four_tips
    sel, _ = _select(led, reg, acc, lam=1.0)
    assert sel.chosen == [3, 4]
    assert sel.unreachable_picks == 0


def test_genesis_bootstrap_repeats():
    led = Ledger(genesis_meta())
    sel = select_tips(led, client_id=0, epoch=0, latest_node=0, now=0.0, config=SelectionConfig(),
                      registry=SimilarityRegistry(), evaluator=lambda t: 0.1)
    assert sel.chosen == [0, 0] and sel.parents == (0, 0)


def test_backfill_from_reachable(diamond):
    # only one tip overall, but reached: returned once per slot
    sel = select_tips(diamond, client_id=9, epoch=1, latest_node=0, now=5.0, config=SelectionConfig(),
                      registry=SimilarityRegistry(), evaluator=lambda t: 0.5)
    assert sel.chosen == [3, 3]
    led = Ledger(genesis_meta())
    for _ in range(3):
        led.append([0, 0], meta(ts=1))
    sel = select_tips(led, client_id=9, epoch=1, latest_node=0, now=5.0, config=SelectionConfig(),
                      registry=SimilarityRegistry(), evaluator=lambda t: t / 10)
    # every tip reachable from genesis: both slots come from the reachable branch
    assert sel.chosen == [3, 2] and sel.reachable_picks == 2


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]))
def test_selection_size_and_quota(seed, n, lam):
    rng = np.random.default_rng(seed)
    led = random_ledger(int(rng.integers(5, 60)), rng)
    start = int(rng.integers(len(led)))
    acc = {i: float(rng.random()) for i in range(len(led))}
    cfg = SelectionConfig(n_tips=n, lam=lam)
    now = max(node.metadata.timestamp for node in led)
    sel = select_tips(led, client_id=1, epoch=3, latest_node=start, now=now, config=cfg,
                      registry=SimilarityRegistry(), evaluator=acc.__getitem__)
    tips = led.tips()
    assert set(sel.chosen) <= tips
    if len(tips) >= n:
        assert len(sel.chosen) == n == len(set(sel.chosen))
    reach, unreach = partition_tips(led, start)
    if len(reach) >= cfg.n_reachable and len(unreach) >= cfg.n_unreachable:
        assert sel.reachable_picks == cfg.n_reachable

    # scaling every accuracy by a positive constant keeps the unreachable picks
    scaled = select_tips(led, client_id=1, epoch=3, latest_node=start, now=now, config=cfg,
                         registry=SimilarityRegistry(), evaluator=lambda t: 0.5 * acc[t])
    assert scaled.chosen[sel.reachable_picks:] == sel.chosen[sel.reachable_picks:]


def test_config_validation():
    assert SelectionConfig(n_tips=2, lam=0.5).n_reachable == 1
    assert SelectionConfig(n_tips=3, lam=0.5).n_reachable == 2
    with pytest.raises(ValueError):
        SelectionConfig(lam=1.5)
    with pytest.raises(ValueError):
        SelectionConfig(n_tips=4, lam=0.5, p=1)


def test_random_policy():
    led = random_ledger(30, np.random.default_rng(3))
    picks = select_random(led, 2, np.random.default_rng(0))
    assert len(set(picks)) == 2 and set(picks) <= led.tips()


def test_aggregate_examples():
    m = np.random.default_rng(0).normal(size=7)
    assert np.array_equal(aggregate([m, m, m]), m)
    assert np.array_equal(aggregate([np.zeros(4), np.full(4, 2.0)]), np.ones(4))
    models = [np.random.default_rng(s).normal(size=20) for s in range(5)]
    oracle = [sum(models[k][i] for k in reversed(range(5))) / 5 for i in range(20)]
    assert np.max(np.abs(aggregate(models) - oracle)) <= 1e-12
    assert np.max(np.abs(aggregate(models[::-1]) - aggregate(models))) <= 1e-12
    with pytest.raises(ValueError):
        aggregate([np.zeros(3), np.zeros(4)])
    with pytest.raises(ValueError):
        aggregate([])
