"""Three-factor tip selection (freshness, reachability, accuracy) and aggregation."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ledger import Ledger
from .signature import SimilarityRegistry

FRESHNESS_POLICIES = ("product", "tiebreak", "ignore")


def tipc(t_cur: int, t_tip: int) -> float:
    """Epoch-gap factor exp(-|t_cur - t_tip|)."""
    return math.exp(-abs(int(t_cur) - int(t_tip)))


def freshness(t_cur: int, t_tip: int, now: float, tip_time: float, alpha: float) -> float:
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if now < tip_time:
        raise ValueError(f"clock regression: now={now} < tip time {tip_time}")
    return tipc(t_cur, t_tip) / (1.0 + alpha * (now - tip_time))


def partition_tips(ledger: Ledger, start: int) -> tuple[set[int], set[int]]:
    """Split the current tips into those that (transitively) approve ``start``
    and the rest, via BFS over approver edges."""
    ledger.node(start)
    reachable: set[int] = set()
    visited = {start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        approvers = ledger.approvers(node)
        if not approvers:
            reachable.add(node)
        for nxt in approvers:
            if nxt not in visited:
                visited.add(nxt)
                queue.append(nxt)
    return reachable, ledger.tips() - reachable


@dataclass(frozen=True)
class SelectionConfig:
    n_tips: int = 2
    lam: float = 0.5
    alpha: float = 0.1
    p: int | None = None  # None: min(2 * N2, pool size)
    freshness_policy: str = "product"

    def __post_init__(self):
        if self.n_tips < 1:
            raise ValueError("n_tips must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.p is not None and self.p < self.n_unreachable:
            raise ValueError(f"p must be >= N2 = {self.n_unreachable}")
        if self.freshness_policy not in FRESHNESS_POLICIES:
            raise ValueError(f"freshness_policy must be one of {FRESHNESS_POLICIES}")

    @property
    def n_reachable(self) -> int:
        # round half away from zero so lambda * N = 0.5 rounds up
        return min(self.n_tips, int(math.floor(self.lam * self.n_tips + 0.5)))

    @property
    def n_unreachable(self) -> int:
        return self.n_tips - self.n_reachable


@dataclass
class TipScore:
    tip: int
    tipc: float
    freshness: float
    reachable: bool
    measured_accuracy: float | None = None
    similarity_to_selector: float | None = None
    chosen: bool = False


@dataclass
class Selection:
    chosen: list[int]
    scores: list[TipScore]
    n_evaluations: int
    reachable_pool: int
    unreachable_pool: int
    reachable_picks: int
    unreachable_picks: int
    quota_reachable: int
    quota_unreachable: int

    @property
    def parents(self) -> tuple[int, int]:
        """The two tips the new transaction approves: the two best-ranked picks."""
        if len(self.chosen) >= 2:
            return self.chosen[0], self.chosen[1]
        return self.chosen[0], self.chosen[0]


def _reach_key(policy: str, s: TipScore):
    if policy == "product":
        return (-(s.freshness * s.measured_accuracy), -s.measured_accuracy, s.tip)
    if policy == "tiebreak":
        return (-s.measured_accuracy, -s.freshness, s.tip)
    return (-s.measured_accuracy, s.tip)


def _unreach_key(policy: str, s: TipScore):
    if policy == "ignore":
        return (-s.measured_accuracy, s.tip)
    return (-s.measured_accuracy, -s.freshness, s.tip)


def select_tips(
    ledger: Ledger,
    *,
    client_id: int,
    epoch: int,
    latest_node: int,
    now: float,
    config: SelectionConfig,
    registry: SimilarityRegistry,
    evaluator: Callable[[int], float],
    registry_round: int | None = None,
) -> Selection:
    """Choose ``config.n_tips`` tips for a client.

    Reachable tips (those built on the client's latest node) are all evaluated
    and ranked by the freshness policy; from the unreachable ones only the ``p``
    whose uploaders are most similar to the client are evaluated, then ranked by
    accuracy. A short branch is backfilled from the other branch's ranked
    remainder. ``evaluator(node_id)`` returns the node's model accuracy on the
    selector's validation set.
    """
    tips = ledger.tips()
    if not tips:
        raise ValueError("ledger has no tips")
    if registry_round is None:
        registry_round = len(ledger)
    reachable, unreachable = partition_tips(ledger, latest_node)

    def score(tip: int, is_reachable: bool) -> TipScore:
        meta = ledger.node(tip).metadata
        tc = tipc(epoch, meta.current_epoch)
        return TipScore(tip, tc, freshness(epoch, meta.current_epoch, now, meta.timestamp, config.alpha),
                        is_reachable)

    n_evals = 0

    def measure(s: TipScore) -> None:
        nonlocal n_evals
        s.measured_accuracy = float(evaluator(s.tip))
        n_evals += 1

    N = config.n_tips
    N1, N2 = config.n_reachable, config.n_unreachable

    r_scores = [score(t, True) for t in sorted(reachable)]
    for s in r_scores:
        measure(s)
    r_scores.sort(key=lambda s: _reach_key(config.freshness_policy, s))

    u_scores = [score(t, False) for t in sorted(unreachable)]
    for s in u_scores:
        meta = ledger.node(s.tip).metadata
        s.similarity_to_selector = registry.get(registry_round, client_id, meta.client_id, 0.0)
    # unreachable picks needed once the reachable side has been used up
    need_u = N - min(N1, len(r_scores))
    p = config.p if config.p is not None else 2 * N2
    p = min(max(p, need_u), len(u_scores))
    u_scores.sort(key=lambda s: (-s.similarity_to_selector, s.tip))
    candidates = u_scores[:p]
    for s in candidates:
        measure(s)
    candidates.sort(key=lambda s: _unreach_key(config.freshness_policy, s))

    take_r = min(N1, len(r_scores))
    take_u = min(N2, len(candidates))
    # backfill
    take_r += min(N - take_r - take_u, len(r_scores) - take_r)
    take_u += min(N - take_r - take_u, len(candidates) - take_u)
    picked = r_scores[:take_r] + candidates[:take_u]
    for s in picked:
        s.chosen = True
    chosen = [s.tip for s in picked]
    if len(tips) == 1 and len(chosen) == 1 and N == 2:
        chosen = chosen * 2

    return Selection(
        chosen=chosen,
        scores=r_scores + u_scores,
        n_evaluations=n_evals,
        reachable_pool=len(r_scores),
        unreachable_pool=len(u_scores),
        reachable_picks=take_r,
        unreachable_picks=take_u,
        quota_reachable=N1,
        quota_unreachable=N2,
    )


def select_random(ledger: Ledger, n_tips: int, rng: np.random.Generator) -> list[int]:
    """Uniform tip choice without replacement; baseline policy only."""
    tips = sorted(ledger.tips())
    if len(tips) <= n_tips:
        return tips * 2 if len(tips) == 1 and n_tips == 2 else tips
    return sorted(rng.choice(tips, size=n_tips, replace=False).tolist())


def aggregate(models: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinate-wise mean of the selected tip models."""
    if len(models) == 0:
        raise ValueError("nothing to aggregate")
    first = np.asarray(models[0], dtype=float)
    # accumulate offsets from the first model so a list of equal models returns it bit-for-bit
    offset = np.zeros_like(first)
    for m in models[1:]:
        m = np.asarray(m, dtype=float)
        if m.shape != first.shape:
            raise ValueError(f"dimension mismatch: {m.shape} vs {first.shape}")
        offset += m - first
    return first + offset / len(models)
