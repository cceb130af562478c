"""Deterministic discrete-event simulation of DAG-based asynchronous FL.

One logical thread owns the ledger, the model store and the similarity
registry. Events are processed in ``(time, sequence)`` order, so a config and
seed fully determine the event log, the ledger and the metrics.

Client cycle: wake -> select tips against the current ledger -> aggregate the
selected models -> local training -> (after the simulated duration) upload:
evaluate, extract the signature, update the registry, append to the ledger,
refresh the retained verification path. The publisher checks the mean
validation accuracy after every upload and may stop the run.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .fl_core import (
    Dataset,
    ModelDims,
    evaluate_accuracy,
    init_params,
    load_toy_digits,
    local_train,
    make_synthetic,
    partition,
    split_train_val_test,
)
from .ledger import Ledger, PathRecord, TipMetadata, verify_path
from .metrics import NOT_REACHED as NOT_REACHED_VALUE, LogRow, RunMetrics, collect_metrics
from .signature import SimilarityRegistry, cosine_similarity, dataset_signature
from .tip_selection import SelectionConfig, aggregate, select_random, select_tips

log = logging.getLogger(__name__)

# stream ids for derived random generators
_DATA, _INIT, _SPEED, _TRAIN, _TIPS = 1, 2, 3, 4, 5


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def train_seed(seed: int, client: int, epoch: int) -> list[int]:
    """Seed of the shuffling stream for ``client``'s ``epoch``-th local training."""
    return [seed, _TRAIN, client, epoch]


@dataclass
class ClientState:
    client_id: int
    speed_factor: float
    train: Dataset
    val: Dataset
    test: Dataset
    model: np.ndarray
    epoch: int = 0
    latest_node: int = 0
    signature: np.ndarray | None = None
    path: list[PathRecord] = field(default_factory=list)
    trusted_digest: bytes = b""
    val_accuracy: float = 0.0  # on the client's own validation shard
    pooled_val_accuracy: float = 0.0  # on the union of all validation shards
    test_accuracy: float = 0.0
    eval_time: float = 0.0
    done: bool = False


@dataclass
class Environment:
    config: RunConfig
    dims: ModelDims
    initial_params: np.ndarray
    clients: list[ClientState]
    test: Dataset
    pooled_train: Dataset
    pooled_val: Dataset
    ledger: Ledger
    store: dict[int, np.ndarray]
    registry: SimilarityRegistry

    @property
    def publisher_id(self) -> int:
        return len(self.clients)


def load_task(config: RunConfig) -> Dataset:
    if config.task == "toy-digits":
        return load_toy_digits()
    return make_synthetic([config.seed, _DATA, 0], n_samples=config.synthetic_samples)


def speed_factors(config: RunConfig) -> list[float]:
    if config.speed_factors is not None:
        return [float(s) for s in config.speed_factors]
    rng = rng_for(config.seed, _SPEED)
    return np.exp(rng.uniform(0.0, math.log(config.speed_max), size=config.clients)).tolist()


def bootstrap(config: RunConfig, data: Dataset | None = None) -> Environment:
    """Publisher setup: data partition, initial model, genesis node, client states.

    ``data`` replaces the configured task when given.
    """
    if config.clients < 1:
        raise ValueError("at least one client is required")
    if data is None:
        data = load_task(config)
    rng = rng_for(config.seed, _DATA)
    shards = partition(data, config.partition_spec, rng)
    dims = ModelDims(data.X.shape[1], config.hidden, data.n_classes)
    w0 = init_params(dims, rng_for(config.seed, _INIT))

    genesis = TipMetadata(config.clients, (), 0.0, 0, config.clients, 0.0)
    ledger = Ledger(genesis)
    store = {0: w0}

    clients = []
    for cid, (shard, speed) in enumerate(zip(shards, speed_factors(config))):
        train, val, test = split_train_val_test(shard, rng)
        c = ClientState(cid, speed, train, val, test, w0)
        c.path = ledger.extract_verification_path(0)
        c.trusted_digest = ledger.tip_digest(0)
        clients.append(c)
    test = Dataset.concat([c.test for c in clients])
    env = Environment(
        config, dims, w0, clients, test,
        Dataset.concat([c.train for c in clients]),
        Dataset.concat([c.val for c in clients]),
        ledger, store, SimilarityRegistry(),
    )
    for c in clients:
        c.val_accuracy = accuracy_or_nan(w0, dims, c.val)
        c.pooled_val_accuracy = evaluate_accuracy(w0, dims, env.pooled_val.X, env.pooled_val.y)
        c.test_accuracy = evaluate_accuracy(w0, dims, test.X, test.y)
    return env


def accuracy_or_nan(params, dims, data: Dataset) -> float:
    return evaluate_accuracy(params, dims, data.X, data.y) if len(data) else math.nan


class Publisher:
    """Tracks the clients' mean validation accuracy and decides when to stop.

    Each client's latest model is scored on the pooled validation set. The
    target is checked on every upload; the patience rule compares the mean at
    round boundaries (every ``checks_per_round`` uploads) against the best
    round so far. The untrained initial model does not count as a round.
    """

    def __init__(self, config: RunConfig, initial: list[float], checks_per_round: int | None = None):
        self.config = config
        self.latest = list(initial)
        self.best = -math.inf
        self.stall = 0
        self.terminated_by: str | None = None
        self.checks = 0
        if checks_per_round is None:
            checks_per_round = len(initial) if config.patience_unit == "round" else 1
        self.checks_per_round = checks_per_round

    def mean(self) -> float:
        vals = [v for v in self.latest if not math.isnan(v)]
        return sum(vals) / len(vals) if vals else 0.0

    def check(self, client: int | None, accuracy: float) -> str | None:
        if client is None:
            self.latest = [accuracy] * len(self.latest)
        else:
            self.latest[client] = accuracy
        self.checks += 1
        cfg = self.config
        m = self.mean()
        if self.terminated_by is not None:
            return self.terminated_by
        if cfg.stop_at_target and cfg.target_accuracy is not None and m >= cfg.target_accuracy:
            self.terminated_by = "target"
        elif self.checks % self.checks_per_round == 0:
            if m > self.best:
                self.best = m
                self.stall = 0
            else:
                self.stall += 1
                if cfg.patience and self.stall >= cfg.patience:
                    self.terminated_by = "patience"
        return self.terminated_by


@dataclass
class RunResult:
    config: RunConfig
    env: Environment
    metrics: RunMetrics
    events: list[dict]
    trace: list[dict]

    @property
    def ledger(self) -> Ledger:
        return self.env.ledger

    def tip_digests(self) -> dict[int, str]:
        return {t: self.ledger.tip_digest(t).hex() for t in sorted(self.ledger.tips())}

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e, separators=(",", ":")) + "\n" for e in self.events)


class EventQueue:
    def __init__(self):
        self._heap = []
        self._seq = 0

    def push(self, time: float, kind: str, payload) -> None:
        heapq.heappush(self._heap, (time, self._seq, kind, payload))
        self._seq += 1

    def pop(self):
        return heapq.heappop(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)


def _initial_rows(env: Environment) -> list[LogRow]:
    return [LogRow(0.0, c.client_id, 0, "init", c.test_accuracy) for c in env.clients]


def run(config: RunConfig, env: Environment | None = None) -> RunResult:
    """Run DAG-AFL to termination."""
    env = env or bootstrap(config)
    cfg = config
    dims = env.dims
    ledger, store, registry = env.ledger, env.store, env.registry
    sel_cfg = SelectionConfig(cfg.tips, cfg.lam, cfg.alpha, cfg.p, cfg.freshness_policy)
    publisher = Publisher(cfg, [c.pooled_val_accuracy for c in env.clients])
    rows = _initial_rows(env)
    events: list[dict] = [{"kind": "genesis", "time": 0.0, "node": ledger.node(0).to_json(),
                           "speed_factors": [c.speed_factor for c in env.clients]}]
    trace: list[dict] = []
    eval_total = 0.0
    announced = False

    queue = EventQueue()
    for c in env.clients:
        queue.push(0.0, "wake", c.client_id)

    while queue:
        now, _, kind, payload = queue.pop()
        if kind == "wake":
            c = env.clients[payload]
            if publisher.terminated_by is not None or c.epoch >= cfg.max_global_iters:
                c.done = True
                continue
            tips_now = sorted(ledger.tips())
            eval_set = c.val if len(c.val) else c.train

            def evaluator(node_id, _X=eval_set.X, _y=eval_set.y):
                return evaluate_accuracy(store[node_id], dims, _X, _y)

            if cfg.tip_policy == "random":
                chosen = select_random(ledger, cfg.tips, rng_for(cfg.seed, _TIPS, c.client_id, c.epoch))
                parents = (chosen[0], chosen[1] if len(chosen) > 1 else chosen[0])
                n_evals, n_queries, sel = 0, 0, None
            else:
                before = registry.n_queries
                sel = select_tips(ledger, client_id=c.client_id, epoch=c.epoch, latest_node=c.latest_node,
                                  now=now, config=sel_cfg, registry=registry, evaluator=evaluator)
                chosen, parents, n_evals = sel.chosen, sel.parents, sel.n_evaluations
                n_queries = registry.n_queries - before
            eval_cost = n_evals * cfg.eval_cost_per_sample * len(eval_set) + n_queries * cfg.registry_query_cost
            c.eval_time += eval_cost
            eval_total += eval_cost

            merged = aggregate([store[t] for t in chosen])
            trained = local_train(merged, dims, c.train.X, c.train.y, cfg.local_epochs, cfg.lr,
                                  train_seed(cfg.seed, c.client_id, c.epoch + 1), cfg.batch_size)
            duration = eval_cost + cfg.base_epoch_time * c.speed_factor * cfg.local_epochs

            rows.append(LogRow(now, c.client_id, c.epoch, "select"))
            ev = {"kind": "select", "time": now, "client": c.client_id, "epoch": c.epoch,
                  "latest_node": c.latest_node, "tips": tips_now, "chosen": list(chosen),
                  "parents": list(parents), "eval_cost": eval_cost}
            if sel is not None:
                ev.update(reachable_pool=sel.reachable_pool, unreachable_pool=sel.unreachable_pool,
                          reachable_picks=sel.reachable_picks, unreachable_picks=sel.unreachable_picks,
                          quota_reachable=sel.quota_reachable, quota_unreachable=sel.quota_unreachable)
                if cfg.trace:
                    for s in sel.scores:
                        trace.append({"time": now, "selector": c.client_id, "tip": s.tip,
                                      "reachable": s.reachable, "tipc": s.tipc, "freshness": s.freshness,
                                      "similarity": s.similarity_to_selector,
                                      "accuracy": s.measured_accuracy, "chosen": s.chosen})
            events.append(ev)
            queue.push(now + duration, "upload", (c.client_id, parents, trained, now))

        elif kind == "upload":
            cid, parents, trained, started = payload
            c = env.clients[cid]
            c.epoch += 1
            c.model = trained
            c.val_accuracy = accuracy_or_nan(trained, dims, c.val)
            c.pooled_val_accuracy = evaluate_accuracy(trained, dims, env.pooled_val.X, env.pooled_val.y)
            c.test_accuracy = evaluate_accuracy(trained, dims, env.test.X, env.test.y)
            c.signature = dataset_signature(trained, dims, c.train.X, cfg.signature_groups)
            own_acc = c.val_accuracy if not math.isnan(c.val_accuracy) else \
                evaluate_accuracy(trained, dims, c.train.X, c.train.y)

            meta = TipMetadata(cid, tuple(c.signature.tolist()), own_acc, c.epoch, cid, now)
            node_id = ledger.append(parents, meta)
            store[node_id] = trained
            for other in env.clients:
                if other.client_id != cid and other.signature is not None:
                    registry.record(node_id, cid, other.client_id,
                                    cosine_similarity(c.signature, other.signature))
            c.latest_node = node_id
            c.path = ledger.extract_verification_path(node_id)
            c.trusted_digest = ledger.tip_digest(node_id)

            reason = publisher.check(cid, c.pooled_val_accuracy)
            rows.append(LogRow(now, cid, c.epoch, "upload", c.test_accuracy))
            events.append({"kind": "upload", "time": now, "client": cid, "epoch": c.epoch,
                           "selection_start": started, "val_accuracy": c.val_accuracy,
                           "test_accuracy": c.test_accuracy, "eval_time": c.eval_time,
                           "publisher_mean": publisher.mean(), "node": ledger.node(node_id).to_json()})
            if reason is not None and not announced:
                announced = True
                rows.append(LogRow(now, -1, 0, "terminate"))
                events.append({"kind": "terminate", "time": now, "reason": reason})
            if reason is None and c.epoch < cfg.max_global_iters:
                queue.push(now, "wake", cid)
            else:
                c.done = True

    terminated_by = publisher.terminated_by or "max_iters"
    log.info("run finished (%s): %d nodes, publisher mean %.4f", terminated_by, len(ledger), publisher.mean())
    metrics = collect_metrics(rows, cfg.target_accuracy, terminated_by=terminated_by,
                              extra=_extra(env, events, rows, cfg, eval_total))
    return RunResult(cfg, env, metrics, events, trace)


def _extra(env: Environment, events, rows, cfg: RunConfig, eval_total: float) -> dict:
    """Evaluation-cost bookkeeping: time-to-target with and without tip evaluation."""
    out = {"eval_time_total": eval_total, "policy": "dag-afl" if cfg.tip_policy == "dag-afl" else "dag-random",
           # a client may approve its own previous node and two nodes of one client
           "self_approval": "permitted"}
    if cfg.target_accuracy is None:
        out["time_to_target_excl_eval"] = NOT_REACHED_VALUE
        return out
    latest = {r.client: r.accuracy for r in rows if r.event == "init"}
    eval_time: dict[int, float] = {c.client_id: 0.0 for c in env.clients}
    excl = NOT_REACHED_VALUE
    for e in events:
        if e["kind"] != "upload":
            continue
        latest[e["client"]] = e["test_accuracy"]
        eval_time[e["client"]] = e["eval_time"]
        if sum(latest.values()) / len(latest) >= cfg.target_accuracy:
            excl = e["time"] - sum(eval_time.values()) / len(eval_time)
            break
    out["time_to_target_excl_eval"] = excl
    return out


def verify_client_paths(env: Environment) -> dict[int, str]:
    """Each trainer audits the publisher's ledger against its retained path."""
    out = {}
    for c in env.clients:
        current = env.ledger.extract_verification_path(c.path[0].id)
        out[c.client_id] = str(verify_path(current, c.trusted_digest))
    return out
