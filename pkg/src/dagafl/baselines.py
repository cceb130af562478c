"""In-harness comparison policies sharing DAG-AFL's data, model and clock.

centralized   one model trained on the pooled training data
independent   every client trains alone, no exchange
sync-fedavg   synchronous rounds, sample-weighted averaging; a round lasts as
              long as its slowest client
pure-async    FedAsync-style server: each arriving update is mixed in with
              a fixed weight of 0.5
"""
from __future__ import annotations

import numpy as np

from .config import RunConfig
from .fl_core import evaluate_accuracy, local_train
from .metrics import LogRow, RunMetrics, collect_metrics
from .simulation import (
    Environment,
    EventQueue,
    Publisher,
    bootstrap,
    run,
    train_seed,
)

POLICIES = ("dag-afl", "dag-random", "centralized", "independent", "sync-fedavg", "pure-async")
BASELINES = ("centralized", "independent", "sync-fedavg", "pure-async")
ASYNC_MIXING = 0.5


def run_policy(config: RunConfig, policy: str) -> RunMetrics:
    """Run any named policy and return its metrics."""
    if policy == "dag-afl":
        return run(config.replace(tip_policy="dag-afl")).metrics
    if policy == "dag-random":
        return run(config.replace(tip_policy="random")).metrics
    return run_baseline(config, policy)


def run_baseline(config: RunConfig, policy: str, env: Environment | None = None) -> RunMetrics:
    if policy not in BASELINES:
        raise ValueError(f"unknown baseline {policy!r}; expected one of {BASELINES}")
    env = env or bootstrap(config)
    return {
        "centralized": _centralized,
        "independent": _independent,
        "sync-fedavg": _sync_fedavg,
        "pure-async": _pure_async,
    }[policy](config, env)


def _pooled_val(env: Environment, w) -> float:
    return evaluate_accuracy(w, env.dims, env.pooled_val.X, env.pooled_val.y)


def _test(env: Environment, w) -> float:
    return evaluate_accuracy(w, env.dims, env.test.X, env.test.y)


def _centralized(cfg: RunConfig, env: Environment) -> RunMetrics:
    data = env.pooled_train
    w = env.initial_params
    publisher = Publisher(cfg, [_pooled_val(env, w)], checks_per_round=1)
    rows = [LogRow(0.0, -1, 0, "init", _test(env, w))]
    # one pass over the pooled data costs as much as one pass over every shard
    round_time = cfg.base_epoch_time * cfg.local_epochs * cfg.clients
    t = 0.0
    for r in range(1, cfg.max_global_iters + 1):
        rows.append(LogRow(t, -1, r - 1, "select"))
        w = local_train(w, env.dims, data.X, data.y, cfg.local_epochs, cfg.lr,
                        train_seed(cfg.seed, cfg.clients, r), cfg.batch_size)
        t += round_time
        rows.append(LogRow(t, -1, r, "upload", _test(env, w)))
        if publisher.check(None, _pooled_val(env, w)):
            break
    return collect_metrics(rows, cfg.target_accuracy, mode="latest",
                           terminated_by=publisher.terminated_by or "max_iters",
                           extra={"policy": "centralized"})


def _independent(cfg: RunConfig, env: Environment) -> RunMetrics:
    w0 = env.initial_params
    models = {c.client_id: w0 for c in env.clients}
    epochs = {c.client_id: 0 for c in env.clients}
    publisher = Publisher(cfg, [_pooled_val(env, w0)] * len(env.clients))
    rows = [LogRow(0.0, c.client_id, 0, "init", _test(env, w0)) for c in env.clients]
    queue = EventQueue()
    for c in env.clients:
        queue.push(0.0, "wake", c.client_id)
    while queue:
        now, _, kind, cid = queue.pop()
        c = env.clients[cid]
        if kind == "wake":
            if publisher.terminated_by is not None or epochs[cid] >= cfg.max_global_iters:
                continue
            rows.append(LogRow(now, cid, epochs[cid], "select"))
            models[cid] = local_train(models[cid], env.dims, c.train.X, c.train.y, cfg.local_epochs, cfg.lr,
                                      train_seed(cfg.seed, cid, epochs[cid] + 1), cfg.batch_size)
            queue.push(now + cfg.base_epoch_time * cfg.local_epochs * c.speed_factor, "upload", cid)
        else:
            epochs[cid] += 1
            rows.append(LogRow(now, cid, epochs[cid], "upload", _test(env, models[cid])))
            reason = publisher.check(cid, _pooled_val(env, models[cid]))
            if reason is None and epochs[cid] < cfg.max_global_iters:
                queue.push(now, "wake", cid)
    return collect_metrics(rows, cfg.target_accuracy, terminated_by=publisher.terminated_by or "max_iters",
                           extra={"policy": "independent"})


def fedavg_round(w, env: Environment, cfg: RunConfig, r: int):
    models, weights = [], []
    for c in env.clients:
        models.append(local_train(w, env.dims, c.train.X, c.train.y, cfg.local_epochs, cfg.lr,
                                  train_seed(cfg.seed, c.client_id, r), cfg.batch_size))
        weights.append(len(c.train))
    weights = np.asarray(weights, dtype=float)
    return np.tensordot(weights / weights.sum(), np.stack(models), axes=1)


def _sync_fedavg(cfg: RunConfig, env: Environment) -> RunMetrics:
    w = env.initial_params
    publisher = Publisher(cfg, [_pooled_val(env, w)], checks_per_round=1)
    acc0 = _test(env, w)
    rows = [LogRow(0.0, c.client_id, 0, "init", acc0) for c in env.clients]
    slowest = max(c.speed_factor for c in env.clients)
    round_time = cfg.base_epoch_time * cfg.local_epochs * slowest
    t = 0.0
    history = [w]
    for r in range(1, cfg.max_global_iters + 1):
        rows.extend(LogRow(t, c.client_id, r - 1, "select") for c in env.clients)
        w = fedavg_round(w, env, cfg, r)
        history.append(w)
        t += round_time
        acc = _test(env, w)
        rows.extend(LogRow(t, c.client_id, r, "upload", acc) for c in env.clients)
        if publisher.check(None, _pooled_val(env, w)):
            break
    metrics = collect_metrics(rows, cfg.target_accuracy, terminated_by=publisher.terminated_by or "max_iters",
                              extra={"policy": "sync-fedavg"})
    metrics.history = history
    return metrics


def _pure_async(cfg: RunConfig, env: Environment) -> RunMetrics:
    server = env.initial_params
    publisher = Publisher(cfg, [_pooled_val(env, server)] * len(env.clients))
    rows = [LogRow(0.0, -1, 0, "init", _test(env, server))]
    epochs = {c.client_id: 0 for c in env.clients}
    queue = EventQueue()
    for c in env.clients:
        queue.push(0.0, "wake", c.client_id)
    while queue:
        now, _, kind, payload = queue.pop()
        if kind == "wake":
            c = env.clients[payload]
            if publisher.terminated_by is not None or epochs[c.client_id] >= cfg.max_global_iters:
                continue
            trained = local_train(server, env.dims, c.train.X, c.train.y, cfg.local_epochs, cfg.lr,
                                  train_seed(cfg.seed, c.client_id, epochs[c.client_id] + 1), cfg.batch_size)
            rows.append(LogRow(now, c.client_id, epochs[c.client_id], "select"))
            queue.push(now + cfg.base_epoch_time * cfg.local_epochs * c.speed_factor, "upload",
                       (c.client_id, trained))
        else:
            cid, trained = payload
            epochs[cid] += 1
            server = (1.0 - ASYNC_MIXING) * server + ASYNC_MIXING * trained
            rows.append(LogRow(now, cid, epochs[cid], "upload", _test(env, server)))
            reason = publisher.check(None, _pooled_val(env, server))
            if reason is None and epochs[cid] < cfg.max_global_iters:
                queue.push(now, "wake", cid)
    return collect_metrics(rows, cfg.target_accuracy, mode="latest",
                           terminated_by=publisher.terminated_by or "max_iters",
                           extra={"policy": "pure-async"})
