"""Command-line entry point.

    dagafl run        --config PATH [--out DIR] [--seed U64] [--trace]
    dagafl verify     LEDGER TIP_DIGEST [--node ID]
    dagafl bench      --config PATH --policies dag-afl,sync-fedavg [--seeds 10]
    dagafl export-dag REPLAY [--out DIR]

Exit codes: 0 success, 1 usage or config error, 2 runtime error,
3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import statistics
import sys
from pathlib import Path

from .baselines import POLICIES, run_policy
from .config import ConfigError, RunConfig
from .ledger import LedgerError, ledger_from_nodes, parse_export, path_from_export, verify_path
from .metrics import NOT_REACHED
from .simulation import run, verify_client_paths

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("dagafl")


class UsageError(Exception):
    pass


def load_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "trace", False):
        overrides["trace"] = True
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    if args.config is None:
        return RunConfig(**overrides)
    return RunConfig.load(args.config, **overrides)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def cmd_run(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run(cfg)
    _write(out / "config.txt", cfg.to_text())
    _write(out / "metrics.csv", result.metrics.rows_csv())
    _write(out / "summary.json", result.metrics.summary_json())
    _write(out / "ledger.jsonl", result.ledger.to_jsonl())
    _write(out / "events.jsonl", result.events_jsonl())
    _write(out / "similarity.csv", result.env.registry.to_csv())
    if cfg.trace:
        _write(out / "trace.csv", _trace_csv(result.trace))
    failed = {c: v for c, v in verify_client_paths(result.env).items() if v != "accepted"}
    summary = result.metrics.summary()
    print(f"terminated_by={summary['terminated_by']} uploads={summary['n_uploads']} "
          f"final_mean_accuracy={summary['final_mean_accuracy']:.4f} "
          f"time_to_target={summary['time_to_target']}")
    if failed:
        print(f"path verification failed for clients {sorted(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _trace_csv(trace) -> str:
    buf = io.StringIO()
    cols = ["time", "selector", "tip", "reachable", "tipc", "freshness", "similarity", "accuracy", "chosen"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for row in trace:
        w.writerow({k: ("" if row[k] is None else row[k]) for k in cols})
    return buf.getvalue()


def cmd_verify(args) -> int:
    try:
        trusted = bytes.fromhex(args.tip_digest)
    except ValueError:
        raise UsageError(f"tip digest is not hex: {args.tip_digest!r}") from None
    if len(trusted) != 32:
        raise UsageError("tip digest must be 32 bytes (64 hex characters)")
    with open(args.ledger, encoding="utf-8") as fh:
        nodes = parse_export(fh)
    if args.node is not None:
        node_id = args.node
    else:
        matches = [n.id for n in nodes if n.digest == trusted]
        if not matches:
            print("tampered-at(unknown): no exported node carries this digest")
            return EXIT_VERIFY
        node_id = matches[0]
    verdict = verify_path(path_from_export(nodes, node_id), trusted)
    print(verdict)
    return EXIT_OK if verdict.accepted else EXIT_VERIFY


def median_or_not_reached(values):
    """Median where "not reached" sorts above every time."""
    vals = [math.inf if v == NOT_REACHED else float(v) for v in values]
    m = statistics.median(vals)
    return NOT_REACHED if math.isinf(m) else m


def bench_table(cfg: RunConfig, policies, seeds) -> list[dict]:
    rows = []
    for policy in policies:
        for seed in seeds:
            s = run_policy(cfg.replace(seed=seed), policy).summary()
            rows.append({"policy": policy, "seed": seed, "time_to_target": s["time_to_target"],
                         "final_accuracy": s["final_mean_accuracy"]})
            log.info("bench %s seed %d: %s", policy, seed, rows[-1])
    for policy in policies:
        mine = [r for r in rows if r["policy"] == policy]
        rows.append({"policy": policy, "seed": "median",
                     "time_to_target": median_or_not_reached([r["time_to_target"] for r in mine]),
                     "final_accuracy": statistics.median(r["final_accuracy"] for r in mine)})
    return rows


def bench_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["policy", "seed", "time_to_target", "final_accuracy"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_bench(args) -> int:
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not policies:
        raise UsageError("at least one policy is required")
    unknown = [p for p in policies if p not in POLICIES]
    if unknown:
        raise UsageError(f"unknown policy {unknown[0]!r}; expected one of {', '.join(POLICIES)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    cfg = load_config(args)
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    text = bench_csv(bench_table(cfg, policies, seeds))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "bench.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_export_dag(args) -> int:
    """Rebuild the ledger from an event-log replay file and re-emit it."""
    records = []
    with open(args.replay, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                ev = json.loads(line)
            except ValueError as exc:
                raise LedgerError(f"line {lineno}: not JSON ({exc})") from None
            if ev.get("kind") in ("genesis", "upload"):
                records.append(json.dumps(ev["node"]))
    ledger = ledger_from_nodes(parse_export(records))
    text = ledger.to_jsonl()
    if args.out is None:
        sys.stdout.write(text)
    else:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "ledger.jsonl", text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagafl", description="DAG-based asynchronous FL simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def u64(text):
        value = int(text)
        if not 0 <= value < 2 ** 64:
            raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
        return value

    def common(p, trace=True):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--seed", type=u64, metavar="U64")
        if trace:
            p.add_argument("--trace", action="store_true")

    p = sub.add_parser("run", help="run one simulation and write its artifacts")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="verify a ledger export against a trusted tip digest")
    p.add_argument("ledger", metavar="LEDGER")
    p.add_argument("tip_digest", metavar="TIP_DIGEST")
    p.add_argument("--node", type=int, help="node id of the tip (default: the node with this digest)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="compare policies over several seeds")
    common(p)
    p.add_argument("--policies", default="dag-afl,sync-fedavg")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-dag", help="re-emit the JSON-lines ledger from an event replay file")
    p.add_argument("replay", metavar="REPLAY")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_export_dag)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LedgerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY if args.command in ("verify", "export-dag") else EXIT_RUNTIME
    except Exception as exc:  # any other failure aborts the run with a diagnostic
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
