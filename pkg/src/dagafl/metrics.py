"""Run log rows, summary metrics and their CSV / JSON forms."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

NOT_REACHED = "not reached"


@dataclass(frozen=True)
class LogRow:
    time: float
    client: int
    epoch: int
    event: str  # init | select | upload | terminate
    accuracy: float | None = None


@dataclass
class RunMetrics:
    rows: list[LogRow]
    time_to_target: float | None
    final_mean_accuracy: float
    uploads_per_sec: float
    mean_latency: float
    terminated_by: str
    n_uploads: int
    makespan: float
    extra: dict
    history: list | None = None  # per-round global models, where a policy has them

    def summary(self) -> dict:
        out = {
            "time_to_target": NOT_REACHED if self.time_to_target is None else self.time_to_target,
            "final_mean_accuracy": self.final_mean_accuracy,
            "uploads_per_sec": self.uploads_per_sec,
            "mean_latency": self.mean_latency,
            "terminated_by": self.terminated_by,
            "n_uploads": self.n_uploads,
            "makespan": self.makespan,
        }
        out.update(self.extra)
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def rows_csv(self) -> str:
        return rows_to_csv(self.rows)


def accuracy_curve(rows: Sequence[LogRow], mode: str = "client-mean") -> list[tuple[float, float]]:
    """(time, accuracy) after each accuracy-bearing row.

    ``client-mean`` averages every client's most recent accuracy; ``latest``
    takes the row's own value (one model of record, e.g. a server model).
    """
    latest: dict[int, float] = {}
    curve = []
    for r in rows:
        if r.accuracy is None:
            continue
        if mode == "latest":
            curve.append((r.time, r.accuracy))
        else:
            latest[r.client] = r.accuracy
            curve.append((r.time, sum(latest.values()) / len(latest)))
    return curve


def collect_metrics(rows: Sequence[LogRow], target: float | None = None, *,
                    mode: str = "client-mean", terminated_by: str = "",
                    extra: dict | None = None) -> RunMetrics:
    if not rows:
        raise ValueError("empty run log")
    if mode not in ("client-mean", "latest"):
        raise ValueError(f"unknown accuracy mode {mode!r}")
    curve = accuracy_curve(rows, mode)
    ttt = None
    if target is not None:
        for t, acc in curve:
            if acc >= target:
                ttt = t
                break
    final = curve[-1][1] if curve else math.nan

    started: dict[int, float] = {}
    lat = []
    n_up = 0
    for r in rows:
        if r.event == "select":
            started[r.client] = r.time
        elif r.event == "upload":
            n_up += 1
            if r.client in started:
                lat.append(r.time - started.pop(r.client))
    makespan = max(r.time for r in rows)
    return RunMetrics(
        rows=list(rows),
        time_to_target=ttt,
        final_mean_accuracy=final,
        uploads_per_sec=n_up / makespan if makespan > 0 else math.nan,
        mean_latency=sum(lat) / len(lat) if lat else math.nan,
        terminated_by=terminated_by,
        n_uploads=n_up,
        makespan=makespan,
        extra=dict(extra or {}),
    )


def rows_to_csv(rows: Iterable[LogRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "client", "epoch", "event", "accuracy"])
    for r in rows:
        w.writerow([repr(r.time), r.client, r.epoch, r.event, "" if r.accuracy is None else repr(r.accuracy)])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[LogRow]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        acc = rec["accuracy"]
        out.append(LogRow(float(rec["time"]), int(rec["client"]), int(rec["epoch"]), rec["event"],
                          float(acc) if acc else None))
    return out
