"""Latency metrics over finished requests."""

from __future__ import annotations

import csv
import enum
import json
import math
from pathlib import Path
from typing import Any, Sequence

from .core import Request, RequestState, SLOSpec


class TBTMode(enum.Enum):
    MAX_GAP = "max"
    MEAN_GAP = "mean"


def _check_finished(r: Request) -> None:
    if r.state is not RequestState.FINISHED:
        raise ValueError(f"request {r.id} is {r.state.value}, not finished")
    if not r.token_times:
        raise ValueError(f"request {r.id} has no tokens")


def ttft(r: Request) -> float:
    _check_finished(r)
    return r.token_times[0] - r.t_arr


def tbt_gaps(r: Request) -> list[float]:
    _check_finished(r)
    t = r.token_times
    return [b - a for a, b in zip(t, t[1:])]


def max_tbt(r: Request) -> float:
    gaps = tbt_gaps(r)
    return max(gaps) if gaps else 0.0


def request_tbt(r: Request, mode: TBTMode = TBTMode.MAX_GAP) -> float:
    """Per-request TBT statistic; 0 for single-token outputs."""
    gaps = tbt_gaps(r)
    if not gaps:
        return 0.0
    return max(gaps) if mode is TBTMode.MAX_GAP else sum(gaps) / len(gaps)


def slo_attainment(
    requests: Sequence[Request], slos: SLOSpec, mode: TBTMode = TBTMode.MAX_GAP
) -> tuple[float, float]:
    if not requests:
        return 1.0, 1.0
    ttft_ok = sum(1 for r in requests if ttft(r) <= slos.ttft_slo)
    tbt_ok = sum(1 for r in requests if request_tbt(r, mode) <= slos.tbt_slo)
    n = len(requests)
    return ttft_ok / n, tbt_ok / n


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the smallest value with at least p% at or below it."""
    if len(values) == 0:
        raise ValueError("percentile of empty input")
    if not 0 <= p <= 100:
        raise ValueError(f"p must be in [0, 100], got {p}")
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100 * len(ordered)))
    return ordered[rank - 1]


def throughput(requests: Sequence[Request]) -> float:
    if not requests:
        return 0.0
    tokens = sum(len(r.token_times) for r in requests)
    start = min(r.t_arr for r in requests)
    end = max(r.token_times[-1] for r in requests if r.token_times)
    span = end - start
    return tokens / span if span > 0 else 0.0


def summarize(requests: Sequence[Request], slos: SLOSpec, mode: TBTMode = TBTMode.MAX_GAP) -> dict[str, Any]:
    n = len(requests)
    if n == 0:
        return {
            "n_requests": 0,
            "ttft_attainment": 1.0,
            "tbt_attainment": 1.0,
            "p50_ttft_s": 0.0,
            "p99_ttft_s": 0.0,
            "p50_tbt_s": 0.0,
            "p99_tbt_s": 0.0,
            "throughput_tok_s": 0.0,
        }
    ttfts = [ttft(r) for r in requests]
    # TBT percentiles are over the same per-request statistic the attainment
    # uses, so p-quantiles and attainment describe one distribution.
    tbts = [request_tbt(r, mode) for r in requests]
    ttft_rate, tbt_rate = slo_attainment(requests, slos, mode)
    return {
        "n_requests": n,
        "ttft_attainment": ttft_rate,
        "tbt_attainment": tbt_rate,
        "p50_ttft_s": percentile(ttfts, 50),
        "p99_ttft_s": percentile(ttfts, 99),
        "p50_tbt_s": percentile(tbts, 50),
        "p99_tbt_s": percentile(tbts, 99),
        "throughput_tok_s": throughput(requests),
    }


def metrics_json(metrics: dict[str, Any]) -> str:
    # repr-exact floats and sorted keys keep reruns byte-identical.
    return json.dumps(metrics, sort_keys=True, indent=2) + "\n"


def write_metrics(metrics: dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(metrics_json(metrics), encoding="utf-8")


REQUEST_CSV_COLUMNS = ("id", "t_arr", "ttft_s", "max_tbt_s", "n_tokens", "n_preemptions")


def write_request_csv(requests: Sequence[Request], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REQUEST_CSV_COLUMNS)
        for r in sorted(requests, key=lambda r: r.id):
            w.writerow([r.id, repr(r.t_arr), repr(ttft(r)), repr(max_tbt(r)), len(r.token_times), r.n_preemptions])
