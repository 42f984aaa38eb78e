"""Synthetic Poisson workloads and JSONL length traces."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence, Union

import numpy as np

from .core import Request

# A length distribution is a fixed int, an empirical list sampled uniformly,
# or {"lognormal": {"median": m, "sigma": s, "min": lo, "max": hi}}.
LengthDist = Union[int, Sequence[int], Mapping[str, Any]]


class WorkloadSource(enum.Enum):
    SYNTHETIC = "synthetic"
    TRACE = "trace"


class TraceError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ParseError(TraceError):
    pass


class NegativeLength(TraceError):
    pass


@dataclass
class WorkloadSpec:
    source: WorkloadSource = WorkloadSource.SYNTHETIC
    rps: float = 1.0
    n_requests: int = 100
    prompt_len_dist: LengthDist = 512
    output_len_dist: LengthDist = 128
    trace_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.source, str):
            self.source = WorkloadSource(self.source.lower())
        if self.n_requests < 1:
            raise ValueError(f"n_requests must be >= 1, got {self.n_requests}")
        if self.source is WorkloadSource.SYNTHETIC and not self.rps > 0:
            raise ValueError(f"rps must be > 0 for synthetic workloads, got {self.rps}")
        if self.source is WorkloadSource.TRACE and not self.trace_path:
            raise ValueError("trace workloads need trace_path")

    def to_dict(self) -> dict[str, Any]:
        def plain(d):
            return list(d) if isinstance(d, (list, tuple)) else d

        return {
            "source": self.source.value,
            "rps": self.rps,
            "n_requests": self.n_requests,
            "prompt_len_dist": plain(self.prompt_len_dist),
            "output_len_dist": plain(self.output_len_dist),
            "trace_path": self.trace_path,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WorkloadSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown WorkloadSpec fields: {sorted(unknown)}")
        return cls(**data)


def gen_arrivals(rps: float, n: int, seed: int) -> list[float]:
    if not rps > 0:
        raise ValueError(f"rps must be > 0, got {rps}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / rps, size=n)
    return np.cumsum(gaps).tolist()


def sample_lengths(dist: LengthDist, n: int, rng: np.random.Generator) -> list[int]:
    if isinstance(dist, (int, np.integer)):
        if dist < 0:
            raise ValueError(f"fixed length must be >= 0, got {dist}")
        return [int(dist)] * n
    if isinstance(dist, Mapping):
        if set(dist) != {"lognormal"}:
            raise ValueError(f"unsupported distribution {sorted(dist)}; expected 'lognormal'")
        p = dist["lognormal"]
        median, sigma = float(p["median"]), float(p["sigma"])
        lo, hi = int(p.get("min", 1)), int(p.get("max", 1 << 20))
        raw = rng.lognormal(np.log(median), sigma, size=n)
        return np.clip(np.rint(raw), lo, hi).astype(int).tolist()
    values = list(dist)
    if not values:
        raise ValueError("empirical distribution is empty")
    if any(v < 0 for v in values):
        raise ValueError("empirical lengths must be >= 0")
    idx = rng.integers(0, len(values), size=n)
    return [int(values[i]) for i in idx]


def load_trace(path: str | Path, n_requests: int | None = None) -> list[dict[str, Any]]:
    """Parse a JSONL length trace into row dicts.

    Each row has ``prompt_tokens``, ``output_tokens`` and, when present in
    the file, ``arrival_s``. Blank lines are skipped.
    """
    rows: list[dict[str, Any]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if n_requests is not None and len(rows) >= n_requests:
                break
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(lineno, f"invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(lineno, "expected a JSON object")
            row: dict[str, Any] = {}
            for key in ("prompt_tokens", "output_tokens"):
                v = obj.get(key)
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ParseError(lineno, f"{key} must be an integer")
                if v < 0:
                    raise NegativeLength(lineno, f"{key} = {v}")
                row[key] = v
            if "arrival_s" in obj:
                t = obj["arrival_s"]
                if isinstance(t, bool) or not isinstance(t, (int, float)) or not np.isfinite(t) or t < 0:
                    raise ParseError(lineno, "arrival_s must be a finite number >= 0")
                row["arrival_s"] = float(t)
            rows.append(row)
    return rows


def trace_requests(path: str | Path, rps: float = 1.0, seed: int = 0, n_requests: int | None = None) -> list[Request]:
    rows = load_trace(path, n_requests)
    if not rows:
        return []
    if all("arrival_s" in r for r in rows):
        arrivals = [r["arrival_s"] for r in rows]
    elif any("arrival_s" in r for r in rows):
        raise ParseError(1, "arrival_s must be given on every line or on none")
    else:
        arrivals = gen_arrivals(rps, len(rows), seed)
    reqs = [
        Request(id=i, t_arr=t, prompt_tokens=r["prompt_tokens"], output_tokens=r["output_tokens"])
        for i, (t, r) in enumerate(zip(arrivals, rows))
    ]
    return sorted(reqs, key=lambda r: (r.t_arr, r.id))


def build_workload(spec: WorkloadSpec) -> list[Request]:
    if spec.source is WorkloadSource.TRACE:
        return trace_requests(spec.trace_path, spec.rps, spec.seed, spec.n_requests)
    n = spec.n_requests
    arrivals = gen_arrivals(spec.rps, n, spec.seed)
    # Lengths use a separate stream so changing rps keeps the length mix.
    rng = np.random.default_rng([spec.seed, 1])
    prompts = sample_lengths(spec.prompt_len_dist, n, rng)
    outputs = sample_lengths(spec.output_len_dist, n, rng)
    return [
        Request(id=i, t_arr=t, prompt_tokens=p, output_tokens=max(1, o))
        for i, (t, p, o) in enumerate(zip(arrivals, prompts, outputs))
    ]
