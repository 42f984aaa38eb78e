"""Analytic timing of KV transfers over a GPU-CPU link.

Bandwidths are in GB/s where GB = 2**30 bytes; sizes are bytes. A
per-segment copy pays one launch per segment and moves data at the
bandwidth of its segment size. A batched copy pays a single launch and
streams all descriptors back to back, so it runs at the bandwidth of its
aggregate size.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.optimize import least_squares

from .core import GB, KB, MB
from .kvcache import Direction, TransferMode, TransferPlan

DEFAULT_CURVE = (
    (64 * KB, 9.0),
    (1 * MB, 80.0),
    (4 * MB, 140.0),
    (8 * MB, 200.0),
    (64 * MB, 240.0),
)


class CalibrationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class LinkProfile:
    bw_curve: tuple[tuple[float, float], ...] = DEFAULT_CURVE
    c2c_per_direction_cap: float = 450.0
    dram_total_cap: float = 384.0
    launch_overhead: float = 2e-6
    batch_launch_overhead: float = 2e-6
    duplex_efficiency: float = 0.94
    name: str = "gh200-seed"

    def __post_init__(self):
        curve = tuple((float(s), float(bw)) for s, bw in self.bw_curve)
        object.__setattr__(self, "bw_curve", curve)
        if not curve:
            raise ValueError("bw_curve must not be empty")
        sizes = [s for s, _ in curve]
        bws = [bw for _, bw in curve]
        if any(s <= 0 for s in sizes) or sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
            raise ValueError("bw_curve sizes must be positive and strictly increasing")
        if any(b2 < b1 for b1, b2 in zip(bws, bws[1:])):
            raise ValueError("bw_curve must be non-decreasing in segment size")
        if any(bw <= 0 or bw > self.c2c_per_direction_cap * (1 + 1e-12) for bw in bws):
            raise ValueError("bw_curve values must lie in (0, c2c_per_direction_cap]")
        if not 0 < self.duplex_efficiency <= 1:
            raise ValueError("duplex_efficiency must lie in (0, 1]")
        if self.launch_overhead < 0 or self.batch_launch_overhead < 0:
            raise ValueError("launch overheads must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "bw_curve": [[s, bw] for s, bw in self.bw_curve],
            "c2c_per_direction_cap": self.c2c_per_direction_cap,
            "dram_total_cap": self.dram_total_cap,
            "launch_overhead": self.launch_overhead,
            "batch_launch_overhead": self.batch_launch_overhead,
            "duplex_efficiency": self.duplex_efficiency,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LinkProfile":
        data = dict(data)
        data["bw_curve"] = tuple(tuple(p) for p in data["bw_curve"])
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "LinkProfile":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def gh200_calibrated() -> LinkProfile:
    text = resources.files("kvrot.data").joinpath("gh200-calibrated.json").read_text("utf-8")
    return LinkProfile.from_dict(json.loads(text))


def ideal_link(dram_total_cap: float = 384.0) -> LinkProfile:
    """No launch cost, flat curve at the per-direction cap, lossless duplex."""
    return LinkProfile(
        bw_curve=((1.0, 450.0),),
        c2c_per_direction_cap=450.0,
        dram_total_cap=dram_total_cap,
        launch_overhead=0.0,
        batch_launch_overhead=0.0,
        duplex_efficiency=1.0,
        name="ideal",
    )


def pcie_gen5_link() -> LinkProfile:
    """PCIe Gen5 x16 host link profile (~64 GB/s ceiling per direction)."""
    return LinkProfile(
        bw_curve=((64 * KB, 6.0), (1 * MB, 30.0), (8 * MB, 50.0), (64 * MB, 53.0)),
        c2c_per_direction_cap=64.0,
        dram_total_cap=384.0,
        launch_overhead=2e-6,
        batch_launch_overhead=2e-6,
        duplex_efficiency=1.0,
        name="pcie-gen5x16",
    )


def bandwidth_lookup(segment_bytes: float, link: LinkProfile) -> float:
    """Uni-directional GB/s for transfers of ``segment_bytes``, log-linear in size."""
    if segment_bytes <= 0:
        raise ValueError("segment_bytes must be > 0")
    sizes = np.log([s for s, _ in link.bw_curve])
    bws = [bw for _, bw in link.bw_curve]
    return float(np.interp(math.log(segment_bytes), sizes, bws))


def _lookup_size(plan: TransferPlan) -> float:
    if plan.mode is TransferMode.BATCHED:
        return plan.total_bytes
    return plan.segment_bytes


def _launch_time(plan: TransferPlan, link: LinkProfile) -> float:
    if plan.mode is TransferMode.BATCHED:
        return link.batch_launch_overhead
    return plan.segments * link.launch_overhead


def _rate(plan: TransferPlan, link: LinkProfile) -> float:
    # DRAM is half-duplex: even a lone direction cannot exceed its total.
    return min(
        bandwidth_lookup(_lookup_size(plan), link),
        link.c2c_per_direction_cap,
        link.dram_total_cap,
    )


def uni_transfer_time(plan: TransferPlan, link: LinkProfile) -> float:
    if plan.empty:
        return 0.0
    return _launch_time(plan, link) + plan.total_bytes / (_rate(plan, link) * GB)


def duplex_rates(d2h: TransferPlan, h2d: TransferPlan, link: LinkProfile) -> tuple[float, float]:
    """Per-direction GB/s while both directions are streaming."""
    cap = link.duplex_efficiency * link.dram_total_cap
    r1 = min(_rate(d2h, link), cap)
    r2 = min(_rate(h2d, link), cap)
    if r1 + r2 > cap:
        k = cap / (r1 + r2)
        r1, r2 = r1 * k, r2 * k
    return r1, r2


def duplex_transfer_time(d2h: TransferPlan, h2d: TransferPlan, link: LinkProfile) -> float:
    """Completion time of concurrent D2H and H2D streams sharing DRAM bandwidth.

    Both streams share the DRAM ceiling while overlapping; once one drains,
    the other continues at its solo rate. The engine never runs the
    directions concurrently when serializing them would be faster.
    """
    if d2h.empty:
        return uni_transfer_time(h2d, link)
    if h2d.empty:
        return uni_transfer_time(d2h, link)
    serial = uni_transfer_time(d2h, link) + uni_transfer_time(h2d, link)

    cap = link.duplex_efficiency * link.dram_total_cap
    solo = [min(_rate(p, link), cap) * GB for p in (d2h, h2d)]
    shared = [r * GB for r in duplex_rates(d2h, h2d, link)]
    start = [_launch_time(d2h, link), _launch_time(h2d, link)]
    left = [float(d2h.total_bytes), float(h2d.total_bytes)]
    t = min(start)
    done = [math.inf, math.inf]
    while any(math.isinf(d) for d in done):
        active = [i for i in (0, 1) if math.isinf(done[i]) and start[i] <= t]
        if not active:
            t = min(start[i] for i in (0, 1) if math.isinf(done[i]))
            continue
        rates = shared if len(active) == 2 else solo
        # Next event: a stream drains or the other stream starts.
        horizon = min(left[i] / rates[i] for i in active)
        pending = [start[i] for i in (0, 1) if math.isinf(done[i]) and start[i] > t]
        step = min([horizon] + [s - t for s in pending])
        for i in active:
            left[i] -= rates[i] * step
            if left[i] <= 1e-9 * max(1.0, d2h.total_bytes + h2d.total_bytes):
                left[i] = 0.0
                done[i] = t + step
        t += step
    return min(max(done), serial)


# -- calibration -------------------------------------------------------------


@dataclass(frozen=True)
class TableRow:
    method: str
    d2h_gbps: float
    h2d_gbps: float
    e2e_ms: float


@dataclass(frozen=True)
class CalibrationTargets:
    """Measured bidirectional transfer of one KV volume per direction."""

    bytes_per_direction: int
    small_segment: int
    merged_segment: int
    rows: tuple[TableRow, ...]
    tolerance: float = 0.15

    def row(self, method: str) -> TableRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CalibrationTargets":
        return cls(
            bytes_per_direction=int(data["bytes_per_direction"]),
            small_segment=int(data["small_segment"]),
            merged_segment=int(data["merged_segment"]),
            rows=tuple(TableRow(**r) for r in data["rows"]),
            tolerance=float(data.get("tolerance", 0.15)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "bytes_per_direction": self.bytes_per_direction,
            "small_segment": self.small_segment,
            "merged_segment": self.merged_segment,
            "tolerance": self.tolerance,
            "rows": [r.__dict__ for r in self.rows],
        }


# 32768 tokens of a 64-layer, 4KB/token/layer model per direction.
MEASURED_E2E = CalibrationTargets(
    bytes_per_direction=8 * GB,
    small_segment=64 * KB,
    merged_segment=4 * MB,
    rows=(
        TableRow("naive", 10.75, 9.86, 1556.15),
        TableRow("ms", 80.05, 133.51, 159.87),
        TableRow("ms+mk", 238.95, 269.69, 63.14),
        TableRow("duplexkv", 180.99, 179.37, 46.80),
        TableRow("ideal", 192.00, 192.00, 41.66),
    ),
)

ENGINE_METHODS = ("naive", "ms", "ms+mk", "duplexkv")


def load_targets(path: str | Path | None = None) -> CalibrationTargets:
    """Targets from ``path``, or the packaged copy of the measured table."""
    if path is None:
        text = resources.files("kvrot.data").joinpath("measured-e2e.json").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return CalibrationTargets.from_dict(json.loads(text))


def _plans(nbytes: int, seg: int, mode: TransferMode) -> tuple[TransferPlan, TransferPlan]:
    n = nbytes // seg
    return tuple(
        TransferPlan(direction=d, segments=n, segment_bytes=seg, total_bytes=n * seg, mode=mode)
        for d in (Direction.D2H, Direction.H2D)
    )


def predict_e2e(link: LinkProfile, targets: CalibrationTargets = MEASURED_E2E) -> dict[str, float]:
    """Predicted end-to-end milliseconds for every method of ``targets``."""
    nbytes = targets.bytes_per_direction
    out = {}
    d, h = _plans(nbytes, targets.small_segment, TransferMode.PER_SEGMENT)
    out["naive"] = uni_transfer_time(d, link) + uni_transfer_time(h, link)
    d, h = _plans(nbytes, targets.merged_segment, TransferMode.PER_SEGMENT_MERGED)
    out["ms"] = uni_transfer_time(d, link) + uni_transfer_time(h, link)
    d, h = _plans(nbytes, targets.merged_segment, TransferMode.BATCHED)
    out["ms+mk"] = uni_transfer_time(d, link) + uni_transfer_time(h, link)
    out["duplexkv"] = duplex_transfer_time(d, h, link)
    out["ideal"] = duplex_transfer_time(d, h, ideal_link(link.dram_total_cap))
    return {k: v * 1e3 for k, v in out.items()}


def _with_points(curve, updates: dict[float, float], cap: float):
    pts = dict(curve)
    pts.update(updates)
    sizes = sorted(pts)
    bws = np.maximum.accumulate([pts[s] for s in sizes])
    bws = np.minimum(bws, cap)
    return tuple((s, float(b)) for s, b in zip(sizes, bws))


def calibrate(
    link: LinkProfile,
    targets: CalibrationTargets = MEASURED_E2E,
    prior_weight: float = 0.01,
) -> LinkProfile:
    """Fit ``link`` to the measured end-to-end times of ``targets``.

    The duplex efficiency is solved directly from the measured concurrent
    rates. Launch overhead and the curve points at the small segment, the
    merged segment and the largest size are then fitted in log space to the
    three direction-serialized rows, weakly anchored to the input profile.
    """
    duplex = targets.row("duplexkv")
    eta = min(1.0, (duplex.d2h_gbps + duplex.h2d_gbps) / link.dram_total_cap)
    base = replace(link, duplex_efficiency=eta)

    top = max(max(s for s, _ in base.bw_curve), 64 * MB)
    small, merged = float(targets.small_segment), float(targets.merged_segment)
    x0 = np.log(
        [
            max(base.launch_overhead, base.batch_launch_overhead, 1e-9),
            bandwidth_lookup(small, base),
            bandwidth_lookup(merged, base),
            bandwidth_lookup(top, base),
        ]
    )
    lo = np.log([max(base.batch_launch_overhead, 1e-9), 0.01, 0.01, 0.01])
    hi = np.log([1e-3] + [base.c2c_per_direction_cap] * 3)
    x0 = np.clip(x0, lo, hi)
    serial_rows = [targets.row(m) for m in ("naive", "ms", "ms+mk")]

    def build(x) -> LinkProfile:
        t, b_small, b_merged, b_top = np.exp(x)
        curve = _with_points(
            base.bw_curve,
            {small: b_small, merged: b_merged, top: b_top},
            base.c2c_per_direction_cap,
        )
        return replace(base, launch_overhead=float(t), bw_curve=curve)

    def residuals(x):
        pred = predict_e2e(build(x), targets)
        fit = [math.log(pred[r.method] / r.e2e_ms) for r in serial_rows]
        prior = list(prior_weight * (x - x0))
        return fit + prior

    sol = least_squares(residuals, x0, bounds=(lo, hi), xtol=1e-12, ftol=1e-12, gtol=1e-12)
    fitted = replace(build(sol.x), name="gh200-calibrated")

    errors = calibration_errors(fitted, targets)
    bad = {m: e for m, e in errors.items() if abs(e) > targets.tolerance}
    if bad:
        raise CalibrationFailed(f"rows outside +/-{targets.tolerance:.0%}: {bad}")
    return fitted


def calibration_errors(link: LinkProfile, targets: CalibrationTargets = MEASURED_E2E) -> dict[str, float]:
    """Relative error of predicted vs measured E2E time per row."""
    pred = predict_e2e(link, targets)
    return {r.method: pred[r.method] / r.e2e_ms - 1.0 for r in targets.rows}


def e2e_ordering_holds(pred: dict[str, float], order: Sequence[str] = ("naive", "ms", "ms+mk", "duplexkv", "ideal")) -> bool:
    return all(pred[a] > pred[b] for a, b in zip(order, order[1:]))
