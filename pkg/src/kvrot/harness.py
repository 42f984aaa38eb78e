"""Experiment matrices: cross-product sweeps, per-cell outputs, plot data."""

from __future__ import annotations

import csv
import io
import itertools
import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from .engine import SimConfig, run
from .metrics import summarize, write_metrics, write_request_csv
from .scheduler import PolicyKind
from .workload import WorkloadSpec, build_workload

SWEEPABLE = ("policy", "rps", "alpha", "beta_b", "beta_f", "b_xfer", "engine_mode")
METRIC_KEYS = (
    "ttft_attainment",
    "tbt_attainment",
    "p50_ttft_s",
    "p99_ttft_s",
    "p50_tbt_s",
    "p99_tbt_s",
    "throughput_tok_s",
    "n_requests",
)
REPETITION_SEED_STRIDE = 10**6


@dataclass
class ExperimentMatrix:
    base: SimConfig
    workload: WorkloadSpec
    sweeps: dict[str, list[Any]] = field(default_factory=dict)
    repetitions: int = 1
    output_dir: str = "results"
    max_cells: int = 10_000
    # Common random numbers: every cell of a repetition replays one workload.
    paired_workloads: bool = False

    def __post_init__(self):
        bad = [k for k in self.sweeps if k not in SWEEPABLE]
        if bad:
            raise ValueError(f"unsupported sweep parameters {bad}; supported: {', '.join(SWEEPABLE)}")
        for k, values in self.sweeps.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise ValueError(f"sweep {k!r} needs a non-empty list of values")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.n_runs > self.max_cells:
            raise ValueError(f"matrix has {self.n_runs} runs, above the limit of {self.max_cells}")

    @property
    def names(self) -> list[str]:
        return sorted(self.sweeps)

    @property
    def n_runs(self) -> int:
        n = self.repetitions
        for values in self.sweeps.values():
            n *= len(values)
        return n

    def cells(self) -> list[dict[str, Any]]:
        names = self.names
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.sweeps[n] for n in names))]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentMatrix":
        data = dict(data)
        known = {"base", "workload", "sweeps", "repetitions", "output_dir", "max_cells", "paired_workloads"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ExperimentMatrix fields: {sorted(unknown)}")
        data["base"] = SimConfig.from_dict(data.get("base", {}))
        data["workload"] = WorkloadSpec.from_dict(data.get("workload", {}))
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentMatrix":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def apply_params(config: SimConfig, spec: WorkloadSpec, params: Mapping[str, Any]) -> tuple[SimConfig, WorkloadSpec]:
    cfg_kw: dict[str, Any] = {}
    vlt = config.vlt
    for name, value in params.items():
        if name == "rps":
            spec = replace(spec, rps=float(value))
        elif name == "policy":
            cfg_kw["policy"] = PolicyKind.parse(value)
        elif name == "engine_mode":
            cfg_kw["engine_mode"] = value
        elif name == "b_xfer":
            cfg_kw["b_xfer"] = int(value)
        elif name in ("alpha", "beta_b", "beta_f"):
            vlt = replace(vlt, **{name: float(value)})
        else:
            raise ValueError(f"unsupported sweep parameter {name!r}")
    if vlt is not config.vlt:
        cfg_kw["vlt"] = vlt
    return replace(config, **cfg_kw), spec


def _fmt(value: Any) -> str:
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    return re.sub(r"[^A-Za-z0-9.+-]", "-", str(value))


def cell_stem(index: int, rep: int, params: Mapping[str, Any]) -> str:
    parts = [f"cell{index:04d}", f"rep{rep}"]
    parts += [f"{k}={_fmt(params[k])}" for k in sorted(params)]
    return "_".join(parts)


@dataclass(frozen=True)
class _Job:
    index: int
    rep: int
    seed: int
    params: dict
    config: dict
    workload: dict
    out_dir: str
    stem: str


def _run_job(job: _Job) -> dict[str, Any]:
    row: dict[str, Any] = {"cell": job.index, "rep": job.rep, "seed": job.seed, **job.params}
    try:
        cfg, spec = apply_params(SimConfig.from_dict(job.config), WorkloadSpec.from_dict(job.workload), job.params)
        requests = build_workload(spec)
        res = run(cfg, requests)
        unfinished = len(requests) - len(res.requests)
        if unfinished:
            raise RuntimeError(f"{unfinished} requests did not finish")
        metrics = summarize(res.requests, cfg.slos)
        out = Path(job.out_dir)
        write_metrics(metrics, out / f"{job.stem}.metrics.json")
        write_request_csv(res.requests, out / f"{job.stem}.requests.csv")
        row.update(metrics)
        row["status"] = "ok"
        row["error"] = ""
    except Exception as e:  # a failed cell must not abort the matrix
        row.update({k: "" for k in METRIC_KEYS})
        row["status"] = "failed"
        row["error"] = f"{type(e).__name__}: {e}"
    return row


def run_matrix(matrix: ExperimentMatrix, workers: int = 1) -> list[dict[str, Any]]:
    """Run every cell and repetition; write per-cell files and ``index.csv``.

    Returns the index rows in cell order. Cell seed is the base seed plus the
    cell index, offset by repetition x 10^6.
    """
    out = Path(matrix.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for rep in range(matrix.repetitions):
        for index, params in enumerate(matrix.cells()):
            seed = matrix.base.seed + index + rep * REPETITION_SEED_STRIDE
            cfg = replace(matrix.base, seed=seed)
            wl_seed = matrix.workload.seed + rep * REPETITION_SEED_STRIDE if matrix.paired_workloads else seed
            spec = replace(matrix.workload, seed=wl_seed)
            jobs.append(
                _Job(
                    index=index,
                    rep=rep,
                    seed=seed,
                    params=dict(params),
                    config=cfg.to_dict(),
                    workload=spec.to_dict(),
                    out_dir=str(out),
                    stem=cell_stem(index, rep, params),
                )
            )
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_run_job, jobs))
    else:
        rows = [_run_job(j) for j in jobs]
    rows.sort(key=lambda r: (r["cell"], r["rep"]))
    write_index(rows, matrix.names, out / "index.csv")
    return rows


def index_columns(param_names: Sequence[str]) -> list[str]:
    return ["cell", "rep", "seed", *param_names, "status", "error", *sorted(METRIC_KEYS)]


def write_index(rows: Sequence[Mapping[str, Any]], param_names: Sequence[str], path: str | Path) -> None:
    cols = index_columns(param_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([_csv_value(row.get(c, "")) for c in cols])


def _csv_value(v: Any) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def read_index(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    """Return (swept parameter names, rows)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        rows = list(reader)
    fixed = {"cell", "rep", "seed", "status", "error", *METRIC_KEYS}
    return [c for c in cols if c not in fixed], rows


def emit_plot_data(
    index: str | Path | tuple[list[str], list[dict[str, str]]], x_param: str, y_metric: str
) -> str:
    """Reshape an index into a tidy CSV: one x column plus one column per series.

    Series are the combinations of the other swept parameters; repetitions
    are averaged. Failed cells are skipped.
    """
    params, rows = read_index(index) if not isinstance(index, tuple) else index
    if x_param not in params:
        raise ValueError(f"x parameter {x_param!r} was not swept; swept parameters: {', '.join(params) or 'none'}")
    if y_metric not in METRIC_KEYS:
        raise ValueError(f"unknown metric {y_metric!r}; valid metrics: {', '.join(METRIC_KEYS)}")
    others = [p for p in params if p != x_param]
    xs: list[str] = []
    series: list[str] = []
    acc: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        if row.get("status") != "ok":
            continue
        x = row[x_param]
        label = ",".join(f"{p}={row[p]}" for p in others) or y_metric
        if x not in xs:
            xs.append(x)
        if label not in series:
            series.append(label)
        acc.setdefault((x, label), []).append(float(row[y_metric]))
    xs.sort(key=_sort_key)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([x_param, *series])
    for x in xs:
        line = [x]
        for label in series:
            vals = acc.get((x, label))
            line.append(repr(sum(vals) / len(vals)) if vals else "")
        w.writerow(line)
    return buf.getvalue()


def _sort_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)

