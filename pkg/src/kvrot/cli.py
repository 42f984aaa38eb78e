"""Command-line entry point: run, sweep, calibrate, plot-data."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from . import scenarios
from .engine import SimConfig, run, write_iteration_trace
from .harness import ExperimentMatrix, emit_plot_data, run_matrix
from .metrics import metrics_json, summarize, write_request_csv
from .transfer import (
    CalibrationFailed,
    LinkProfile,
    calibrate,
    calibration_errors,
    e2e_ordering_holds,
    gh200_calibrated,
    load_targets,
    predict_e2e,
)
from .workload import WorkloadSource, WorkloadSpec, build_workload

log = logging.getLogger("kvrot")


def default_document() -> dict[str, Any]:
    """The desk-scale contended scenario, in the config-file schema."""
    return {
        "base": scenarios.base_config(vlt=scenarios.vlt()).to_dict(),
        "workload": WorkloadSpec(
            rps=scenarios.CONTENDED_RPS,
            n_requests=scenarios.N_REQUESTS,
            prompt_len_dist=scenarios.PROMPT_DIST,
            output_len_dist=scenarios.OUTPUT_DIST,
            seed=scenarios.SEED,
        ).to_dict(),
    }


def load_document(path: str | None) -> dict[str, Any]:
    """Config files hold ``base`` (SimConfig) and ``workload`` (WorkloadSpec);
    sweep files add ``sweeps`` and ``repetitions``. Missing sections fall back
    to the desk scenario."""
    doc = default_document()
    if path:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a JSON object")
        doc.update(data)
    return doc


def _apply_overrides(cfg: SimConfig, spec: WorkloadSpec, args) -> tuple[SimConfig, WorkloadSpec]:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
        spec = replace(spec, seed=args.seed)
    if args.trace:
        spec = replace(spec, source=WorkloadSource.TRACE, trace_path=args.trace)
    return cfg, spec


def cmd_run(args) -> int:
    doc = load_document(args.config)
    cfg = SimConfig.from_dict(doc["base"])
    spec = WorkloadSpec.from_dict(doc["workload"])
    cfg, spec = _apply_overrides(cfg, spec, args)
    requests = build_workload(spec)
    res = run(cfg, requests, snapshot_block_table=args.dump_block_table)
    metrics = summarize(res.requests, cfg.slos)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(metrics_json(metrics), encoding="utf-8")
    write_request_csv(res.requests, out / "requests.csv")
    if args.iteration_trace:
        write_iteration_trace(res, out / "iterations.csv")
    if args.dump_block_table:
        table = res.block_table or {}
        (out / "block_table.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    sys.stdout.write(metrics_json(metrics))
    if len(res.requests) != len(requests):
        log.error("%d requests did not finish", len(requests) - len(res.requests))
        return 1
    return 0


def cmd_sweep(args) -> int:
    doc = load_document(args.config)
    doc["output_dir"] = args.out or doc.get("output_dir", "results")
    matrix = ExperimentMatrix.from_dict(doc)
    if args.seed is not None:
        matrix.base = replace(matrix.base, seed=args.seed)
        matrix.workload = replace(matrix.workload, seed=args.seed)
    if args.trace:
        matrix.workload = replace(matrix.workload, source=WorkloadSource.TRACE, trace_path=args.trace)
    rows = run_matrix(matrix, workers=args.workers)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        log.error("cell %s rep %s failed: %s", r["cell"], r["rep"], r["error"])
    print(f"{len(rows) - len(failed)}/{len(rows)} cells ok; index at {Path(matrix.output_dir) / 'index.csv'}")
    return 1 if failed else 0


def cmd_calibrate(args) -> int:
    link = LinkProfile.from_json(args.config) if args.config else gh200_calibrated()
    targets = load_targets(args.targets)
    try:
        fitted = calibrate(link, targets)
    except CalibrationFailed as e:
        log.error("%s", e)
        return 1
    pred = predict_e2e(fitted, targets)
    errors = calibration_errors(fitted, targets)
    for row in targets.rows:
        print(f"{row.method:10s} measured {row.e2e_ms:9.2f} ms  predicted {pred[row.method]:9.2f} ms  error {errors[row.method]:+.1%}")
    print(f"ordering {'holds' if e2e_ordering_holds(pred) else 'VIOLATED'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        fitted.to_json(out / "link.json")
    return 0


def cmd_plot_data(args) -> int:
    try:
        text = emit_plot_data(args.index, args.x, args.y)
    except ValueError as e:
        log.error("%s", e)
        return 2
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvrot", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", metavar="PATH", help="JSON config file")
        sp.add_argument("--trace", metavar="PATH", help="JSONL request trace; replaces the synthetic workload")
        sp.add_argument("--out", metavar="DIR", default=out_default, help="output directory")
        sp.add_argument("--seed", metavar="N", type=int, help="override simulation and workload seeds")

    sp = sub.add_parser("run", help="run a single configuration")
    common(sp, "out")
    sp.add_argument("--dump-block-table", action="store_true", help="write block_table.json at peak HBM occupancy")
    sp.add_argument("--iteration-trace", action="store_true", help="write iterations.csv")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run an experiment matrix")
    common(sp, None)
    sp.add_argument("--workers", type=int, default=1, help="parallel processes")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("calibrate", help="fit the transfer model to the measured E2E table")
    sp.add_argument("--config", metavar="PATH", help="starting LinkProfile JSON")
    sp.add_argument("--targets", metavar="PATH", help="measured E2E table JSON (default: packaged table)")
    sp.add_argument("--out", metavar="DIR", help="write the fitted link.json here")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("plot-data", help="reshape a sweep index into tidy plot CSV")
    sp.add_argument("--index", metavar="PATH", required=True)
    sp.add_argument("--x", required=True, help="swept parameter for the x axis")
    sp.add_argument("--y", required=True, help="metric for the y axis")
    sp.add_argument("--out", metavar="PATH", help="output CSV; stdout if omitted")
    sp.set_defaults(func=cmd_plot_data)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
