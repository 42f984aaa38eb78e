"""Acceptance criteria 1-14. Each test prints and records one pass/fail line."""

from __future__ import annotations

import functools
import json
import random
import time
from dataclasses import dataclass

import pytest

from conftest import record
from kvrot import scenarios as S
from kvrot.core import MB, Request, RequestState, SLOSpec, VLTParams
from kvrot.engine import EngineMode, SimConfig, run
from kvrot.kvcache import Direction, TransferMode, TransferPlan
from kvrot.metrics import metrics_json, summarize
from kvrot.scheduler import PolicyKind, Queues, compute_vlt, lvf_schedule, schedule
from kvrot.transfer import (
    MEASURED_E2E,
    LinkProfile,
    calibrate,
    calibration_errors,
    duplex_transfer_time,
    e2e_ordering_holds,
    gh200_calibrated,
    predict_e2e,
    uni_transfer_time,
)


# -- shared simulation runs ---------------------------------------------------


@dataclass(frozen=True)
class Outcome:
    metrics: dict
    json: str
    duplex: bool
    race_violations: int
    timelines: tuple
    n_preemptions: int
    mean_transferred: float
    mean_held: float
    all_full_copies: bool
    seconds: float


def _simulate(rps: float, config_json: str) -> Outcome:
    cfg = SimConfig.from_dict(json.loads(config_json))
    t0 = time.perf_counter()
    res = run(cfg, S.workload(rps))
    elapsed = time.perf_counter() - t0
    metrics = summarize(res.requests, cfg.slos)
    pre = res.preemptions
    n = len(pre)
    return Outcome(
        metrics=metrics,
        json=metrics_json(metrics),
        duplex=cfg.engine_mode is EngineMode.DUPLEX,
        race_violations=res.race_violations,
        timelines=tuple((r.id, tuple(r.token_times)) for r in res.requests),
        n_preemptions=n,
        mean_transferred=sum(p.transferred_blocks for p in pre) / n if n else 0.0,
        mean_held=sum(p.held_blocks for p in pre) / n if n else 0.0,
        all_full_copies=all(p.transferred_blocks == p.held_blocks for p in pre),
        seconds=elapsed,
    )


@functools.lru_cache(maxsize=None)
def _cached(rps: float, config_json: str) -> Outcome:
    return _simulate(rps, config_json)


def config_key(**overrides) -> str:
    # Keyed on the resolved config so equivalent override sets share a run.
    return json.dumps(S.base_config(**overrides).to_dict(), sort_keys=True)


def sim(rps: float = S.CONTENDED_RPS, **overrides) -> Outcome:
    return _cached(rps, config_key(**overrides))


def lvf(**overrides) -> Outcome:
    overrides.setdefault("policy", "lvf")
    overrides.setdefault("vlt", S.vlt())
    return sim(**overrides)


def non_increasing(xs):
    return all(b <= a for a, b in zip(xs, xs[1:]))


def non_decreasing(xs):
    return all(b >= a for a, b in zip(xs, xs[1:]))


def fmt(xs):
    return "[" + ", ".join(f"{x:.3f}" for x in xs) + "]"


# -- 1. VLT unit suite --------------------------------------------------------


def _req(state, t_arr=0.0, t_run=None, t_last=None):
    r = Request(id=0, t_arr=t_arr, prompt_tokens=1, output_tokens=1)
    r.state, r.t_run, r.t_last = state, t_run, t_last
    return r


def test_c01_vlt_unit_suite():
    tol = 1e-9
    d = VLTParams()
    slos = SLOSpec(ttft_slo=5.0, tbt_slo=0.1)
    W, R, S_ = RequestState.WAITING, RequestState.RUNNING, RequestState.ROTARY
    cases = [
        # defaults
        (d.alpha, 3.0),
        (d.beta_b, 0.0),
        (d.beta_f, 0.5),
        # rotary: alpha * relu(now - t_last - beta_b * tbt_slo)
        (compute_vlt(_req(S_, t_last=1.0), 1.2, d, slos), 0.6),
        (compute_vlt(_req(S_, t_last=1.0), 1.0, d, slos), 0.0),
        (compute_vlt(_req(S_, t_last=1.0), 1.15, VLTParams(beta_b=2.0), slos), 0.0),
        (compute_vlt(_req(S_, t_last=1.0), 1.2, VLTParams(beta_b=2.0), slos), 0.0),
        (compute_vlt(_req(S_, t_last=1.0), 1.5, VLTParams(beta_b=2.0), slos), 3 * 0.3),
        (compute_vlt(_req(S_, t_last=1.0), 1.0, VLTParams(beta_b=-1.0), slos), 3 * 0.1),
        (compute_vlt(_req(S_, t_last=1.0), 2.0, VLTParams(alpha=0.0), slos), 0.0),
        (compute_vlt(_req(S_, t_arr=0.5), 1.0, d, slos), 1.5),
        # waiting: relu(now - t_arr - beta_f * ttft_slo)
        (compute_vlt(_req(W, t_arr=1.0), 3.5, d, slos), 0.0),
        (compute_vlt(_req(W, t_arr=1.0), 3.4, d, slos), 0.0),
        (compute_vlt(_req(W, t_arr=1.0), 4.0, d, slos), 0.5),
        (compute_vlt(_req(W, t_arr=1.0), 4.0, VLTParams(beta_f=0.0), slos), 3.0),
        # alpha does not scale waiting requests
        (compute_vlt(_req(W, t_arr=1.0), 4.0, VLTParams(alpha=5.0), slos), 0.5),
        # running: -(now - t_run), never positive
        (compute_vlt(_req(R, t_run=6.0), 10.0, d, slos), -4.0),
        (compute_vlt(_req(R, t_run=10.0), 10.0, d, slos), 0.0),
        (compute_vlt(_req(R, t_run=6.0), 10.0, VLTParams(alpha=5, beta_b=4, beta_f=4), slos), -4.0),
    ]
    bad = [(i, got, want) for i, (got, want) in enumerate(cases) if abs(got - want) > tol]
    with pytest.raises(ValueError):
        compute_vlt(_req(RequestState.FINISHED), 1.0, d, slos)
    record(1, not bad, f"{len(cases) - len(bad)}/{len(cases)} exact VLT checks (tol 1e-9)")
    assert not bad, bad


# -- 2. LVF oracle equivalence ------------------------------------------------


def brute_force_lvf(running, waiting, rotary, blk, b_xfer, b_hbm, now, params, slos):
    """Literal transcription of the four-step LVF listing."""

    def vlt(r):
        if r.state is RequestState.ROTARY:
            last = r.t_last if r.t_last is not None else r.t_arr
            return params.alpha * max(0.0, now - last - params.beta_b * slos.tbt_slo)
        if r.state is RequestState.WAITING:
            return max(0.0, now - r.t_arr - params.beta_f * slos.ttft_slo)
        return -(now - r.t_run)

    P, R = [], []
    B_left = b_hbm + b_xfer
    L = list(running) + list(waiting) + list(rotary)
    # Step 1
    if b_hbm >= sum(blk[r.id] for r in list(waiting) + list(rotary)):
        fcfs = sorted(list(waiting) + list(rotary), key=lambda r: (r.t_arr, r.id))
        return [], [r.id for r in fcfs]
    # Step 2: descending VLT; equal VLTs by earlier arrival.
    L.sort(key=lambda r: (r.t_arr, r.id))
    L.sort(key=vlt, reverse=True)
    # Step 3
    for r in L:
        if vlt(r) >= 0 and blk[r.id] <= B_left:
            R.append(r.id)
            B_left -= blk[r.id]
    # Step 4
    B_swap = b_xfer - B_left
    for r in reversed(L):
        if vlt(r) < 0 and B_swap > 0:
            P.append(r.id)
            B_swap -= blk[r.id]
    return P, R


def random_instance(rng: random.Random):
    now = 10.0
    n = rng.randint(0, 8)
    running, waiting, rotary = [], [], []
    for i in range(n):
        kind = rng.choice("RWS")
        # Coarse time grid so VLT ties and ReLU plateaus are common.
        t_arr = rng.randint(0, 90) / 10
        r = Request(id=i, t_arr=t_arr, prompt_tokens=1, output_tokens=1)
        if kind == "R":
            r.state = RequestState.RUNNING
            r.t_run = rng.randint(int(t_arr * 10), 99) / 10  # strictly before now
            running.append(r)
        elif kind == "W":
            r.state = RequestState.WAITING
            waiting.append(r)
        else:
            r.state = RequestState.ROTARY
            r.t_last = rng.randint(int(t_arr * 10), 100) / 10
            rotary.append(r)
    blk = {i: rng.randint(0, 12) for i in range(n)}
    params = VLTParams(
        alpha=rng.choice([0.0, 1.0, 3.0, 5.0]),
        beta_b=rng.choice([-1.0, 0.0, 2.0, 4.0]),
        beta_f=rng.choice([0.0, 0.5, 1.0, 2.0]),
    )
    slos = SLOSpec(ttft_slo=rng.choice([1.0, 5.0]), tbt_slo=rng.choice([0.1, 1.0]))
    return running, waiting, rotary, blk, rng.randint(0, 12), rng.randint(0, 12), now, params, slos


def test_c02_lvf_matches_brute_force_oracle():
    rng = random.Random(20240601)
    n_instances, mismatches, non_fallback = 5000, [], 0
    for k in range(n_instances):
        inst = random_instance(rng)
        running, waiting, rotary, blk, b_xfer, b_hbm, now, params, slos = inst
        d = lvf_schedule(*inst)
        P, R = brute_force_lvf(*inst)
        if b_hbm < sum(blk[r.id] for r in waiting + rotary):
            non_fallback += 1
        if list(d.preempted) != P or list(d.prioritized) != R:
            mismatches.append((k, d, P, R))
    ok = not mismatches and n_instances >= 1000
    record(2, ok, f"{n_instances} instances ({non_fallback} past the fallback), {len(mismatches)} mismatches")
    assert ok, mismatches[:3]


# -- 3. FCFS fallback invariant -----------------------------------------------


def test_c03_fallback_equals_fcfs():
    rng = random.Random(7)
    n_states, violations = 10_000, 0
    for _ in range(n_states):
        running, waiting, rotary, blk, b_xfer, _, now, params, slos = random_instance(rng)
        demand = sum(blk[r.id] for r in waiting + rotary)
        b_hbm = demand + rng.randint(0, 12)  # step 1 always triggers
        q = Queues(running=list(running), waiting=list(waiting), rotary=list(rotary))
        a = schedule(PolicyKind.LVF, q, blk, b_xfer, b_hbm, now, params, slos)
        f = schedule(PolicyKind.FCFS, q, blk, b_xfer, b_hbm, now, params, slos)
        if set(a.prioritized) != set(f.prioritized) or a.preempted or f.preempted:
            violations += 1
    record(3, violations == 0, f"{n_states} fallback states, {violations} violations")
    assert violations == 0


# -- 4. transfer-model calibration --------------------------------------------


def test_c04_calibration_matches_table():
    fitted = calibrate(LinkProfile(), MEASURED_E2E)
    errors = calibration_errors(fitted, MEASURED_E2E)
    pred = predict_e2e(fitted, MEASURED_E2E)
    within = all(abs(e) <= 0.15 for e in errors.values())
    ordered = e2e_ordering_holds(pred)
    # The packaged profile is the output of this same fit.
    packaged = calibration_errors(gh200_calibrated(), MEASURED_E2E)
    same = all(abs(packaged[m] - errors[m]) < 1e-6 for m in errors)
    ok = within and ordered and same
    detail = " ".join(f"{m}={pred[m]:.2f}ms({errors[m]:+.1%})" for m in pred) + f"; ordering {'ok' if ordered else 'broken'}"
    record(4, ok, detail)
    assert ok


# -- 5. duplex gain -----------------------------------------------------------


def test_c05_duplex_gain():
    link = gh200_calibrated()
    seg = 4 * MB
    ratios = []
    for n in [1, 2, 8, 32, 128, 512, 2048]:
        d = TransferPlan(Direction.D2H, n, seg, n * seg, TransferMode.BATCHED)
        h = TransferPlan(Direction.H2D, n, seg, n * seg, TransferMode.BATCHED)
        serial = uni_transfer_time(d, link) + uni_transfer_time(h, link)
        ratios.append(duplex_transfer_time(d, h, link) / serial)
    ok = max(ratios) <= 0.8
    record(5, ok, f"duplex/serial over 4MB..8GB per direction: max {max(ratios):.3f}, at 8GB {ratios[-1]:.3f}")
    assert ok


# -- 7. static-policy pathology -----------------------------------------------


def test_c07_static_policy_pathology():
    fcfs = sim(S.OVERLOAD_RPS, policy="fcfs").metrics
    wf = sim(S.OVERLOAD_RPS, policy="wf").metrics
    sf = sim(S.OVERLOAD_RPS, policy="sf").metrics
    demand = S.demand_ratio(S.base_config(policy="fcfs"), S.workload(S.OVERLOAD_RPS))
    wf_ttft = wf["p99_ttft_s"] < fcfs["p99_ttft_s"]
    wf_tbt = wf["p99_tbt_s"] > fcfs["p99_tbt_s"]
    sf_close = abs(sf["p99_ttft_s"] - fcfs["p99_ttft_s"]) <= 0.10 * fcfs["p99_ttft_s"]
    overloaded = 1.6 <= demand <= 2.4
    ok = wf_ttft and wf_tbt and sf_close and overloaded
    record(
        7,
        ok,
        f"demand {demand:.2f}x HBM; P99 TTFT fcfs {fcfs['p99_ttft_s']:.2f} wf {wf['p99_ttft_s']:.2f} "
        f"sf {sf['p99_ttft_s']:.2f}; P99 TBT fcfs {fcfs['p99_tbt_s']:.3f} wf {wf['p99_tbt_s']:.3f}",
    )
    assert ok


# -- 8. alpha sweep -----------------------------------------------------------


def test_c08_alpha_sweep():
    runs = [lvf(vlt=S.vlt(alpha=a, beta_b=0.0, beta_f=0.0)).metrics for a in (1.0, 3.0, 5.0)]
    tbt = [m["tbt_attainment"] for m in runs]
    ttft = [m["ttft_attainment"] for m in runs]
    ok = non_decreasing(tbt) and non_increasing(ttft)
    record(8, ok, f"alpha 1/3/5: TBT attainment {fmt(tbt)}, TTFT attainment {fmt(ttft)}")
    assert ok


# -- 9. beta sweeps -----------------------------------------------------------


def test_c09_beta_f_sweep():
    p99 = [lvf(vlt=S.vlt(alpha=1.0, beta_b=0.0, beta_f=b)).metrics["p99_ttft_s"] for b in (0.0, 1.0, 2.0, 4.0)]
    ok = non_decreasing(p99)
    record(9, ok, f"beta_f 0/1/2/4 -> P99 TTFT {fmt(p99)}", part="a")
    assert ok


def test_c09_beta_b_sweep():
    p99 = [lvf(vlt=S.vlt(alpha=1.0, beta_b=b, beta_f=0.0)).metrics["p99_tbt_s"] for b in (-1.0, 0.0, 2.0, 4.0)]
    ok = non_decreasing(p99)
    record(9, ok, f"beta_b -1/0/2/4 -> P99 TBT {fmt(p99)}", part="b")
    assert ok


# -- 10. transfer-budget sweep ------------------------------------------------


def test_c10_b_xfer_sweep():
    budgets = [S.B_XFER_SWEEP_BASE * k // 2 for k in (1, 2, 4, 8)]
    runs = [lvf(b_xfer=b).metrics for b in budgets]
    ttft = [m["p99_ttft_s"] for m in runs]
    tbt = [m["p99_tbt_s"] for m in runs]
    ok = non_increasing(ttft) and non_increasing(tbt)
    record(10, ok, f"b_xfer {budgets}: P99 TTFT {fmt(ttft)}, P99 TBT {fmt(tbt)}")
    assert ok


# -- 11. end-to-end headline trend --------------------------------------------


def test_c11_headline_trend():
    f = sim(policy="fcfs").metrics
    l = lvf().metrics
    ttft_gain = l["ttft_attainment"] - f["ttft_attainment"]
    tbt_delta = l["tbt_attainment"] - f["tbt_attainment"]
    contended = ttft_gain >= 0.15 and tbt_delta >= -0.05
    fu = sim(S.UNDERLOAD_RPS, policy="fcfs")
    lu = lvf(rps=S.UNDERLOAD_RPS)
    identical = fu.timelines == lu.timelines and lu.n_preemptions == 0
    ok = contended and identical
    record(
        11,
        ok,
        f"rps {S.CONTENDED_RPS}: TTFT attainment fcfs {f['ttft_attainment']:.3f} lvf {l['ttft_attainment']:.3f} "
        f"({ttft_gain * 100:+.1f} pts), TBT attainment fcfs {f['tbt_attainment']:.3f} lvf {l['tbt_attainment']:.3f} "
        f"({tbt_delta * 100:+.1f} pts); rps {S.UNDERLOAD_RPS}: timelines {'identical' if identical else 'differ'}",
    )
    assert ok


# -- 12. duplex ablation ------------------------------------------------------


def test_c12_naive_engine_degrades_tbt():
    naive = lvf(engine_mode="naive").metrics
    duplex = lvf().metrics
    ok = naive["tbt_attainment"] < duplex["tbt_attainment"]
    record(
        12,
        ok,
        f"b_xfer {S.BASE_B_XFER}: TBT attainment naive {naive['tbt_attainment']:.3f} vs duplex {duplex['tbt_attainment']:.3f}",
    )
    assert ok


# -- 13. eager rotation -------------------------------------------------------


def test_c13_eager_rotation_effectiveness():
    on = lvf()
    off = lvf(eager_rotation=False)
    ok = on.n_preemptions > 0 and on.mean_transferred <= 2.0 and off.n_preemptions > 0 and off.all_full_copies
    record(
        13,
        ok,
        f"eager on: {on.mean_transferred:.2f} blocks moved per preemption (held {on.mean_held:.1f}, n={on.n_preemptions}); "
        f"eager off: {off.mean_transferred:.2f} moved of {off.mean_held:.2f} held, full copies {off.all_full_copies}",
    )
    assert ok


# -- 14. determinism ----------------------------------------------------------


def test_c14_determinism():
    cases = [(S.CONTENDED_RPS, config_key(policy="lvf", vlt=S.vlt())), (S.OVERLOAD_RPS, config_key(policy="wf"))]
    same = []
    for rps, key in cases:
        cached = _cached(rps, key)
        fresh = _simulate(rps, key)
        same.append(cached.json.encode() == fresh.json.encode())
    ok = all(same)
    record(14, ok, f"{sum(same)}/{len(same)} reruns byte-identical metrics JSON")
    assert ok


# -- 6. race freedom (aggregates every DUPLEX run of the suite) ---------------


def _suite_runs():
    # Every simulation the criteria above use; cached, so this is free after them.
    yield sim(S.OVERLOAD_RPS, policy="fcfs")
    yield sim(S.OVERLOAD_RPS, policy="wf")
    yield sim(S.OVERLOAD_RPS, policy="sf")
    for a in (1.0, 3.0, 5.0):
        yield lvf(vlt=S.vlt(alpha=a, beta_b=0.0, beta_f=0.0))
    for b in (0.0, 1.0, 2.0, 4.0):
        yield lvf(vlt=S.vlt(alpha=1.0, beta_b=0.0, beta_f=b))
    for b in (-1.0, 0.0, 2.0, 4.0):
        yield lvf(vlt=S.vlt(alpha=1.0, beta_b=b, beta_f=0.0))
    for k in (1, 2, 4, 8):
        yield lvf(b_xfer=S.B_XFER_SWEEP_BASE * k // 2)
    yield sim(policy="fcfs")
    yield lvf()
    yield sim(S.UNDERLOAD_RPS, policy="fcfs")
    yield lvf(rps=S.UNDERLOAD_RPS)
    yield lvf(engine_mode="naive")
    yield lvf(eager_rotation=False)


def test_c06_race_freedom():
    duplex = [o for o in _suite_runs() if o.duplex]
    violations = sum(o.race_violations for o in duplex)
    preemptions = sum(o.n_preemptions for o in duplex)
    ok = violations == 0 and preemptions > 0
    record(6, ok, f"{len(duplex)} DUPLEX runs, {preemptions} preemptions, {violations} slot conflicts")
    assert ok
