"""SLO-aware rotary scheduling: virtual lag time, Largest-VLT-First and baselines.

Every policy maps a snapshot of the three request queues plus block budgets
to a :class:`SchedulingDecision`. Policies are pure; :func:`apply_decision`
performs the state transitions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .core import Request, RequestState, SLOSpec, VLTParams


class PolicyKind(enum.Enum):
    FCFS = "fcfs"
    WAITING_FIRST = "wf"
    SWAPPED_FIRST = "sf"
    SJF_ORACLE = "sjf-oracle"
    LVF = "lvf"

    @classmethod
    def parse(cls, name: "str | PolicyKind") -> "PolicyKind":
        if isinstance(name, PolicyKind):
            return name
        for kind in cls:
            if kind.value == name:
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown policy {name!r}; expected one of: {valid}")


@dataclass(frozen=True)
class SchedulingDecision:
    preempted: tuple[int, ...] = ()
    prioritized: tuple[int, ...] = ()
    admitted_waiting: tuple[int, ...] = ()
    resumed_rotary: tuple[int, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.preempted and not self.prioritized


@dataclass
class Queues:
    running: list[Request] = field(default_factory=list)
    waiting: list[Request] = field(default_factory=list)
    rotary: list[Request] = field(default_factory=list)

    def all(self) -> list[Request]:
        return self.running + self.waiting + self.rotary

    def by_id(self) -> dict[int, Request]:
        return {r.id: r for r in self.all()}

    def sort(self) -> None:
        for q in (self.running, self.waiting, self.rotary):
            q.sort(key=arrival_key)


def arrival_key(r: Request) -> tuple[float, int]:
    return (r.t_arr, r.id)


def compute_vlt(request: Request, now: float, params: VLTParams, slos: SLOSpec) -> float:
    """Signed lag of a request against its SLO progress.

    Positive values mean the request lags and should run; a running
    request's value grows more negative the longer it holds the GPU.
    """
    state = request.state
    if state is RequestState.ROTARY:
        t_last = request.t_last if request.t_last is not None else request.t_arr
        return params.alpha * max(0.0, now - t_last - params.beta_b * slos.tbt_slo)
    if state is RequestState.WAITING:
        return max(0.0, now - request.t_arr - params.beta_f * slos.ttft_slo)
    if state is RequestState.RUNNING:
        t_run = request.t_run if request.t_run is not None else now
        return -(now - t_run)
    raise ValueError(f"request {request.id} is {state.value}; VLT is undefined")


def _lvf_order(requests: Sequence[Request], vlt: Mapping[int, float]) -> list[Request]:
    # Ties (common at the ReLU plateau) fall back to arrival order.
    return sorted(requests, key=lambda r: (-vlt[r.id], r.t_arr, r.id))


def _split(prioritized: Sequence[Request]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    admitted = tuple(r.id for r in prioritized if r.state is RequestState.WAITING)
    resumed = tuple(r.id for r in prioritized if r.state is RequestState.ROTARY)
    return admitted, resumed


def _decision(preempted: Sequence[Request], prioritized: Sequence[Request]) -> SchedulingDecision:
    admitted, resumed = _split(prioritized)
    return SchedulingDecision(
        preempted=tuple(r.id for r in preempted),
        prioritized=tuple(r.id for r in prioritized),
        admitted_waiting=admitted,
        resumed_rotary=resumed,
    )


def lvf_schedule(
    running: Sequence[Request],
    waiting: Sequence[Request],
    rotary: Sequence[Request],
    blk: Mapping[int, int],
    b_xfer: int,
    b_hbm: int,
    now: float,
    params: VLTParams,
    slos: SLOSpec,
) -> SchedulingDecision:
    """Largest-VLT-First: prioritize lagging requests, preempt the most advanced."""
    if b_xfer < 0 or b_hbm < 0:
        raise ValueError("budgets must be >= 0")
    inactive = list(waiting) + list(rotary)
    # Contention check: everything fits, behave like FCFS.
    if b_hbm >= sum(blk[r.id] for r in inactive):
        return _decision((), sorted(inactive, key=arrival_key))

    everyone = list(running) + inactive
    vlt = {r.id: compute_vlt(r, now, params, slos) for r in everyone}
    order = _lvf_order(everyone, vlt)

    budget_left = b_hbm + b_xfer
    prioritized = []
    for r in order:
        if r.state is RequestState.RUNNING:
            continue
        if vlt[r.id] >= 0 and blk[r.id] <= budget_left:
            prioritized.append(r)
            budget_left -= blk[r.id]

    b_swap = b_xfer - budget_left
    preempted = []
    for r in reversed(order):
        if b_swap <= 0:
            break
        if vlt[r.id] < 0 and r.state is RequestState.RUNNING:
            preempted.append(r)
            b_swap -= blk[r.id]
    return _decision(preempted, prioritized)


def _admit_in_order(candidates: Sequence[Request], blk: Mapping[int, int], left: int):
    """Head-of-line admission: stop at the first request that does not fit."""
    chosen = []
    for r in candidates:
        if blk[r.id] > left:
            break
        chosen.append(r)
        left -= blk[r.id]
    return chosen, left


def _fcfs(queues: Queues, blk, b_hbm) -> SchedulingDecision:
    # Rotary requests only exist after OOM preemption and are older than any
    # queued arrival they compete with, so plain arrival order resumes them first.
    candidates = sorted(queues.waiting + queues.rotary, key=arrival_key)
    chosen, _ = _admit_in_order(candidates, blk, b_hbm)
    return _decision((), chosen)


def _sjf_oracle(queues: Queues, blk, b_hbm) -> SchedulingDecision:
    resumed, left = _admit_in_order(sorted(queues.rotary, key=arrival_key), blk, b_hbm)
    if len(resumed) < len(queues.rotary):
        return _decision((), resumed)
    shortest = sorted(queues.waiting, key=lambda r: (r.output_tokens, r.t_arr, r.id))
    admitted, _ = _admit_in_order(shortest, blk, left)
    return _decision((), resumed + admitted)


def _swapped_first(queues: Queues, blk, b_hbm) -> SchedulingDecision:
    resumed, left = _admit_in_order(sorted(queues.rotary, key=arrival_key), blk, b_hbm)
    if len(resumed) < len(queues.rotary):
        return _decision((), resumed)
    admitted, _ = _admit_in_order(sorted(queues.waiting, key=arrival_key), blk, left)
    return _decision((), resumed + admitted)


def _waiting_first(queues: Queues, blk, b_hbm) -> SchedulingDecision:
    victims = sorted(queues.running, key=arrival_key, reverse=True)
    reclaimable = sum(blk[v.id] for v in victims)
    left = b_hbm
    preempted, admitted = [], []
    for w in sorted(queues.waiting, key=arrival_key):
        need = blk[w.id]
        if need > left + reclaimable:
            break
        while need > left:
            v = victims.pop(0)
            preempted.append(v)
            left += blk[v.id]
            reclaimable -= blk[v.id]
        admitted.append(w)
        left -= need
    resumed = []
    if len(admitted) == len(queues.waiting):
        resumed, _ = _admit_in_order(sorted(queues.rotary, key=arrival_key), blk, left)
    return _decision(preempted, admitted + resumed)


def schedule(
    policy: PolicyKind,
    queues: Queues,
    blk: Mapping[int, int],
    b_xfer: int,
    b_hbm: int,
    now: float,
    params: VLTParams,
    slos: SLOSpec,
) -> SchedulingDecision:
    """Dispatch one scheduling round to ``policy``.

    ``blk`` gives each waiting/rotary request's HBM demand for the coming
    iteration and each running request's currently held HBM blocks. Only
    LVF consumes ``b_xfer``; the static baselines are bandwidth-oblivious.
    """
    b_hbm = max(0, b_hbm)
    if policy is PolicyKind.LVF:
        return lvf_schedule(
            queues.running, queues.waiting, queues.rotary, blk, b_xfer, b_hbm, now, params, slos
        )
    if policy is PolicyKind.FCFS:
        return _fcfs(queues, blk, b_hbm)
    if policy is PolicyKind.SJF_ORACLE:
        return _sjf_oracle(queues, blk, b_hbm)
    if policy is PolicyKind.SWAPPED_FIRST:
        return _swapped_first(queues, blk, b_hbm)
    if policy is PolicyKind.WAITING_FIRST:
        return _waiting_first(queues, blk, b_hbm)
    raise ValueError(f"unsupported policy {policy!r}")


def apply_decision(decision: SchedulingDecision, queues: Queues, now: float) -> Queues:
    """Move requests between queues according to ``decision``.

    Preempted requests go RUNNING -> ROTARY; prioritized ones go to RUNNING
    with ``t_run`` reset to ``now``. Completion is handled by the engine.
    """
    if decision.empty:
        return queues
    index = queues.by_id()
    overlap = set(decision.preempted) & set(decision.prioritized)
    if overlap:
        raise ValueError(f"requests both preempted and prioritized: {sorted(overlap)}")
    for rid in decision.preempted:
        r = index.get(rid)
        if r is None:
            raise KeyError(f"unknown request {rid}")
        if r.state is not RequestState.RUNNING:
            raise ValueError(f"cannot preempt request {rid} in state {r.state.value}")
    for rid in decision.prioritized:
        r = index.get(rid)
        if r is None:
            raise KeyError(f"unknown request {rid}")
        if r.state not in (RequestState.WAITING, RequestState.ROTARY):
            raise ValueError(f"cannot prioritize request {rid} in state {r.state.value}")

    for rid in decision.preempted:
        r = index[rid]
        r.state = RequestState.ROTARY
        r.n_preemptions += 1
    for rid in decision.prioritized:
        r = index[rid]
        r.state = RequestState.RUNNING
        r.t_run = now

    everyone = queues.all()
    queues.running = [r for r in everyone if r.state is RequestState.RUNNING]
    queues.waiting = [r for r in everyone if r.state is RequestState.WAITING]
    queues.rotary = [r for r in everyone if r.state is RequestState.ROTARY]
    queues.sort()
    return queues
