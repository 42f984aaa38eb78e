"""Deterministic iteration-level simulator of a continuous-batching server.

Each engine iteration schedules, reconciles the decision with physical
block availability, issues KV transfers, runs one compute batch and emits
tokens at the iteration boundary. With ``pipeline_overlap`` the transfers
of an iteration hide behind its compute and the wall time is the larger of
the two.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .core import (
    QWEN25_32B,
    ModelProfile,
    Request,
    RequestState,
    SimClock,
    SLOSpec,
    VLTParams,
    blocks_needed,
)
from .kvcache import (
    Direction,
    KVManager,
    LayoutKind,
    TransferMode,
    TransferPlan,
    race_conflicts,
)
from .scheduler import (
    PolicyKind,
    Queues,
    SchedulingDecision,
    apply_decision,
    arrival_key,
    compute_vlt,
    schedule,
)
from .transfer import LinkProfile, duplex_transfer_time, gh200_calibrated, uni_transfer_time

# Keeps token timestamps strictly increasing under an all-zero cost model.
MIN_ITERATION_TIME = 1e-6


class EngineMode(enum.Enum):
    NAIVE = "naive"
    MS = "ms"
    MS_MK = "ms_mk"
    DUPLEX = "duplex"

    @classmethod
    def parse(cls, name: "str | EngineMode") -> "EngineMode":
        if isinstance(name, EngineMode):
            return name
        for kind in cls:
            if kind.value == name.lower().replace("+", "_"):
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown engine mode {name!r}; expected one of: {valid}")


_MODE_LAYOUT = {
    EngineMode.NAIVE: (LayoutKind.LAYER_FIRST, TransferMode.PER_SEGMENT),
    EngineMode.MS: (LayoutKind.BLOCK_FIRST, TransferMode.PER_SEGMENT_MERGED),
    EngineMode.MS_MK: (LayoutKind.BLOCK_FIRST, TransferMode.BATCHED),
    EngineMode.DUPLEX: (LayoutKind.BLOCK_FIRST, TransferMode.BATCHED),
}


class SimulationFault(RuntimeError):
    pass


class DeadlockError(SimulationFault):
    def __init__(self, request_id: int | None, message: str):
        super().__init__(message)
        self.request_id = request_id


@dataclass
class SimConfig:
    profile: ModelProfile = QWEN25_32B
    link: LinkProfile = field(default_factory=gh200_calibrated)
    hbm_capacity_blocks: int = 1024
    dram_capacity_blocks: int = 100_000
    policy: PolicyKind = PolicyKind.LVF
    vlt: VLTParams = field(default_factory=VLTParams)
    slos: SLOSpec = field(default_factory=SLOSpec)
    b_xfer: int = 128
    prefill_chunk_tokens: int = 2048
    max_batch_tokens: int = 8192
    engine_mode: EngineMode = EngineMode.DUPLEX
    pipeline_overlap: bool = True
    eager_rotation: bool = True
    seed: int = 0
    check_invariants: bool = False

    def __post_init__(self):
        self.policy = PolicyKind.parse(self.policy)
        self.engine_mode = EngineMode.parse(self.engine_mode)
        if self.hbm_capacity_blocks <= 0 or self.dram_capacity_blocks <= 0:
            raise ValueError("capacities must be > 0")
        if self.b_xfer < 0:
            raise ValueError("b_xfer must be >= 0")
        if self.prefill_chunk_tokens < 1:
            raise ValueError("prefill_chunk_tokens must be >= 1")
        if self.max_batch_tokens < 1:
            raise ValueError("max_batch_tokens must be >= 1")

    @property
    def eager_active(self) -> bool:
        return self.engine_mode is EngineMode.DUPLEX and self.eager_rotation

    def to_dict(self) -> dict[str, Any]:
        return {
            "profile": self.profile.to_dict(),
            "link": self.link.to_dict(),
            "hbm_capacity_blocks": self.hbm_capacity_blocks,
            "dram_capacity_blocks": self.dram_capacity_blocks,
            "policy": self.policy.value,
            "vlt": asdict(self.vlt),
            "slos": asdict(self.slos),
            "b_xfer": self.b_xfer,
            "prefill_chunk_tokens": self.prefill_chunk_tokens,
            "max_batch_tokens": self.max_batch_tokens,
            "engine_mode": self.engine_mode.value,
            "pipeline_overlap": self.pipeline_overlap,
            "eager_rotation": self.eager_rotation,
            "seed": self.seed,
            "check_invariants": self.check_invariants,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SimConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SimConfig fields: {sorted(unknown)}")
        if "profile" in data:
            data["profile"] = ModelProfile.from_dict(data["profile"])
        if "link" in data:
            link = data["link"]
            data["link"] = gh200_calibrated() if link == "gh200-calibrated" else LinkProfile.from_dict(link)
        if "vlt" in data:
            data["vlt"] = VLTParams(**data["vlt"])
        if "slos" in data:
            data["slos"] = SLOSpec(**data["slos"])
        return cls(**data)


@dataclass
class IterationRecord:
    index: int
    start: float
    compute_time: float
    transfer_time: float
    wall_time: float
    batch_prefill_tokens: int
    batch_decode_tokens: int
    preempted: int
    resumed: int
    admitted: int
    hbm_free_blocks: int
    forced_preemptions: int = 0
    d2h_blocks: int = 0
    h2d_blocks: int = 0
    eager_blocks: int = 0
    race_conflicts: int = 0


@dataclass(frozen=True)
class PreemptionEvent:
    time: float
    request_id: int
    held_blocks: int
    transferred_blocks: int
    forced: bool


@dataclass
class SimResult:
    requests: list[Request]
    iterations: list[IterationRecord]
    preemptions: list[PreemptionEvent]
    race_violations: int = 0
    block_table: dict | None = None

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)


def write_iteration_trace(result: SimResult, path: str | Path) -> None:
    names = [f.name for f in fields(IterationRecord)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for rec in result.iterations:
            w.writerow([getattr(rec, n) for n in names])


def reconcile(
    decision: SchedulingDecision,
    blk: Mapping[int, int],
    available: int,
    tokens: Mapping[int, int] | None = None,
    token_budget: int | None = None,
) -> SchedulingDecision:
    """Keep the longest prefix of ``decision.prioritized`` that fits in ``available``.

    ``available`` is the HBM block count once the preempted requests have
    released their blocks. With ``token_budget`` the prefix also stops once
    the iteration's batch has no token left for the next request; a prefill
    chunk may be cut short. Preemptions pass through unchanged.
    """
    kept = []
    left = available
    tok_left = token_budget
    for rid in decision.prioritized:
        if blk[rid] > left:
            break
        if tok_left is not None:
            if tok_left <= 0:
                break
            tok_left -= min(tok_left, tokens[rid])
        kept.append(rid)
        left -= blk[rid]
    if len(kept) == len(decision.prioritized):
        return decision
    keep = set(kept)
    return SchedulingDecision(
        preempted=decision.preempted,
        prioritized=tuple(kept),
        admitted_waiting=tuple(r for r in decision.admitted_waiting if r in keep),
        resumed_rotary=tuple(r for r in decision.resumed_rotary if r in keep),
    )


@dataclass
class _Work:
    request: Request
    prefill: int
    decode: int

    @property
    def kv_growth(self) -> int:
        return self.prefill + self.decode

    @property
    def tokens(self) -> int:
        """Batch tokens consumed; the first decode token rides on the final chunk."""
        return self.prefill if self.prefill else self.decode


def iteration_wall_time(compute_time: float, transfer_time: float, overlap: bool) -> float:
    """Transfers hide behind compute when pipelined and serialize otherwise."""
    return max(compute_time, transfer_time) if overlap else compute_time + transfer_time


def _batch_key(r: Request) -> tuple:
    return (r.in_prefill, r.t_arr, r.id)


class Simulator:
    def __init__(
        self,
        config: SimConfig,
        snapshot_block_table: bool = False,
        observer: Callable[["Simulator", IterationRecord], None] | None = None,
    ):
        self.config = config
        self.observer = observer
        self.snapshot_block_table = snapshot_block_table
        self._snapshot: dict | None = None
        self._snapshot_used = -1
        layout, mode = _MODE_LAYOUT[config.engine_mode]
        self.kv = KVManager(
            config.profile,
            config.hbm_capacity_blocks,
            config.dram_capacity_blocks,
            layout=layout,
            mode=mode,
            retain_replicas=config.eager_active,
            defer_dirty_free=config.engine_mode is EngineMode.DUPLEX,
        )
        self.clock = SimClock()
        self.queues = Queues()
        self.pending: list[Request] = []
        self.finished: list[Request] = []
        self.iterations: list[IterationRecord] = []
        self.preemptions: list[PreemptionEvent] = []
        self.race_violations = 0
        self._idle_iterations = 0

    # -- per-request accounting ------------------------------------------

    def _plan_work(self, r: Request, token_budget: int) -> _Work:
        if r.in_prefill:
            chunk = min(self.config.prefill_chunk_tokens, r.prompt_tokens - r.prefilled_tokens, token_budget)
            final = r.prefilled_tokens + chunk == r.prompt_tokens
            return _Work(r, chunk, 1 if final and chunk > 0 else 0)
        return _Work(r, 0, 1 if token_budget > 0 else 0)

    def _demand(self, r: Request) -> int:
        """HBM blocks ``r`` must hold to run the next iteration."""
        w = self._plan_work(r, self.config.max_batch_tokens)
        return max(1, blocks_needed(r.prefilled_tokens + r.generated_tokens, w.kv_growth, self.config.profile))

    def _growth(self, r: Request) -> int:
        w = self._plan_work(r, self.config.max_batch_tokens)
        need = blocks_needed(r.prefilled_tokens + r.generated_tokens, w.kv_growth, self.config.profile)
        return max(0, need - self.kv.n_blocks(r.id))

    # -- main loop ---------------------------------------------------------

    def run(self, requests: Sequence[Request]) -> SimResult:
        cap = self.config.hbm_capacity_blocks
        for r in requests:
            if r.output_tokens < 1:
                raise ValueError(f"request {r.id}: output_tokens must be >= 1")
            if blocks_needed(r.prompt_tokens, r.output_tokens, self.config.profile) > cap:
                raise DeadlockError(
                    r.id, f"request {r.id} needs more KV blocks than the {cap}-block HBM pool"
                )
        self.pending = sorted((r.clone() for r in requests), key=arrival_key)
        self.pending.reverse()
        while self.pending or self.queues.all():
            self.step()
        done = sorted(self.finished, key=lambda r: r.id)
        return SimResult(
            requests=done,
            iterations=self.iterations,
            preemptions=self.preemptions,
            race_violations=self.race_violations,
            block_table=self._snapshot,
        )

    def _admit_arrivals(self) -> None:
        now = self.clock.now
        while self.pending and self.pending[-1].t_arr <= now:
            r = self.pending.pop()
            r.state = RequestState.WAITING
            self.queues.waiting.append(r)
        self.queues.waiting.sort(key=arrival_key)

    def step(self) -> IterationRecord | None:
        cfg, kv = self.config, self.kv
        self._admit_arrivals()
        if not self.queues.all():
            self.clock.advance_to(self.pending[-1].t_arr)
            return None
        now = self.clock.now
        q = self.queues

        # (2) schedule
        blk = {r.id: kv.hbm_blocks(r.id) for r in q.running}
        for r in q.waiting + q.rotary:
            blk[r.id] = self._demand(r)
        reserve = sum(self._growth(r) for r in q.running)
        decision = schedule(
            cfg.policy, q, blk, cfg.b_xfer, kv.hbm_free - reserve, now, cfg.vlt, cfg.slos
        )

        # (3) reconcile with what can physically move this iteration
        preempt, dram_left = [], kv.dram_free
        for rid in decision.preempted:
            need = len(kv.needs_copy(rid))
            if need <= dram_left:
                preempt.append(rid)
                dram_left -= need
        continuing = [r for r in q.running if r.id not in set(preempt)]
        index_all = {r.id: r for r in q.waiting + q.rotary}
        available = (
            kv.hbm_free
            + sum(kv.freeable_now(rid) for rid in preempt)
            - sum(self._growth(r) for r in continuing)
        )
        decision = SchedulingDecision(
            preempted=tuple(preempt),
            prioritized=decision.prioritized,
            admitted_waiting=decision.admitted_waiting,
            resumed_rotary=decision.resumed_rotary,
        )
        tokens_left = cfg.max_batch_tokens
        for r in sorted(continuing, key=_batch_key):
            tokens_left -= self._plan_work(r, tokens_left).tokens
        work_tokens = {
            rid: self._plan_work(index_all[rid], cfg.max_batch_tokens).tokens
            for rid in decision.prioritized
        }
        decision = reconcile(decision, blk, available, work_tokens, tokens_left)
        resumed = list(decision.resumed_rotary)
        admitted = list(decision.admitted_waiting)
        apply_decision(decision, q, now)

        # (4) transfers: preemption swap-outs, growth, swap-ins
        d2h = TransferPlan(direction=Direction.D2H, mode=kv.mode)
        h2d = TransferPlan(direction=Direction.H2D, mode=kv.mode)
        index = {r.id: r for r in q.all()}
        for rid in preempt:
            d2h = d2h + self._swap_out(index[rid], forced=False)
        prioritized = set(decision.prioritized)
        forced = 0
        # Growth for continuing requests, oldest first. A request whose blocks
        # cannot be allocated is itself preempted (passive OOM preemption).
        for r in sorted((r for r in q.running if r.id not in prioritized), key=arrival_key):
            need = self._growth(r)
            if need == 0:
                continue
            if need > kv.hbm_free:
                if len(kv.needs_copy(r.id)) > kv.dram_free:
                    raise SimulationFault(f"request {r.id}: no HBM for growth and no DRAM to swap to")
                d2h = d2h + self._swap_out(r, forced=True)
                forced += 1
                continue
            kv.allocate_blocks(r.id, need)
        if forced:
            q.running = [r for r in q.running if r.state is RequestState.RUNNING]
            q.rotary = sorted(
                [r for r in index.values() if r.state is RequestState.ROTARY], key=arrival_key
            )
        for rid in decision.prioritized:
            r = index[rid]
            if rid in resumed:
                h2d = h2d + kv.plan_swapin(rid)
            need = self._growth(r)
            if need:
                kv.allocate_blocks(rid, need)

        eager = 0
        if cfg.eager_active:
            budget = max(0, cfg.b_xfer - len(d2h.blocks) - len(h2d.blocks))
            if budget:
                order = sorted(q.running, key=lambda r: (compute_vlt(r, now, cfg.vlt, cfg.slos), r.t_arr, r.id))
                plan = kv.plan_eager_rotation(budget, [r.id for r in order])
                eager = len(plan.blocks)
                d2h = d2h + plan

        conflicts = 0
        if cfg.engine_mode is EngineMode.DUPLEX:
            conflicts = len(race_conflicts(d2h, h2d))
            self.race_violations += conflicts
            transfer_time = duplex_transfer_time(d2h, h2d, cfg.link)
        else:
            transfer_time = uni_transfer_time(d2h, cfg.link) + uni_transfer_time(h2d, cfg.link)

        # (5) batch formation
        # Continuing requests first, then the newly prioritized in priority
        # order, matching the token accounting used during reconciliation.
        budget = cfg.max_batch_tokens
        batch: list[_Work] = []
        running = sorted((r for r in q.running if r.id not in prioritized), key=_batch_key)
        running += [index[rid] for rid in decision.prioritized]
        for r in running:
            w = self._plan_work(r, budget)
            if w.tokens == 0:
                continue
            budget -= w.tokens
            batch.append(w)
        prefill_tokens = sum(w.prefill for w in batch)
        decode_tokens = sum(w.decode for w in batch if w.prefill == 0)

        # (6) cost
        p = cfg.profile
        if batch:
            attended = sum(w.request.kv_tokens + w.kv_growth for w in batch)
            compute_time = (
                p.compute_c0
                + p.compute_c1 * prefill_tokens
                + p.compute_c2 * decode_tokens
                + p.compute_c3 * attended
            )
            compute_time = max(compute_time, MIN_ITERATION_TIME)
        else:
            compute_time = 0.0
        wall = iteration_wall_time(compute_time, transfer_time, cfg.pipeline_overlap)

        progressed = bool(batch) or not d2h.empty or not h2d.empty or decision.prioritized or preempt or forced
        if not progressed:
            self._idle_iterations += 1
            if self._idle_iterations > 2:
                if self.pending:
                    self.clock.advance_to(max(now, self.pending[-1].t_arr))
                    self._idle_iterations = 0
                    return None
                stuck = (q.waiting + q.rotary + q.running)[0].id
                raise DeadlockError(stuck, f"no progress possible; request {stuck} cannot be scheduled")
        else:
            self._idle_iterations = 0

        # (7) advance clock, (8) emit tokens
        self.clock.advance(wall)
        end = self.clock.now
        for w in batch:
            r = w.request
            kv.record_tokens(r.id, w.kv_growth)
            r.prefilled_tokens += w.prefill
            if w.decode:
                r.emit_token(end)
            if r.done:
                r.state = RequestState.FINISHED
                kv.free_request(r.id)
                r.blocks = []
                self.finished.append(r)
            else:
                r.blocks = kv.request_blocks(r.id)
        if any(w.request.state is RequestState.FINISHED for w in batch):
            q.running = [r for r in q.running if r.state is RequestState.RUNNING]
        kv.complete_transfers()
        if cfg.check_invariants:
            kv.check()
        if self.snapshot_block_table:
            used = cfg.hbm_capacity_blocks - kv.hbm_free + cfg.dram_capacity_blocks - kv.dram_free
            if used > self._snapshot_used:
                # Keep the table at peak occupancy; the final one is always empty.
                self._snapshot_used = used
                self._snapshot = {"iteration": len(self.iterations), "time": end, "blocks": kv.dump()}

        rec = IterationRecord(
            index=len(self.iterations),
            start=now,
            compute_time=compute_time,
            transfer_time=transfer_time,
            wall_time=wall,
            batch_prefill_tokens=prefill_tokens,
            batch_decode_tokens=decode_tokens,
            preempted=len(preempt) + forced,
            resumed=len(resumed),
            admitted=len(admitted),
            hbm_free_blocks=kv.hbm_free,
            forced_preemptions=forced,
            d2h_blocks=len(d2h.blocks),
            h2d_blocks=len(h2d.blocks),
            eager_blocks=eager,
            race_conflicts=conflicts,
        )
        self.iterations.append(rec)
        if self.observer is not None:
            self.observer(self, rec)
        return rec

    def _swap_out(self, r: Request, forced: bool) -> TransferPlan:
        kv = self.kv
        plan = kv.plan_preemption_swapout(r.id)
        held = kv.n_blocks(r.id)
        self.preemptions.append(
            PreemptionEvent(
                time=self.clock.now,
                request_id=r.id,
                held_blocks=held,
                transferred_blocks=len(plan.blocks),
                forced=forced,
            )
        )
        if forced:
            r.state = RequestState.ROTARY
            r.n_preemptions += 1
        r.blocks = kv.request_blocks(r.id)
        return plan


def run(
    config: SimConfig, requests: Sequence[Request], snapshot_block_table: bool = False
) -> SimResult:
    return Simulator(config, snapshot_block_table=snapshot_block_table).run(requests)
