"""Paged KV block bookkeeping across HBM and DRAM.

Blocks carry version counters instead of tensor contents. A block is
*replicated* when it has both an HBM and a DRAM slot with equal versions;
replicated blocks can be dropped from HBM without a transfer.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import ModelProfile, block_bytes, segment_bytes


class Tier(enum.Enum):
    HBM = "hbm"
    DRAM = "dram"


class SyncState(enum.Enum):
    DIRTY = "dirty"
    SYNCED = "synced"


class LayoutKind(enum.Enum):
    LAYER_FIRST = "layer_first"
    BLOCK_FIRST = "block_first"


class Direction(enum.Enum):
    D2H = "d2h"
    H2D = "h2d"


class TransferMode(enum.Enum):
    PER_SEGMENT = "per_segment"
    PER_SEGMENT_MERGED = "per_segment_merged"
    BATCHED = "batched"


class KVCacheError(RuntimeError):
    pass


class CapacityExceeded(KVCacheError):
    pass


class Overflow(KVCacheError):
    pass


class DramFull(KVCacheError):
    pass


@dataclass
class Block:
    id: int
    owner: int | None
    hbm_slot: int | None = None
    dram_slot: int | None = None
    sync_state: SyncState = SyncState.DIRTY
    version: int = 0
    dram_version: int = -1
    filled: int = 0

    @property
    def replicated(self) -> bool:
        return self.dram_slot is not None and self.dram_version == self.version


@dataclass(frozen=True)
class TransferPlan:
    direction: Direction
    segments: int = 0
    segment_bytes: int = 0
    total_bytes: int = 0
    mode: TransferMode = TransferMode.BATCHED
    blocks: tuple[int, ...] = ()
    hbm_slots: tuple[int, ...] = ()

    @property
    def empty(self) -> bool:
        return self.total_bytes == 0

    def __add__(self, other: "TransferPlan") -> "TransferPlan":
        if other.empty:
            return self
        if self.empty:
            return other
        if (self.direction, self.mode, self.segment_bytes) != (
            other.direction,
            other.mode,
            other.segment_bytes,
        ):
            raise ValueError("can only merge plans with the same direction, mode and segment size")
        return TransferPlan(
            direction=self.direction,
            segments=self.segments + other.segments,
            segment_bytes=self.segment_bytes,
            total_bytes=self.total_bytes + other.total_bytes,
            mode=self.mode,
            blocks=self.blocks + other.blocks,
            hbm_slots=self.hbm_slots + other.hbm_slots,
        )


class SlotPool:
    """Free-list of slot indices; always hands out the lowest free index."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._free = list(range(capacity))
        self._used = bytearray(capacity)

    @property
    def n_free(self) -> int:
        return len(self._free)

    @property
    def n_used(self) -> int:
        return self.capacity - len(self._free)

    def take(self) -> int:
        slot = heapq.heappop(self._free)
        self._used[slot] = 1
        return slot

    def give(self, slot: int) -> None:
        if not 0 <= slot < self.capacity or not self._used[slot]:
            raise KVCacheError(f"double free or invalid slot {slot}")
        self._used[slot] = 0
        heapq.heappush(self._free, slot)


def address_of(
    layout: LayoutKind, layer: int, block: int, profile: ModelProfile, n_blocks: int
) -> int:
    """Byte offset of segment (layer, block) in a pool of ``n_blocks`` blocks."""
    if not 0 <= layer < profile.n_layers:
        raise IndexError(f"layer {layer} out of range [0, {profile.n_layers})")
    if not 0 <= block < n_blocks:
        raise IndexError(f"block {block} out of range [0, {n_blocks})")
    seg = segment_bytes(profile)
    if layout is LayoutKind.LAYER_FIRST:
        return (layer * n_blocks + block) * seg
    return (block * profile.n_layers + layer) * seg


@dataclass
class _RequestBlocks:
    blocks: list[int] = field(default_factory=list)
    cursor: int = 0
    n_hbm: int = 0
    # Leading blocks already replicated or being replicated; eager scans start here.
    replica_prefix: int = 0


class KVManager:
    """Block table plus the plans that move blocks between tiers.

    With ``defer_dirty_free`` set (full-duplex operation), HBM slots read
    by an outstanding swap-out stay reserved until :meth:`complete_transfers`
    so that a concurrent swap-in can never be handed the same slot.
    """

    def __init__(
        self,
        profile: ModelProfile,
        hbm_capacity_blocks: int,
        dram_capacity_blocks: int,
        layout: LayoutKind = LayoutKind.BLOCK_FIRST,
        mode: TransferMode = TransferMode.BATCHED,
        retain_replicas: bool = True,
        defer_dirty_free: bool = True,
    ):
        self.profile = profile
        self.layout = layout
        self.mode = mode
        self.retain_replicas = retain_replicas
        self.defer_dirty_free = defer_dirty_free
        self.hbm = SlotPool(hbm_capacity_blocks)
        self.dram = SlotPool(dram_capacity_blocks)
        self.blocks: dict[int, Block] = {}
        self._req: dict[int, _RequestBlocks] = {}
        self._next_id = 0
        # Completion work for the transfers issued this iteration.
        self._pending_hbm_free: list[int] = []
        self._pending_replicas: list[int] = []
        self._pending_dram_free: list[int] = []

    # -- queries ---------------------------------------------------------

    @property
    def hbm_free(self) -> int:
        return self.hbm.n_free

    @property
    def dram_free(self) -> int:
        return self.dram.n_free

    def request_blocks(self, request: int) -> list[int]:
        entry = self._req.get(request)
        return list(entry.blocks) if entry else []

    def cursor(self, request: int) -> int:
        entry = self._req.get(request)
        return entry.cursor if entry else 0

    def hbm_blocks(self, request: int) -> int:
        entry = self._req.get(request)
        return entry.n_hbm if entry else 0

    def n_blocks(self, request: int) -> int:
        entry = self._req.get(request)
        return len(entry.blocks) if entry else 0

    def needs_copy(self, request: int) -> list[int]:
        """HBM blocks holding data whose DRAM copy is missing or stale."""
        entry = self._req.get(request)
        if entry is None:
            return []
        # The replicated prefix can be skipped unless some of it is still in flight.
        start = 0 if self._pending_replicas else entry.replica_prefix
        out = []
        for bid in entry.blocks[start:]:
            b = self.blocks[bid]
            if b.hbm_slot is not None and b.filled > 0 and not b.replicated:
                out.append(bid)
        return out

    def freeable_now(self, request: int) -> int:
        """HBM slots that preempting ``request`` would release immediately."""
        if not self.defer_dirty_free:
            return self.hbm_blocks(request)
        return self.hbm_blocks(request) - len(self.needs_copy(request))

    def _hbm_take(self, b: Block) -> None:
        b.hbm_slot = self.hbm.take()
        self._req[b.owner].n_hbm += 1

    def _hbm_give(self, b: Block) -> None:
        self.hbm.give(b.hbm_slot)
        b.hbm_slot = None
        self._req[b.owner].n_hbm -= 1

    def _iter(self, request: int) -> Iterable[Block]:
        entry = self._req.get(request)
        if entry is None:
            return ()
        return (self.blocks[bid] for bid in entry.blocks)

    # -- plan construction -------------------------------------------------

    def _plan(self, direction: Direction, blocks: Sequence[Block]) -> TransferPlan:
        if not blocks:
            return TransferPlan(direction=direction, mode=self.mode)
        if self.layout is LayoutKind.LAYER_FIRST:
            seg = segment_bytes(self.profile)
            per_block = self.profile.n_layers
        else:
            seg = block_bytes(self.profile)
            per_block = 1
        n = len(blocks) * per_block
        return TransferPlan(
            direction=direction,
            segments=n,
            segment_bytes=seg,
            total_bytes=n * seg,
            mode=self.mode,
            blocks=tuple(b.id for b in blocks),
            hbm_slots=tuple(b.hbm_slot for b in blocks),
        )

    # -- operations --------------------------------------------------------

    def allocate_blocks(self, request: int, n: int, tier: Tier = Tier.HBM) -> list[int]:
        if n < 0:
            raise ValueError("n must be >= 0")
        pool = self.hbm if tier is Tier.HBM else self.dram
        if pool.n_free < n:
            raise CapacityExceeded(
                f"request {request}: need {n} {tier.value} blocks, {pool.n_free} free"
            )
        entry = self._req.setdefault(request, _RequestBlocks())
        out = []
        for _ in range(n):
            b = Block(id=self._next_id, owner=request)
            self._next_id += 1
            if tier is Tier.HBM:
                self._hbm_take(b)
            else:
                b.dram_slot = pool.take()
            self.blocks[b.id] = b
            entry.blocks.append(b.id)
            out.append(b.id)
        return out

    def record_tokens(self, request: int, tokens: int) -> list[int]:
        """Append ``tokens`` KV entries; return the blocks that became SYNCED."""
        if tokens < 0:
            raise ValueError("tokens must be >= 0")
        entry = self._req.get(request)
        P = self.profile.block_tokens
        capacity = len(entry.blocks) * P if entry else 0
        cursor = entry.cursor if entry else 0
        if cursor + tokens > capacity:
            raise Overflow(
                f"request {request}: writing {tokens} tokens at cursor {cursor} exceeds {capacity}"
            )
        synced = []
        left = tokens
        while left > 0:
            b = self.blocks[entry.blocks[entry.cursor // P]]
            if b.hbm_slot is None:
                raise KVCacheError(f"block {b.id} of request {request} is not HBM-resident")
            k = min(left, P - b.filled)
            b.filled += k
            b.version += 1
            if b.dram_slot is not None:
                # The DRAM copy is now stale.
                self.dram.give(b.dram_slot)
                b.dram_slot = None
            if b.filled == P:
                b.sync_state = SyncState.SYNCED
                synced.append(b.id)
            entry.cursor += k
            left -= k
        return synced

    def plan_eager_rotation(self, budget_blocks: int, running_by_vlt_asc: Sequence[int]) -> TransferPlan:
        """Copy SYNCED, unreplicated HBM blocks to DRAM without freeing HBM."""
        if budget_blocks < 0:
            raise ValueError("budget must be >= 0")
        chosen: list[Block] = []
        pending = set(self._pending_replicas)
        for rid in running_by_vlt_asc:
            if len(chosen) >= budget_blocks or self.dram.n_free == 0:
                break
            entry = self._req.get(rid)
            if entry is None:
                continue
            # SYNCED blocks form a prefix (tokens fill blocks in order) and
            # never change once full, so the scan can resume from the prefix.
            i = entry.replica_prefix
            contiguous = True
            while i < len(entry.blocks):
                if len(chosen) >= budget_blocks or self.dram.n_free == 0:
                    break
                b = self.blocks[entry.blocks[i]]
                if b.sync_state is not SyncState.SYNCED:
                    break
                if b.replicated or b.id in pending:
                    pass
                elif b.hbm_slot is None:
                    contiguous = False
                else:
                    if b.dram_slot is not None:
                        self.dram.give(b.dram_slot)
                    b.dram_slot = self.dram.take()
                    chosen.append(b)
                    pending.add(b.id)
                i += 1
                if contiguous:
                    entry.replica_prefix = i
        self._pending_replicas.extend(b.id for b in chosen)
        return self._plan(Direction.D2H, chosen)

    def plan_preemption_swapout(self, request: int) -> TransferPlan:
        """Move ``request`` out of HBM, copying only blocks DRAM lacks."""
        entry = self._req.get(request)
        if entry is None:
            return TransferPlan(direction=Direction.D2H, mode=self.mode)
        # Trailing blocks that never received a token carry no data.
        while entry.blocks and entry.cursor <= (len(entry.blocks) - 1) * self.profile.block_tokens:
            b = self.blocks[entry.blocks[-1]]
            if b.filled:
                break
            self._release(b)
            entry.blocks.pop()
        copy_ids = self.needs_copy(request)
        if len(copy_ids) > self.dram.n_free:
            raise DramFull(
                f"request {request}: {len(copy_ids)} blocks to swap out, {self.dram.n_free} DRAM free"
            )
        copy = [self.blocks[bid] for bid in copy_ids]
        plan = self._plan(Direction.D2H, copy)
        copy_set = set(copy_ids)
        for b in self._iter(request):
            if b.hbm_slot is None:
                continue
            if b.id in copy_set:
                if b.dram_slot is not None:
                    self.dram.give(b.dram_slot)
                b.dram_slot = self.dram.take()
                b.dram_version = b.version
                if self.defer_dirty_free:
                    self._pending_hbm_free.append(b.id)
                else:
                    self._hbm_give(b)
            else:
                # Discard safety: a valid DRAM copy already exists.
                assert b.replicated
                self._hbm_give(b)
        return plan

    def plan_swapin(self, request: int) -> TransferPlan:
        """Bring every block of ``request`` back into fresh HBM slots."""
        todo = [b for b in self._iter(request) if b.hbm_slot is None]
        for b in todo:
            if b.dram_slot is None or b.dram_version != b.version:
                raise KVCacheError(f"block {b.id} of request {request} has no valid DRAM copy")
        if len(todo) > self.hbm.n_free:
            raise CapacityExceeded(
                f"request {request}: need {len(todo)} HBM blocks for swap-in, {self.hbm.n_free} free"
            )
        for b in todo:
            self._hbm_take(b)
            if not self.retain_replicas:
                self._pending_dram_free.append(b.id)
        return self._plan(Direction.H2D, todo)

    def complete_transfers(self) -> None:
        """Retire every transfer issued since the last call."""
        for bid in self._pending_hbm_free:
            b = self.blocks.get(bid)
            if b is not None and b.hbm_slot is not None:
                self._hbm_give(b)
        for bid in self._pending_replicas:
            b = self.blocks.get(bid)
            if b is not None and b.dram_slot is not None:
                b.dram_version = b.version
        for bid in self._pending_dram_free:
            b = self.blocks.get(bid)
            if b is not None and b.dram_slot is not None and b.hbm_slot is not None:
                self.dram.give(b.dram_slot)
                b.dram_slot = None
                self._req[b.owner].replica_prefix = 0
        self._pending_hbm_free.clear()
        self._pending_replicas.clear()
        self._pending_dram_free.clear()

    def _release(self, b: Block) -> None:
        if b.hbm_slot is not None:
            self._hbm_give(b)
        if b.dram_slot is not None:
            self.dram.give(b.dram_slot)
        del self.blocks[b.id]

    def free_request(self, request: int) -> None:
        entry = self._req.get(request)
        if entry is None:
            return
        pending = set(self._pending_hbm_free)
        for bid in entry.blocks:
            if bid in pending:
                raise KVCacheError(f"request {request} freed while block {bid} is in flight")
        for bid in entry.blocks:
            self._release(self.blocks[bid])
        del self._req[request]

    # -- introspection -----------------------------------------------------

    def check(self) -> None:
        """Assert block-table invariants; raises KVCacheError on violation."""
        hbm_used = [b.hbm_slot for b in self.blocks.values() if b.hbm_slot is not None]
        dram_used = [b.dram_slot for b in self.blocks.values() if b.dram_slot is not None]
        if len(set(hbm_used)) != len(hbm_used) or len(set(dram_used)) != len(dram_used):
            raise KVCacheError("slot shared by two blocks")
        if len(hbm_used) + self.hbm.n_free != self.hbm.capacity:
            raise KVCacheError("HBM slot conservation violated")
        if len(dram_used) + self.dram.n_free != self.dram.capacity:
            raise KVCacheError("DRAM slot conservation violated")
        owners: dict[int, int] = {}
        for rid, entry in self._req.items():
            for bid in entry.blocks:
                if bid in owners:
                    raise KVCacheError(f"block {bid} owned by {owners[bid]} and {rid}")
                owners[bid] = rid
            resident = sum(1 for bid in entry.blocks if self.blocks[bid].hbm_slot is not None)
            if resident != entry.n_hbm:
                raise KVCacheError(f"request {rid}: HBM counter {entry.n_hbm} != {resident}")
        for b in self.blocks.values():
            if b.hbm_slot is None and b.dram_slot is None:
                raise KVCacheError(f"owned block {b.id} has no residency")
            if b.hbm_slot is not None and b.dram_slot is not None and b.dram_version != b.version:
                if b.id not in self._pending_replicas:
                    raise KVCacheError(f"block {b.id} replicated with stale DRAM copy")
            if b.sync_state is SyncState.SYNCED and b.filled != self.profile.block_tokens:
                raise KVCacheError(f"block {b.id} SYNCED but only {b.filled} tokens")

    def dump(self) -> dict[str, dict]:
        return {
            str(b.id): {
                "owner": b.owner,
                "hbm_slot": b.hbm_slot,
                "dram_slot": b.dram_slot,
                "sync_state": b.sync_state.value,
                "version": b.version,
                "dram_version": b.dram_version,
            }
            for b in sorted(self.blocks.values(), key=lambda b: b.id)
        }


def race_conflicts(d2h: TransferPlan, h2d: TransferPlan) -> set[int]:
    """HBM slots written by ``h2d`` that ``d2h`` still reads."""
    return set(d2h.hbm_slots) & set(h2d.hbm_slots)
