"""Shared domain types and paging arithmetic."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

KB = 1024
MB = 1024 * KB
GB = 1024 * MB


class RequestState(enum.Enum):
    WAITING = "waiting"
    RUNNING = "running"
    ROTARY = "rotary"
    FINISHED = "finished"


@dataclass(frozen=True)
class ModelProfile:
    """Static model geometry plus the affine iteration cost model.

    Iteration compute time is
    ``compute_c0 + compute_c1 * prefill_tokens + compute_c2 * decode_tokens
    + compute_c3 * kv_tokens_attended``.
    """

    name: str
    n_layers: int
    kv_bytes_per_token_per_layer: int
    block_tokens: int = 16
    compute_c0: float = 2e-3
    compute_c1: float = 20e-6
    compute_c2: float = 40e-6
    compute_c3: float = 1e-9

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.kv_bytes_per_token_per_layer <= 0:
            raise ValueError("kv_bytes_per_token_per_layer must be > 0")
        if self.block_tokens < 1:
            raise ValueError(f"block_tokens must be >= 1, got {self.block_tokens}")
        for name in ("compute_c0", "compute_c1", "compute_c2", "compute_c3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelProfile fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelProfile":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# N_L=64, C=4KB, P=16 -> 64KB segments, 4MB blocks.
QWEN25_32B = ModelProfile(
    name="qwen2.5-32b",
    n_layers=64,
    kv_bytes_per_token_per_layer=4 * KB,
    block_tokens=16,
)


@dataclass(frozen=True)
class SLOSpec:
    ttft_slo: float = 5.0
    tbt_slo: float = 0.1

    def __post_init__(self):
        if self.ttft_slo <= 0 or self.tbt_slo <= 0:
            raise ValueError("SLO thresholds must be strictly positive")


@dataclass(frozen=True)
class VLTParams:
    """Weights of the virtual-lag-time metric.

    ``beta_b`` scales the TBT SLO into the tolerance granted to paused
    (rotary) requests, ``beta_f`` scales the TTFT SLO into the tolerance
    granted to queued requests.
    """

    alpha: float = 3.0
    beta_b: float = 0.0
    beta_f: float = 0.5

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class Request:
    id: int
    t_arr: float
    prompt_tokens: int
    # Oracle generation length; only SJF-Oracle and the engine's termination
    # check may read it.
    output_tokens: int
    generated_tokens: int = 0
    prefilled_tokens: int = 0
    state: RequestState = RequestState.WAITING
    t_run: float | None = None
    t_last: float | None = None
    token_times: list[float] = field(default_factory=list)
    blocks: list[int] = field(default_factory=list)
    n_preemptions: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.output_tokens < 0:
            raise ValueError(f"request {self.id}: token counts must be >= 0")

    @property
    def kv_tokens(self) -> int:
        return self.prefilled_tokens + self.generated_tokens

    @property
    def in_prefill(self) -> bool:
        return self.prefilled_tokens < self.prompt_tokens

    @property
    def done(self) -> bool:
        return self.generated_tokens >= self.output_tokens

    def emit_token(self, t: float) -> None:
        if self.generated_tokens >= self.output_tokens:
            raise ValueError(f"request {self.id} already produced all tokens")
        if self.token_times and t <= self.token_times[-1]:
            raise ValueError(f"request {self.id}: token time {t} not after {self.token_times[-1]}")
        self.generated_tokens += 1
        self.token_times.append(t)
        self.t_last = t

    def clone(self) -> "Request":
        return Request(
            id=self.id,
            t_arr=self.t_arr,
            prompt_tokens=self.prompt_tokens,
            output_tokens=self.output_tokens,
            generated_tokens=self.generated_tokens,
            prefilled_tokens=self.prefilled_tokens,
            state=self.state,
            t_run=self.t_run,
            t_last=self.t_last,
            token_times=list(self.token_times),
            blocks=list(self.blocks),
            n_preemptions=self.n_preemptions,
        )


@dataclass
class SimClock:
    now: float = 0.0

    def advance_to(self, t: float) -> None:
        if t < self.now:
            raise ValueError(f"clock cannot move backwards ({t} < {self.now})")
        self.now = t

    def advance(self, dt: float) -> None:
        self.advance_to(self.now + dt)


def blocks_needed(prompt_tokens: int, produced_tokens: int, profile: ModelProfile) -> int:
    if prompt_tokens < 0 or produced_tokens < 0:
        raise ValueError("token counts must be >= 0")
    return ceil_div(prompt_tokens + produced_tokens, profile.block_tokens)


def segment_bytes(profile: ModelProfile) -> int:
    """Largest contiguous KV region: one layer of one block."""
    return profile.block_tokens * profile.kv_bytes_per_token_per_layer


def block_bytes(profile: ModelProfile) -> int:
    return profile.n_layers * segment_bytes(profile)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)
