"""Shard ownership intervals and interval-intersection copy plans.

Every parameter is treated as a flat element range sharded in even
``ceil(n / P)`` chunks; trailing ranks may own empty intervals.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np


class ReshardError(ValueError):
    pass


def owned_interval(n: int, P: int, r: int) -> tuple[int, int]:
    if P < 1:
        raise ValueError("group size must be >= 1")
    if not 0 <= r < P:
        raise IndexError(f"rank {r} out of range [0, {P})")
    c = -(-n // P)
    return min(r * c, n), min((r + 1) * c, n)


@dataclass(frozen=True)
class ShardLayout:
    param_id: str
    numel: int
    group_size: int

    def __post_init__(self):
        if self.numel < 0 or self.group_size < 1:
            raise ValueError(f"bad layout for {self.param_id!r}: numel={self.numel}, "
                             f"group_size={self.group_size}")

    @property
    def chunk(self) -> int:
        return -(-self.numel // self.group_size)

    def interval(self, r: int) -> tuple[int, int]:
        return owned_interval(self.numel, self.group_size, r)

    def intervals(self) -> list[tuple[int, int]]:
        return [self.interval(r) for r in range(self.group_size)]


@dataclass(frozen=True)
class CopyOp:
    src_rank: int
    src_offset: int
    dst_rank: int
    dst_offset: int
    length: int


@dataclass(frozen=True)
class ReshardPlan:
    param_id: str
    numel: int
    src_group_size: int
    dst_group_size: int
    ops: tuple[CopyOp, ...]

    def to_dict(self) -> dict:
        return {"param_id": self.param_id, "numel": self.numel,
                "src_group_size": self.src_group_size, "dst_group_size": self.dst_group_size,
                "ops": [asdict(op) for op in self.ops]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReshardPlan":
        return cls(d["param_id"], d["numel"], d["src_group_size"], d["dst_group_size"],
                   tuple(CopyOp(**op) for op in d["ops"]))


def make_plan(src: ShardLayout, dst: ShardLayout) -> ReshardPlan:
    if src.param_id != dst.param_id:
        raise ReshardError(f"param id mismatch: {src.param_id!r} vs {dst.param_id!r}")
    if src.numel != dst.numel:
        raise ReshardError(f"numel mismatch for {src.param_id!r}: {src.numel} vs {dst.numel}")
    src_iv = src.intervals()
    ops = []
    for d, (d0, d1) in enumerate(dst.intervals()):
        if d0 == d1:
            continue
        # src intervals are sorted and contiguous, so start from the owner of d0
        s = min(d0 // src.chunk, src.group_size - 1)
        while s < src.group_size and src_iv[s][0] < d1:
            s0, s1 = src_iv[s]
            lo, hi = max(d0, s0), min(d1, s1)
            if lo < hi:
                ops.append(CopyOp(s, lo - s0, d, lo - d0, hi - lo))
            s += 1
    return ReshardPlan(src.param_id, src.numel, src.group_size, dst.group_size, tuple(ops))


@dataclass(frozen=True)
class ReshardViolation:
    code: str
    message: str


def verify(plan: ReshardPlan, n: int) -> list[ReshardViolation]:
    """Materialise destination coverage and report every broken invariant."""
    out: list[ReshardViolation] = []
    if plan.numel != n:
        out.append(ReshardViolation("NUMEL_MISMATCH", f"plan numel {plan.numel} != {n}"))
        return out
    src_iv = [owned_interval(n, plan.src_group_size, r) for r in range(plan.src_group_size)]
    dst_iv = [owned_interval(n, plan.dst_group_size, r) for r in range(plan.dst_group_size)]
    cover = np.zeros(n, dtype=np.int64)
    for i, op in enumerate(plan.ops):
        if op.length <= 0:
            out.append(ReshardViolation("EMPTY_OP", f"op {i} has length {op.length}"))
            continue
        if not (0 <= op.dst_rank < plan.dst_group_size and 0 <= op.src_rank < plan.src_group_size):
            out.append(ReshardViolation("BAD_RANK", f"op {i} references a rank outside the layouts"))
            continue
        d0, d1 = dst_iv[op.dst_rank]
        s0, s1 = src_iv[op.src_rank]
        if op.dst_offset < 0 or d0 + op.dst_offset + op.length > d1:
            out.append(ReshardViolation(
                "DST_OUT_OF_BOUNDS", f"op {i} writes outside dst rank {op.dst_rank} interval"))
            continue
        if op.src_offset < 0 or s0 + op.src_offset + op.length > s1:
            out.append(ReshardViolation(
                "SRC_OUT_OF_BOUNDS", f"op {i} reads outside src rank {op.src_rank} interval"))
            continue
        g0 = d0 + op.dst_offset
        if s0 + op.src_offset != g0:
            out.append(ReshardViolation(
                "MISALIGNED", f"op {i} copies element {s0 + op.src_offset} into position {g0}"))
        cover[g0:g0 + op.length] += 1
    total = sum(op.length for op in plan.ops)
    if total != n:
        out.append(ReshardViolation("LENGTH_SUM", f"copy lengths sum to {total}, expected {n}"))
    over = np.flatnonzero(cover > 1)
    if over.size:
        out.append(ReshardViolation(
            "OVERLAP", f"{over.size} elements written more than once, first at {int(over[0])}"))
    for lo, hi in _runs(np.flatnonzero(cover == 0)):
        out.append(ReshardViolation("COVERAGE_GAP", f"elements [{lo}, {hi}) never written"))
    return out


def _runs(idx: np.ndarray) -> list[tuple[int, int]]:
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) != 1)
    starts = np.concatenate(([idx[0]], idx[breaks + 1]))
    ends = np.concatenate((idx[breaks], [idx[-1]])) + 1
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


def shard(array: np.ndarray, P: int) -> list[np.ndarray]:
    flat = np.asarray(array).reshape(-1)
    return [flat[a:b].copy() for a, b in (owned_interval(flat.size, P, r) for r in range(P))]


def unshard(shards: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(s).reshape(-1) for s in shards]) if shards else np.empty(0)


def apply_plan(plan: ReshardPlan, src_shards: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(src_shards) != plan.src_group_size:
        raise ReshardError(f"expected {plan.src_group_size} source shards, got {len(src_shards)}")
    dtype = src_shards[0].dtype if len(src_shards) else np.float32
    dst = []
    for r in range(plan.dst_group_size):
        a, b = owned_interval(plan.numel, plan.dst_group_size, r)
        dst.append(np.zeros(b - a, dtype=dtype))
    for op in plan.ops:
        dst[op.dst_rank][op.dst_offset:op.dst_offset + op.length] = \
            src_shards[op.src_rank][op.src_offset:op.src_offset + op.length]
    return dst


def make_plans(src: Sequence[ShardLayout], dst: Sequence[ShardLayout]) -> list[ReshardPlan]:
    """Per-parameter plans; both layout lists must cover the same parameter ids."""
    src_by_id = {l.param_id: l for l in src}
    dst_by_id = {l.param_id: l for l in dst}
    if set(src_by_id) != set(dst_by_id):
        missing = sorted(set(src_by_id) ^ set(dst_by_id))
        raise ReshardError(f"layouts disagree on parameter ids: {missing}")
    return [make_plan(src_by_id[k], dst_by_id[k]) for k in sorted(src_by_id)]
