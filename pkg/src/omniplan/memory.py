"""Analytic per-rank peak-memory estimate."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

from . import comm
from .core import ClusterSpec, GpuSpec, ModelSpec, ModuleSpec, WorkloadSpec
from .knobs import DEFAULT_KNOBS, Knobs
from .plan import ParallelPlan

OPTIMIZER_BYTES_PER_PARAM = 12  # fp32 master copy + two Adam moments


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class FsdpUnit:
    """A block of parameters gathered and released together.

    ``dense_params`` are sharded over the full dp_shard x sp group;
    ``local_expert_params`` are the experts this rank holds, sharded over the
    residual expert-FSDP group.
    """
    name: str
    module: str
    layer: Optional[int]
    dense_params: int
    local_expert_params: int
    trainable: bool

    @property
    def gathered_params(self) -> int:
        return self.dense_params + self.local_expert_params


def fsdp_units(model: ModelSpec, plan: ParallelPlan) -> list[FsdpUnit]:
    """Wrapping policy: one unit per non-foundation module, one per foundation layer.

    Embeddings ride with the first layer and the output head with the last.
    """
    units = []
    for m in model.modules:
        if m.arch is None or m.kind != "foundation":
            units.append(FsdpUnit(m.name, m.name, None, m.params, 0, m.trainable))
            continue
        a = m.arch
        if a.layers == 0:
            units.append(FsdpUnit(f"{m.name}.embed_head", m.name, None,
                                  a.embedding_params() + a.head_params(), 0, m.trainable))
            continue
        per_rank_experts = a.moe.num_experts // plan.ep if a.moe else 0
        for i in range(a.layers):
            dense = a.attention_params() + 2 * a.hidden
            experts = 0
            if a.is_moe_layer(i):
                dense += a.router_params()
                experts = per_rank_experts * a.expert_params()
            else:
                dense += a.dense_mlp_params()
            if i == 0:
                dense += a.embedding_params()
            if i == a.layers - 1:
                dense += a.head_params()
            units.append(FsdpUnit(f"{m.name}.layers.{i}", m.name, i, dense, experts, m.trainable))
    return units


@dataclass(frozen=True)
class MemoryBreakdown:
    params: int
    grads: int
    optimizer: int
    activations_saved: int
    activations_working: int
    comm_buffers: int
    logits: int
    runtime_overhead: int

    @property
    def total(self) -> int:
        return sum(getattr(self, f.name) for f in fields(self))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def _sharded_bytes(m: ModuleSpec, P: int, bytes_per_param: int) -> int:
    return ceil_div(m.params, P) * bytes_per_param


def estimate(plan: ParallelPlan, model: ModelSpec, cluster: ClusterSpec, workload: WorkloadSpec,
             knobs: Knobs = DEFAULT_KNOBS) -> MemoryBreakdown:
    b = model.param_dtype_bytes
    P = plan.shard_size
    m = plan.micro_batch
    local_tokens = ceil_div(workload.seq_len, plan.sp)

    params = sum(_sharded_bytes(mod, P, b) for mod in model.modules)
    trainable = [mod for mod in model.modules if mod.trainable]
    grads = sum(_sharded_bytes(mod, P, b) for mod in trainable)
    optimizer = 0 if plan.offload_optimizer else sum(
        _sharded_bytes(mod, P, OPTIMIZER_BYTES_PER_PARAM) for mod in trainable)

    arch = model.foundation.arch
    L = arch.layers if arch else 0
    H = arch.hidden if arch else 0
    per_layer_input = m * local_tokens * H * b
    if plan.recompute == "full":
        saved = L * per_layer_input
    else:
        saved = L * knobs.c_work * per_layer_input
    if plan.offload_activations:
        saved = 0
    working = knobs.c_work * per_layer_input

    if arch is None:
        logits = 0
    elif knobs.naive_logits:
        logits = m * local_tokens * arch.vocab * 6
    else:
        logits = m * min(knobs.ce_chunk_tokens, local_tokens) * arch.vocab * 6

    depth = plan.fsdp_prefetch_depth
    units = fsdp_units(model, plan)
    gathered = max((u.gathered_params for u in units), default=0) * b
    comm_buffers = (1 + depth) * gathered if P > 1 else 0
    comm_buffers += 2 * int(_max_a2a_message(plan, model, workload, knobs))
    peers = (plan.sp - 1) + (plan.ep - 1 if arch is not None and arch.moe else 0)
    comm_buffers += peers * knobs.a2a_peer_buffer_bytes

    return MemoryBreakdown(params, grads, optimizer, saved, working, comm_buffers, logits,
                           knobs.runtime_overhead_bytes)


def _max_a2a_message(plan: ParallelPlan, model: ModelSpec, workload: WorkloadSpec,
                     knobs: Knobs) -> float:
    b = model.param_dtype_bytes
    arch = model.foundation.arch
    msgs = [0.0]
    if arch is not None and plan.sp > 1:
        msgs.append(max(comm.ulysses_payloads(plan, arch, workload, b).values()))
        for enc in model.encoders:
            msgs.append(comm.encoder_feature_tokens(plan, enc, workload) * arch.hidden * b)
    if arch is not None and arch.moe is not None and plan.ep > 1:
        tokens = plan.micro_batch * workload.seq_len / plan.sp
        msgs.append(tokens * arch.moe.top_k * arch.hidden * b * knobs.moe_imbalance)
    return max(msgs)


def fits(breakdown: MemoryBreakdown, gpu: GpuSpec) -> bool:
    return breakdown.total <= gpu.hbm_bytes
