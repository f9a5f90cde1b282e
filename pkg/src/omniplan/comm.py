"""Closed-form collective volumes and alpha-beta time estimates.

Volumes are bytes sent per rank.  Ring algorithms are assumed for all-gather,
reduce-scatter and all-reduce; all-to-all is a single direct exchange.  The
functions are generic over the numeric type, so passing ``Fraction`` inputs
yields exact results.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

from .core import ClusterSpec, LinkSpec, ModuleSpec, TransformerSpec, WorkloadSpec
from .plan import ParallelPlan


class CollectiveKind(str, enum.Enum):
    ALL_GATHER = "all_gather"
    REDUCE_SCATTER = "reduce_scatter"
    ALL_REDUCE = "all_reduce"
    ALL_TO_ALL = "all_to_all"


@dataclass(frozen=True)
class GroupTopology:
    size: int
    spans_nodes: bool = False

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("group size must be >= 1")


def topology_of(members: Iterable[int], cluster: ClusterSpec) -> GroupTopology:
    members = list(members)
    nodes = {cluster.node_of(r) for r in members}
    return GroupTopology(len(members), len(nodes) > 1)


def collective_volume(kind: CollectiveKind, full_bytes, P: int):
    """Per-rank bytes sent.  For all-to-all ``full_bytes`` is the local payload."""
    kind = CollectiveKind(kind)
    if P < 1:
        raise ValueError("group size must be >= 1")
    if kind is CollectiveKind.ALL_REDUCE:
        return 2 * full_bytes * (P - 1) / P
    return full_bytes * (P - 1) / P


def collective_steps(kind: CollectiveKind, P: int) -> int:
    kind = CollectiveKind(kind)
    if P <= 1:
        return 0
    if kind is CollectiveKind.ALL_REDUCE:
        return 2 * (P - 1)
    if kind is CollectiveKind.ALL_TO_ALL:
        return 1
    return P - 1


def collective_time(kind: CollectiveKind, full_bytes, topo: GroupTopology, link: LinkSpec) -> float:
    if topo.size <= 1:
        return 0.0
    if topo.spans_nodes:
        bw, lat = link.inter_node_bw, link.inter_latency
    else:
        bw, lat = link.intra_node_bw, link.intra_latency
    vol = collective_volume(kind, full_bytes, topo.size)
    return collective_steps(kind, topo.size) * lat + float(vol) / bw


def ulysses_payloads(plan: ParallelPlan, arch: TransformerSpec, workload: WorkloadSpec,
                     dtype_bytes: int = 2) -> dict[str, float]:
    """Local (pre-exchange) payload of each of the four attention all-to-alls."""
    tokens = plan.micro_batch * workload.seq_len / plan.sp
    return {
        "query": tokens * arch.hidden * dtype_bytes,
        "key": tokens * arch.kv_dim * dtype_bytes,
        "value": tokens * arch.kv_dim * dtype_bytes,
        "output": tokens * arch.hidden * dtype_bytes,
    }


def ulysses_attention_volume(plan: ParallelPlan, arch: TransformerSpec, workload: WorkloadSpec,
                             dtype_bytes: int = 2) -> float:
    """Bytes per rank per layer (forward) for the query/key/value/output exchanges."""
    if plan.sp == 1:
        return 0.0
    per_token = 2 * arch.hidden + 2 * arch.kv_dim
    local = per_token * plan.micro_batch * workload.seq_len / plan.sp * dtype_bytes
    return local * (plan.sp - 1) / plan.sp


def ulysses_volume_bound(plan: ParallelPlan, arch: TransformerSpec, workload: WorkloadSpec,
                         dtype_bytes: int = 2) -> float:
    """Upper bound (2H + 2*H_kv) * m * (S/sp) * b, constant when S and sp scale together."""
    return ((2 * arch.hidden + 2 * arch.kv_dim) * plan.micro_batch
            * workload.seq_len / plan.sp * dtype_bytes)


def fsdp_step_volume(plan: ParallelPlan, module_params: int, dtype_bytes: int = 2) -> float:
    """Forward all-gather + backward all-gather + gradient reduce-scatter, plus the
    cross-replicate gradient all-reduce when dp_replicate > 1."""
    P = plan.shard_size
    nbytes = module_params * dtype_bytes
    vol = 3 * nbytes * (P - 1) / P
    if plan.dp_replicate > 1:
        R = plan.dp_replicate
        vol += 2 * (nbytes / P) * (R - 1) / R
    return vol


def ep_dispatch_volume(plan: ParallelPlan, arch: TransformerSpec, tokens_local: float,
                       dtype_bytes: int = 2, imbalance: float = 1.0) -> float:
    """Dispatch + combine bytes per rank per MoE layer under uniform routing."""
    if plan.ep == 1 or arch.moe is None:
        return 0.0
    k = arch.moe.top_k
    return 2 * tokens_local * k * arch.hidden * dtype_bytes * (plan.ep - 1) / plan.ep * imbalance


def encoder_feature_tokens(plan: ParallelPlan, encoder: ModuleSpec, workload: WorkloadSpec) -> float:
    """Feature tokens one rank produces per micro-batch (items/rank x tokens_per_item).

    The encoder's share of the sequence comes from the modality mix; items are
    spread evenly across the SP group before the scatter.
    """
    if encoder.tokens_per_item == 0:
        return 0.0
    seq_tokens = workload.fraction(encoder.name) * plan.micro_batch * workload.seq_len
    items_per_rank = seq_tokens / encoder.tokens_per_item / plan.sp
    return items_per_rank * encoder.tokens_per_item


def scatter_volume(feature_bytes, sp: int):
    return feature_bytes * (sp - 1) / sp


def encoder_scatter_volume(plan: ParallelPlan, encoder: ModuleSpec, workload: WorkloadSpec,
                           hidden: int, dtype_bytes: int = 2) -> float:
    if plan.sp == 1:
        return 0.0
    feature_bytes = encoder_feature_tokens(plan, encoder, workload) * hidden * dtype_bytes
    return scatter_volume(feature_bytes, plan.sp)
