"""Declarative n-D parallel recipes: validation, resolution and enumeration."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import product
from typing import Optional, Sequence

from .core import FOUNDATION, ClusterSpec, ModelSpec, TransformerSpec, WorkloadSpec
from .mesh import Mesh, build_mesh

RECOMPUTE_MODES = ("none", "full")

# Violation codes (machine readable, stable).
PLAN_SIZE = "PLAN_SIZE"
WORLD_PRODUCT = "WORLD_PRODUCT"
HEAD_DIVISIBILITY = "HEAD_DIVISIBILITY"
SEQ_DIVISIBILITY = "SEQ_DIVISIBILITY"
EP_DIVISIBILITY = "EP_DIVISIBILITY"
EXPERT_DIVISIBILITY = "EXPERT_DIVISIBILITY"
EP_WITHOUT_EXPERTS = "EP_WITHOUT_EXPERTS"
GLOBAL_BATCH = "GLOBAL_BATCH"
UNSUPPORTED_PARALLELISM = "UNSUPPORTED_PARALLELISM"
BAD_OPTION = "BAD_OPTION"


@dataclass(frozen=True)
class ParallelPlan:
    dp_replicate: int = 1
    dp_shard: int = 1
    sp: int = 1
    ep: int = 1
    micro_batch: int = 1
    recompute: str = "full"
    offload_optimizer: bool = False
    offload_activations: bool = False
    async_ulysses: bool = False
    moe_overlap: bool = False
    fsdp_prefetch_depth: int = 1
    tp: int = 1
    pp: int = 1

    @classmethod
    def for_world(cls, world: int, *, sp: int = 1, dp_replicate: int = 1, **kw) -> "ParallelPlan":
        """Plan whose dp_shard absorbs whatever the other sizes leave of ``world``."""
        dp_shard = max(world // (sp * dp_replicate), 1)
        return cls(dp_replicate=dp_replicate, dp_shard=dp_shard, sp=sp, **kw)

    @property
    def world(self) -> int:
        return self.dp_replicate * self.dp_shard * self.sp

    @property
    def shard_size(self) -> int:
        """Ranks a parameter is sharded over (dp_shard x sp)."""
        return self.dp_shard * self.sp

    @property
    def dp_size(self) -> int:
        return self.dp_replicate * self.dp_shard

    def grad_accum_steps(self, workload: WorkloadSpec) -> int:
        return workload.global_batch // (self.dp_size * self.micro_batch)

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.sp, self.ep, self.dp_replicate, self.micro_batch)

    @property
    def label(self) -> str:
        return plan_label(self)

    def with_toggles(self, **kw) -> "ParallelPlan":
        return replace(self, **kw)


@dataclass(frozen=True)
class ExpertPlacement:
    """Each expert weight is sharded on dim 0 across the EP group."""
    experts_per_rank: int
    per_expert_fsdp_degree: int
    shard_dim: int = 0


@dataclass(frozen=True)
class ModulePlan:
    module: str
    fsdp: str
    participates_in_sp: bool
    expert_placement: Optional[ExpertPlacement] = None


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


def plan_label(plan: ParallelPlan) -> str:
    """Method label in the ``FSDP[+SPk][+EPk]`` form.

    SP is spelled out whenever EP is present (``FSDP+SP1+EP8``).  Plans with a
    replicate dimension use an ``HSDPr`` prefix instead of ``FSDP``.
    """
    label = "FSDP" if plan.dp_replicate == 1 else f"HSDP{plan.dp_replicate}"
    if plan.sp > 1 or plan.ep > 1:
        label += f"+SP{plan.sp}"
    if plan.ep > 1:
        label += f"+EP{plan.ep}"
    return label


def plan_mesh(plan: ParallelPlan) -> Mesh:
    return build_mesh([("dp_replicate", plan.dp_replicate), ("dp_shard", plan.dp_shard),
                       ("sp", plan.sp)], plan.world)


def expert_mesh(plan: ParallelPlan) -> Mesh:
    """View of the same ranks with the flattened shard dims split as (ep_fsdp, ep).

    The EP group is the innermost ``ep`` ranks of the flattened dp_shard x sp
    group; each held expert is further sharded over ``ep_fsdp``.
    """
    return build_mesh([("dp_replicate", plan.dp_replicate),
                       ("ep_fsdp", plan.shard_size // plan.ep), ("ep", plan.ep)], plan.world)


def validate(plan: ParallelPlan, cluster: ClusterSpec, model: ModelSpec,
             workload: WorkloadSpec) -> list[Violation]:
    """Return every composition rule the plan breaks (empty list means ok)."""
    out: list[Violation] = []
    sizes = {"dp_replicate": plan.dp_replicate, "dp_shard": plan.dp_shard, "sp": plan.sp,
             "ep": plan.ep, "micro_batch": plan.micro_batch, "tp": plan.tp, "pp": plan.pp}
    bad = [k for k, v in sizes.items() if v < 1]
    if bad:
        out.append(Violation(PLAN_SIZE, f"sizes must be >= 1: {', '.join(bad)}"))
        return out
    if plan.tp > 1 or plan.pp > 1:
        out.append(Violation(UNSUPPORTED_PARALLELISM,
                             f"tensor/pipeline parallelism not supported (tp={plan.tp}, pp={plan.pp})"))
    if plan.recompute not in RECOMPUTE_MODES:
        out.append(Violation(BAD_OPTION, f"recompute must be one of {RECOMPUTE_MODES}"))
    if plan.fsdp_prefetch_depth < 0:
        out.append(Violation(BAD_OPTION, "fsdp_prefetch_depth must be >= 0"))

    world = cluster.world_size
    if plan.world != world:
        out.append(Violation(
            WORLD_PRODUCT,
            f"dp_replicate*dp_shard*sp = {plan.dp_replicate}*{plan.dp_shard}*{plan.sp} "
            f"= {plan.world} != world {world}"))

    arch = model.foundation.arch
    if arch is not None:
        if arch.heads % plan.sp or arch.kv_heads % plan.sp:
            out.append(Violation(
                HEAD_DIVISIBILITY,
                f"sp={plan.sp} must divide heads={arch.heads} and kv_heads={arch.kv_heads}"))
    if workload.seq_len % plan.sp:
        out.append(Violation(SEQ_DIVISIBILITY,
                             f"sp={plan.sp} does not divide seq_len={workload.seq_len}"))

    moe_modules = [m for m in model.modules if m.arch is not None and m.arch.moe is not None]
    if plan.shard_size % plan.ep:
        out.append(Violation(EP_DIVISIBILITY,
                             f"ep={plan.ep} does not divide dp_shard*sp={plan.shard_size}"))
    if plan.ep > 1 and not moe_modules:
        out.append(Violation(EP_WITHOUT_EXPERTS, f"ep={plan.ep} on a model without MoE layers"))
    for m in moe_modules:
        if m.arch.moe.num_experts % plan.ep:
            out.append(Violation(
                EXPERT_DIVISIBILITY,
                f"ep={plan.ep} does not divide num_experts={m.arch.moe.num_experts} ({m.name})"))

    denom = plan.dp_size * plan.micro_batch
    if workload.global_batch % denom:
        out.append(Violation(
            GLOBAL_BATCH,
            f"global_batch={workload.global_batch} not divisible by "
            f"dp_replicate*dp_shard*micro_batch={denom}"))
    return out


def resolve_expert_sharding(plan: ParallelPlan, arch: TransformerSpec) -> ExpertPlacement:
    if arch.moe is None:
        raise ValueError("resolve_expert_sharding called on a dense module")
    return ExpertPlacement(arch.moe.num_experts // plan.ep, plan.shard_size // plan.ep)


def resolve_module_plans(plan: ParallelPlan, model: ModelSpec) -> list[ModulePlan]:
    out = []
    for m in model.modules:
        placement = None
        if m.arch is not None and m.arch.moe is not None:
            placement = resolve_expert_sharding(plan, m.arch)
        out.append(ModulePlan(m.name, "on", m.kind == FOUNDATION, placement))
    return out


@dataclass(frozen=True)
class PlanLimits:
    """Candidate sets for a sweep; every other plan field comes from ``template``."""
    sp: Sequence[int] = (1,)
    ep: Sequence[int] = (1,)
    dp_replicate: Sequence[int] = (1,)
    micro_batch: Optional[Sequence[int]] = None
    template: ParallelPlan = field(default_factory=ParallelPlan)


def enumerate_plans(cluster: ClusterSpec, model: ModelSpec, workload: WorkloadSpec,
                    limits: PlanLimits = PlanLimits()) -> list[ParallelPlan]:
    world = cluster.world_size
    mbs = limits.micro_batch or (workload.micro_batch,)
    plans = []
    for sp, ep, dpr, m in product(sorted(set(limits.sp)), sorted(set(limits.ep)),
                                  sorted(set(limits.dp_replicate)), sorted(set(mbs))):
        if sp < 1 or dpr < 1 or world % (sp * dpr):
            continue
        plan = replace(limits.template, dp_replicate=dpr, dp_shard=world // (sp * dpr),
                       sp=sp, ep=ep, micro_batch=m)
        if not validate(plan, cluster, model, workload):
            plans.append(plan)
    return sorted(plans, key=lambda p: p.key)
