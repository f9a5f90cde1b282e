"""Data-flow graph of one training step.

The graph is SPMD: every compute node runs on every device and every
collective node runs once per group instance along its mesh dimensions.
Overlap toggles are not baked in.  Edges that an overlap feature removes are
recorded as *gated* edges, and FSDP all-gathers carry a *prefetch chain*; the
simulator decides which of those edges apply for a given plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .comm import CollectiveKind, encoder_feature_tokens
from .core import ClusterSpec, ModelSpec, WorkloadSpec
from .knobs import DEFAULT_KNOBS, Knobs
from .memory import fsdp_units
from .mesh import Mesh
from .plan import ParallelPlan, expert_mesh, plan_mesh

COMPUTE = "compute"
COLLECTIVE = "collective"

ASYNC_ULYSSES = "async_ulysses"
MOE_OVERLAP = "moe_overlap"
TOGGLES = (ASYNC_ULYSSES, MOE_OVERLAP)

FSDP_DIMS = ("dp_shard", "sp")
SP_DIMS = ("sp",)
REPLICATE_DIMS = ("dp_replicate",)
EP_DIMS = ("ep",)
EXPERT_FSDP_DIMS = ("ep_fsdp",)

PREFETCH_CHAIN_LEN = 8


class CycleError(ValueError):
    pass


@dataclass
class OpNode:
    id: int
    name: str
    kind: str
    phase: str
    flops: float = 0.0
    collective: Optional[CollectiveKind] = None
    nbytes: float = 0.0            # full message M (local payload for all-to-all)
    mesh: str = "main"
    group_dims: tuple[str, ...] = ()
    deps: tuple[int, ...] = ()
    gated: tuple[tuple[int, str], ...] = ()   # (dep, toggle): edge dropped when toggle is on
    prefetch_chain: tuple[int, ...] = ()      # nearest-first block ends; depth d keeps chain[d:]
    micro: int = 0
    tag: str = ""                  # role within its phase, e.g. "attn_a2a", "fsdp_ag"

    @property
    def channel(self) -> str:
        return "compute" if self.kind == COMPUTE else "comm"

    def effective_deps(self, plan: ParallelPlan) -> list[int]:
        deps = list(self.deps)
        for dep, toggle in self.gated:
            if not getattr(plan, toggle):
                deps.append(dep)
        deps.extend(self.prefetch_chain[plan.fsdp_prefetch_depth:])
        return deps

    def all_deps(self) -> list[int]:
        return [*self.deps, *(d for d, _ in self.gated), *self.prefetch_chain]


@dataclass
class StepGraph:
    nodes: list[OpNode]
    meshes: dict[str, Mesh]
    world: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.nodes)

    def count(self, **attrs) -> int:
        return sum(all(getattr(n, k) == v for k, v in attrs.items()) for n in self.nodes)


class _Builder:
    def __init__(self):
        self.nodes: list[OpNode] = []
        self.block_ends: list[int] = []

    def compute(self, name, phase, flops, deps=(), gated=(), micro=0, tag="") -> Optional[int]:
        if flops <= 0:
            return None
        return self._add(OpNode(len(self.nodes), name, COMPUTE, phase, flops=float(flops),
                                deps=_ids(deps), gated=_gated(gated), micro=micro, tag=tag))

    def collective(self, name, phase, kind, nbytes, dims, size, mesh="main", deps=(), gated=(),
                   micro=0, tag="", prefetch=False) -> Optional[int]:
        if size <= 1 or nbytes <= 0:
            return None
        chain = tuple(reversed(self.block_ends[-PREFETCH_CHAIN_LEN:])) if prefetch else ()
        return self._add(OpNode(len(self.nodes), name, COLLECTIVE, phase, collective=kind,
                                nbytes=float(nbytes), mesh=mesh, group_dims=tuple(dims),
                                deps=_ids(deps), gated=_gated(gated), prefetch_chain=chain,
                                micro=micro, tag=tag))

    def end_block(self, node_id: Optional[int]) -> None:
        if node_id is not None:
            self.block_ends.append(node_id)

    def _add(self, node: OpNode) -> int:
        self.nodes.append(node)
        return node.id


def _ids(deps) -> tuple[int, ...]:
    return tuple(sorted({d for d in deps if d is not None}))


def _gated(gated) -> tuple[tuple[int, str], ...]:
    return tuple((d, t) for d, t in gated if d is not None)


def _last(*ids):
    for i in reversed(ids):
        if i is not None:
            return i
    return None


def build_step_graph(plan: ParallelPlan, model: ModelSpec, cluster: ClusterSpec,
                     workload: WorkloadSpec, knobs: Knobs = DEFAULT_KNOBS) -> StepGraph:
    """Encoders -> feature scatter -> layered forward/backward -> optimizer, per micro-batch."""
    b = model.param_dtype_bytes
    P = plan.shard_size
    sp, ep, R = plan.sp, plan.ep, plan.dp_replicate
    S = workload.seq_len
    T = plan.micro_batch * S / sp
    recompute = 1 if plan.recompute == "full" else 0
    micro_steps = max(plan.grad_accum_steps(workload), 1)
    meshes = {"main": plan_mesh(plan)}

    found = model.foundation
    a = found.arch
    H = a.hidden if a else 0
    moe = a.moe if a else None
    if moe is not None:
        meshes["expert"] = expert_mesh(plan)
    ep_fsdp = P // ep if moe is not None else 1
    units = {(u.module, u.layer): u for u in fsdp_units(model, plan)}
    need_found_bwd = found.trainable or any(e.trainable for e in model.encoders)

    g = _Builder()

    def gather(unit, phase, micro):
        ag = g.collective(f"{unit.name}.ag", phase, CollectiveKind.ALL_GATHER,
                          unit.dense_params * b, FSDP_DIMS, P, deps=(), micro=micro,
                          tag="fsdp_ag", prefetch=True)
        age = g.collective(f"{unit.name}.ag_experts", phase, CollectiveKind.ALL_GATHER,
                           unit.local_expert_params * b, EXPERT_FSDP_DIMS, ep_fsdp, mesh="expert",
                           micro=micro, tag="fsdp_ag", prefetch=True)
        return ag, age

    def grad_sync(unit, phase, deps, micro):
        if not unit.trainable:
            return []
        rs = g.collective(f"{unit.name}.rs", phase, CollectiveKind.REDUCE_SCATTER,
                          unit.dense_params * b, FSDP_DIMS, P, deps=deps, micro=micro, tag="fsdp_rs")
        rse = g.collective(f"{unit.name}.rs_experts", phase, CollectiveKind.REDUCE_SCATTER,
                           unit.local_expert_params * b, EXPERT_FSDP_DIMS, ep_fsdp, mesh="expert",
                           deps=deps, micro=micro, tag="fsdp_rs")
        ar = g.collective(f"{unit.name}.ar", phase, CollectiveKind.ALL_REDUCE,
                          unit.dense_params * b / P, REPLICATE_DIMS, R,
                          deps=[rs if rs is not None else deps[-1]], micro=micro, tag="hsdp_ar")
        are = g.collective(f"{unit.name}.ar_experts", phase, CollectiveKind.ALL_REDUCE,
                           unit.local_expert_params * b / ep_fsdp, REPLICATE_DIMS, R,
                           mesh="expert", deps=[rse if rse is not None else deps[-1]],
                           micro=micro, tag="hsdp_ar")
        return [x for x in (rs, rse, ar, are) if x is not None]

    prev_end: list = []
    sync_nodes: list[int] = []
    for k in range(micro_steps):
        sync_nodes = []
        enc_state = []
        # ---- encoders and feature scatter
        enc_outs = []
        for enc in model.encoders:
            feat = encoder_feature_tokens(plan, enc, workload)
            if feat <= 0:
                continue
            unit = units[(enc.name, None)]
            ag, _ = gather(unit, "encoder", k)
            fwd = g.compute(f"{enc.name}.fwd", "encoder", 2 * enc.params * feat,
                            deps=[ag, *prev_end], micro=k, tag="encoder")
            g.end_block(fwd)
            sc = g.collective(f"{enc.name}.scatter", "encoder", CollectiveKind.ALL_TO_ALL,
                              feat * H * b, SP_DIMS, sp, deps=[fwd], micro=k, tag="encoder_scatter")
            enc_outs.append(_last(fwd, sc))
            enc_state.append((enc, unit, feat))

        # ---- foundation forward
        x = [*enc_outs, *prev_end]
        layer_saved = []
        if a is None:
            unit = units[(found.name, None)]
            ag, _ = gather(unit, "fwd.0", k)
            f = g.compute(f"{found.name}.fwd", "fwd.0", 2 * found.params * T, deps=[ag, *x],
                          micro=k, tag="dense")
            g.end_block(f)
            x = [f]
        elif a.layers == 0:
            unit = units[(found.name, None)]
            ag, _ = gather(unit, "fwd.0", k)
            e = g.compute("embed", "fwd.0", 2 * a.embedding_params() * T, deps=[ag, *x], micro=k,
                          tag="embed")
            h = g.compute("head", "fwd.0", 2 * a.head_params() * T, deps=[e], micro=k, tag="head")
            g.end_block(h)
            x = [h]
        else:
            payload = ulysses_payloads_tokens(a, T, b)
            for i in range(a.layers):
                ph = f"fwd.{i}"
                unit = units[(found.name, i)]
                ag, age = gather(unit, ph, k)
                if i == 0:
                    e = g.compute("embed", ph, 2 * a.embedding_params() * T, deps=[ag, *x],
                                  micro=k, tag="embed")
                    x = [e]
                qkv = g.compute(f"l{i}.qkv", ph, 2 * (a.hidden * a.hidden + 2 * a.hidden * a.kv_dim
                                                      + 2 * a.hidden) * T,
                                deps=[ag, *x], micro=k, tag="proj")
                pre = g.collective(f"l{i}.a2a_pre", ph, CollectiveKind.ALL_TO_ALL,
                                   payload["pre"], SP_DIMS, sp, deps=x,
                                   gated=[(qkv, ASYNC_ULYSSES)], micro=k, tag="attn_a2a")
                core = g.compute(f"l{i}.attn", ph, 2 * a.hidden * S * T, deps=[qkv, pre], micro=k,
                                 tag="attn")
                post = g.collective(f"l{i}.a2a_post", ph, CollectiveKind.ALL_TO_ALL,
                                    payload["post"], SP_DIMS, sp, deps=[core], micro=k,
                                    tag="attn_a2a")
                out = g.compute(f"l{i}.out_proj", ph, 2 * a.hidden * a.hidden * T, deps=[core],
                                gated=[(post, ASYNC_ULYSSES)], micro=k, tag="proj")
                x = [n for n in (out, post) if n is not None]
                if a.is_moe_layer(i):
                    x = _moe_forward(g, a, plan, knobs, T, b, i, ph, x, age, k)
                else:
                    mlp = g.compute(f"l{i}.mlp", ph, 2 * a.dense_mlp_params() * T, deps=x,
                                    micro=k, tag="mlp")
                    x = [mlp]
                if i == a.layers - 1:
                    h = g.compute("head", ph, 2 * a.head_params() * T, deps=x, micro=k, tag="head")
                    x = [h]
                g.end_block(_last(*[n for n in x if g.nodes[n].kind == COMPUTE]))
                layer_saved.append(unit)

        # ---- decoders (consume foundation hidden states)
        dec_state = []
        for dec in model.decoders:
            tokens = workload.fraction(dec.name) * T
            if tokens <= 0:
                continue
            unit = units[(dec.name, None)]
            ag, _ = gather(unit, "decoder", k)
            d = g.compute(f"{dec.name}.fwd", "decoder", 2 * dec.params * tokens,
                          deps=[ag, *x], micro=k, tag="decoder")
            g.end_block(d)
            dec_state.append((dec, unit, tokens, d))
        fwd_end = [_last(*x)] + [s[3] for s in dec_state]

        # ---- backward
        grad = list(fwd_end)
        for dec, unit, tokens, _ in reversed(dec_state):
            if not dec.trainable:
                continue
            ag, _ = gather(unit, "decoder.bwd", k)
            d = g.compute(f"{dec.name}.bwd", "decoder.bwd", 4 * dec.params * tokens,
                          deps=[ag, *grad], micro=k, tag="decoder")
            g.end_block(d)
            sync_nodes += grad_sync(unit, "decoder.bwd", [d], k)
            grad = [d]

        if need_found_bwd:
            bwd_factor = 2 + recompute
            if a is None or a.layers == 0:
                unit = units[(found.name, None)]
                ph = "bwd.0"
                ag, _ = gather(unit, ph, k)
                flops = (2 * found.params * T if a is None
                         else 2 * (a.embedding_params() + a.head_params()) * T)
                bw = g.compute(f"{found.name}.bwd", ph, bwd_factor * flops, deps=[ag, *grad],
                               micro=k, tag="dense")
                g.end_block(bw)
                if found.trainable:
                    sync_nodes += grad_sync(unit, ph, [bw], k)
                grad = [bw]
            else:
                payload = ulysses_payloads_tokens(a, T, b)
                for i in reversed(range(a.layers)):
                    ph = f"bwd.{i}"
                    unit = units[(found.name, i)]
                    ag, age = gather(unit, ph, k)
                    if i == a.layers - 1:
                        h = g.compute("head.bwd", ph, bwd_factor * 2 * a.head_params() * T,
                                      deps=[ag, *grad], micro=k, tag="head")
                        grad = [h]
                    if a.is_moe_layer(i):
                        grad = _moe_backward(g, a, plan, knobs, T, b, i, ph, grad, ag, age, k,
                                             recompute)
                    else:
                        mlp = g.compute(f"l{i}.mlp.bwd", ph,
                                        bwd_factor * 2 * a.dense_mlp_params() * T,
                                        deps=[ag, *grad], micro=k, tag="mlp")
                        grad = [mlp]
                    out = g.compute(f"l{i}.out_proj.bwd", ph,
                                    bwd_factor * 2 * a.hidden * a.hidden * T,
                                    deps=[ag, *grad], micro=k, tag="proj")
                    post = g.collective(f"l{i}.a2a_post.bwd", ph, CollectiveKind.ALL_TO_ALL,
                                        payload["post"] * (1 + recompute), SP_DIMS, sp, deps=grad,
                                        gated=[(out, ASYNC_ULYSSES)], micro=k, tag="attn_a2a")
                    core = g.compute(f"l{i}.attn.bwd", ph, bwd_factor * 2 * a.hidden * S * T,
                                     deps=[out, post], micro=k, tag="attn")
                    pre = g.collective(f"l{i}.a2a_pre.bwd", ph, CollectiveKind.ALL_TO_ALL,
                                       payload["pre"] * (1 + recompute), SP_DIMS, sp,
                                       deps=[core], micro=k, tag="attn_a2a")
                    qkv = g.compute(f"l{i}.qkv.bwd", ph,
                                    bwd_factor * 2 * (a.hidden * a.hidden
                                                      + 2 * a.hidden * a.kv_dim + 2 * a.hidden) * T,
                                    deps=[core], gated=[(pre, ASYNC_ULYSSES)], micro=k, tag="proj")
                    last_compute = qkv
                    if i == 0:
                        last_compute = g.compute("embed.bwd", ph,
                                                 bwd_factor * 2 * a.embedding_params() * T,
                                                 deps=[qkv, pre], micro=k, tag="embed")
                    g.end_block(last_compute)
                    if found.trainable:
                        sync_nodes += grad_sync(unit, ph, [last_compute], k)
                    grad = [n for n in (last_compute, pre) if n is not None]

        for enc, unit, feat in reversed(enc_state):
            if not enc.trainable:
                continue
            sc = g.collective(f"{enc.name}.scatter.bwd", "encoder.bwd", CollectiveKind.ALL_TO_ALL,
                              feat * H * b, SP_DIMS, sp, deps=grad, micro=k, tag="encoder_scatter")
            ag, _ = gather(unit, "encoder.bwd", k)
            e = g.compute(f"{enc.name}.bwd", "encoder.bwd", 4 * enc.params * feat,
                          deps=[ag, sc, *grad], micro=k, tag="encoder")
            g.end_block(e)
            sync_nodes += grad_sync(unit, "encoder.bwd", [e], k)
        compute_nodes = [n.id for n in g.nodes if n.micro == k and n.kind == COMPUTE]
        prev_end = [compute_nodes[-1]] if compute_nodes else []

    trainable = model.trainable_params
    opt = g.compute("optimizer", "optimizer",
                    knobs.optimizer_flops_per_param * -(-trainable // P),
                    deps=[*prev_end, *sync_nodes], micro=micro_steps - 1, tag="optimizer")
    meta = {"tokens_per_rank": T * micro_steps, "micro_steps": micro_steps,
            "optimizer": opt}
    return StepGraph(g.nodes, meshes, plan.world, meta)


def ulysses_payloads_tokens(a, T, b) -> dict[str, float]:
    """Local payloads of the pre-attention (q, k, v) and post-attention exchanges."""
    return {"pre": T * (a.hidden + 2 * a.kv_dim) * b, "post": T * a.hidden * b}


def _moe_forward(g, a, plan, knobs, T, b, i, ph, x, age, k):
    moe = a.moe
    router = g.compute(f"l{i}.router", ph, 2 * a.router_params() * T, deps=[*x, age],
                       micro=k, tag="router")
    payload = T * moe.top_k * a.hidden * b * knobs.moe_imbalance
    disp = g.collective(f"l{i}.dispatch", ph, CollectiveKind.ALL_TO_ALL, payload, EP_DIMS,
                        plan.ep, mesh="expert", deps=[router], micro=k, tag="moe_a2a")
    experts = g.compute(f"l{i}.experts", ph, 2 * moe.top_k * a.expert_params() * T,
                        deps=[router, age], gated=[(disp, MOE_OVERLAP)], micro=k, tag="experts")
    comb = g.collective(f"l{i}.combine", ph, CollectiveKind.ALL_TO_ALL, payload, EP_DIMS,
                        plan.ep, mesh="expert", deps=[disp] if disp is not None else [router],
                        gated=[(experts, MOE_OVERLAP)], micro=k, tag="moe_a2a")
    return [n for n in (experts, comb) if n is not None]


def _moe_backward(g, a, plan, knobs, T, b, i, ph, grad, ag, age, k, recompute):
    moe = a.moe
    factor = 2 + recompute
    payload = T * moe.top_k * a.hidden * b * knobs.moe_imbalance * (1 + recompute)
    comb = g.collective(f"l{i}.combine.bwd", ph, CollectiveKind.ALL_TO_ALL, payload, EP_DIMS,
                        plan.ep, mesh="expert", deps=grad, micro=k, tag="moe_a2a")
    experts = g.compute(f"l{i}.experts.bwd", ph, factor * 2 * moe.top_k * a.expert_params() * T,
                        deps=[*grad, ag, age], gated=[(comb, MOE_OVERLAP)], micro=k, tag="experts")
    disp = g.collective(f"l{i}.dispatch.bwd", ph, CollectiveKind.ALL_TO_ALL, payload, EP_DIMS,
                        plan.ep, mesh="expert", deps=[comb] if comb is not None else grad,
                        gated=[(experts, MOE_OVERLAP)], micro=k, tag="moe_a2a")
    router = g.compute(f"l{i}.router.bwd", ph, factor * 2 * a.router_params() * T,
                       deps=[experts, disp], micro=k, tag="router")
    return [router]
