import pytest

from conftest import cluster, model_of, toy_dense, toy_moe
from omniplan.comm import CollectiveKind
from omniplan.core import ModelSpec, ModuleSpec, TransformerSpec, WorkloadSpec
from omniplan.graph import COLLECTIVE, COMPUTE, build_step_graph
from omniplan.plan import ParallelPlan
from omniplan.simulator import channel_order


def counts(g, **kw):
    return g.count(kind=COLLECTIVE, **kw)


def test_world_one_has_no_collectives():
    g = build_step_graph(ParallelPlan(), model_of(toy_dense(1)), cluster(gpus=1),
                         WorkloadSpec(8, 1, 1))
    assert counts(g) == 0
    assert g.count(tag="optimizer") == 1


def sp2_model():
    enc = ModuleSpec("vision", "encoder", raw_param_count=100, trainable=False, tokens_per_item=4)
    return ModelSpec((enc, ModuleSpec("lm", "foundation", toy_dense(1))))


def test_sp2_single_layer_node_counts():
    g = build_step_graph(ParallelPlan(dp_shard=1, sp=2), sp2_model(), cluster(gpus=2),
                         WorkloadSpec(8, 1, 1, {"text": 0.5, "vision": 0.5}))
    assert counts(g, tag="attn_a2a") == 4
    assert counts(g, tag="encoder_scatter") == 1
    # the foundation layer is gathered for forward and again for backward
    fwd_bwd_ag = sum(counts(g, tag="fsdp_ag", phase=p) for p in ("fwd.0", "bwd.0"))
    assert fwd_bwd_ag == 2
    assert counts(g, tag="fsdp_rs") == 1
    # the frozen encoder's sharded weights need their own gather, and nothing else
    assert counts(g, tag="fsdp_ag", phase="encoder") == 1
    assert counts(g) == 4 + 1 + 2 + 1 + 1


def test_moe_layer_adds_four_a2a():
    w = WorkloadSpec(8, 1, 2)
    dense = build_step_graph(ParallelPlan(dp_shard=2), model_of(toy_dense()), cluster(gpus=2), w)
    moe = build_step_graph(ParallelPlan(dp_shard=2, ep=2), model_of(toy_moe()), cluster(gpus=2), w)
    assert counts(dense, tag="moe_a2a") == 0
    assert counts(moe, tag="moe_a2a") == 4 * 2
    for i in range(2):
        assert counts(moe, tag="moe_a2a", phase=f"fwd.{i}") == 2
        assert counts(moe, tag="moe_a2a", phase=f"bwd.{i}") == 2


def test_hsdp_adds_all_reduce():
    w = WorkloadSpec(8, 1, 4)
    g = build_step_graph(ParallelPlan(dp_replicate=2, dp_shard=2), model_of(toy_dense()),
                         cluster(gpus=4), w)
    assert counts(g, tag="hsdp_ar") == 2
    assert all(n.collective == CollectiveKind.ALL_REDUCE for n in g.nodes if n.tag == "hsdp_ar")


def test_gradient_accumulation_repeats_layers():
    w = WorkloadSpec(8, 1, 6)
    g = build_step_graph(ParallelPlan(dp_shard=2), model_of(toy_dense()), cluster(gpus=2), w)
    assert g.meta["micro_steps"] == 3
    assert counts(g, tag="fsdp_ag") == 3 * 4
    assert g.count(tag="optimizer") == 1


def test_frozen_foundation_skips_gradient_sync():
    g = build_step_graph(ParallelPlan(dp_shard=2), model_of(toy_dense(), trainable=False),
                         cluster(gpus=2), WorkloadSpec(8, 1, 2))
    assert counts(g, tag="fsdp_rs") == 0
    assert g.count(tag="optimizer") == 0


def test_graph_is_acyclic_and_deps_point_backwards():
    g = build_step_graph(ParallelPlan(dp_shard=1, sp=2, ep=2), model_of(toy_moe()),
                         cluster(gpus=2), WorkloadSpec(8, 1, 1))
    order = channel_order(g)
    assert sorted(order) == list(range(len(g)))
    assert all(d < n.id for n in g.nodes for d in n.all_deps())


def test_collectives_carry_groups():
    g = build_step_graph(ParallelPlan(dp_shard=2, sp=2, ep=2), model_of(toy_moe()),
                         cluster(gpus=4), WorkloadSpec(8, 1, 2))
    for n in g.nodes:
        if n.kind == COLLECTIVE:
            assert n.group_dims and n.collective is not None and n.nbytes > 0
        else:
            assert n.flops > 0
