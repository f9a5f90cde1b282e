import pytest

from conftest import cluster, model_of, toy_dense
from omniplan.core import ModelSpec, ModuleSpec, MoESpec, TransformerSpec, WorkloadSpec
from omniplan.plan import (EP_DIVISIBILITY, EP_WITHOUT_EXPERTS, EXPERT_DIVISIBILITY, GLOBAL_BATCH,
                           HEAD_DIVISIBILITY, PLAN_SIZE, SEQ_DIVISIBILITY, UNSUPPORTED_PARALLELISM,
                           WORLD_PRODUCT, ParallelPlan, PlanLimits, enumerate_plans, plan_label,
                           resolve_expert_sharding, resolve_module_plans, validate)


def moe8():
    return TransformerSpec(2, 16, 4, 4, 4, 32, 50, MoESpec(8, 2, 16))


def codes(v):
    return [x.code for x in v]


def test_paper_style_8_rank_composition_ok():
    plan = ParallelPlan(dp_replicate=2, dp_shard=2, sp=2, ep=2)
    assert validate(plan, cluster(gpus=8), model_of(moe8()), WorkloadSpec(64, 1, 8)) == []


def test_world_product_violation():
    plan = ParallelPlan(dp_replicate=2, dp_shard=2, sp=3)
    assert WORLD_PRODUCT in codes(validate(plan, cluster(gpus=8), model_of(moe8()),
                                           WorkloadSpec(96, 1, 12)))


def test_head_divisibility():
    arch = TransformerSpec(1, 32, 8, 4, 4, 32, 50)
    plan = ParallelPlan(dp_shard=1, sp=8)
    assert HEAD_DIVISIBILITY in codes(validate(plan, cluster(gpus=8), model_of(arch),
                                               WorkloadSpec(64, 1, 1)))


def test_other_violations():
    c = cluster(gpus=8)
    w = WorkloadSpec(65, 1, 8)
    assert SEQ_DIVISIBILITY in codes(validate(ParallelPlan(dp_shard=4, sp=2), c, model_of(moe8()), w))
    w = WorkloadSpec(64, 1, 8)
    assert EP_DIVISIBILITY in codes(validate(ParallelPlan(dp_shard=8, ep=3), c, model_of(moe8()), w))
    assert EXPERT_DIVISIBILITY in codes(
        validate(ParallelPlan(dp_shard=8, ep=8), c,
                 model_of(TransformerSpec(2, 16, 4, 4, 4, 32, 50, MoESpec(4, 2, 16))), w))
    assert EP_WITHOUT_EXPERTS in codes(validate(ParallelPlan(dp_shard=8, ep=2), c,
                                                model_of(toy_dense()), w))
    assert GLOBAL_BATCH in codes(validate(ParallelPlan(dp_shard=8), c, model_of(moe8()),
                                          WorkloadSpec(64, 1, 12)))
    assert UNSUPPORTED_PARALLELISM in codes(validate(ParallelPlan(dp_shard=8, tp=2), c,
                                                     model_of(moe8()), w))
    assert codes(validate(ParallelPlan(dp_shard=0), c, model_of(moe8()), w)) == [PLAN_SIZE]


def test_validation_is_pure():
    plan = ParallelPlan(dp_shard=1, sp=8, ep=3)
    args = (plan, cluster(gpus=8), model_of(moe8()), WorkloadSpec(60, 1, 3))
    assert validate(*args) == validate(*args)


@pytest.mark.parametrize("E,ep,shard,expected", [(8, 2, 4, (4, 2)), (8, 1, 4, (8, 4)),
                                                 (4, 4, 4, (1, 1))])
def test_resolve_expert_sharding(E, ep, shard, expected):
    arch = TransformerSpec(1, 16, 4, 4, 4, 32, 50, MoESpec(E, 1, 16))
    p = resolve_expert_sharding(ParallelPlan(dp_shard=shard, ep=ep), arch)
    assert (p.experts_per_rank, p.per_expert_fsdp_degree) == expected
    assert p.experts_per_rank * ep == E and p.shard_dim == 0


def test_resolve_expert_sharding_rejects_dense():
    with pytest.raises(ValueError):
        resolve_expert_sharding(ParallelPlan(), toy_dense())


def test_module_plans_place_experts_only_on_moe_modules():
    enc = ModuleSpec("vision", "encoder", raw_param_count=100, trainable=False)
    mp = resolve_module_plans(ParallelPlan(dp_shard=4, ep=2),
                              ModelSpec((enc, ModuleSpec("lm", "foundation", moe8()))))
    assert mp[0].expert_placement is None and not mp[0].participates_in_sp
    assert mp[1].expert_placement.experts_per_rank == 4 and mp[1].participates_in_sp


def test_labels():
    assert plan_label(ParallelPlan(dp_shard=8)) == "FSDP"
    assert plan_label(ParallelPlan(dp_shard=2, sp=4)) == "FSDP+SP4"
    assert plan_label(ParallelPlan(dp_shard=8, sp=4, ep=8)) == "FSDP+SP4+EP8"
    assert plan_label(ParallelPlan(dp_shard=8, ep=8)) == "FSDP+SP1+EP8"
    assert plan_label(ParallelPlan(dp_replicate=2, dp_shard=2, sp=2)) == "HSDP2+SP2"


def test_enumerate_dense_8_gpus():
    arch = TransformerSpec(2, 32, 4, 4, 8, 64, 50)
    plans = enumerate_plans(cluster(gpus=8), model_of(arch), WorkloadSpec(64, 1, 8),
                            PlanLimits(sp=(4, 1, 2)))
    assert [p.label for p in plans] == ["FSDP", "FSDP+SP2", "FSDP+SP4"]


def test_enumerate_world_one():
    plans = enumerate_plans(cluster(gpus=1), model_of(toy_dense()), WorkloadSpec(8, 1, 1),
                            PlanLimits(sp=(1, 2), ep=(1, 2)))
    assert plans == [ParallelPlan(dp_shard=1)]


def test_enumerate_moe_128():
    arch = TransformerSpec(2, 64, 16, 4, 4, 64, 50, MoESpec(128, 8, 32))
    c = cluster(nodes=16, gpus=8)
    plans = enumerate_plans(c, model_of(arch), WorkloadSpec(1024, 1, 128),
                            PlanLimits(sp=(1, 2, 4), ep=(1, 4, 8)))
    labels = [p.label for p in plans]
    assert "FSDP+SP4+EP8" in labels and len(labels) == 9
    assert [p.key for p in plans] == sorted(p.key for p in plans)
    for p in plans:
        assert validate(p, c, model_of(arch), WorkloadSpec(1024, 1, 128)) == []
