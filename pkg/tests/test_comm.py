import random
from fractions import Fraction

import pytest

from conftest import cluster
from oracles import oracle_ep, oracle_scatter, oracle_ulysses, oracle_volume
from omniplan.comm import (CollectiveKind, GroupTopology, collective_steps, collective_time,
                           collective_volume, encoder_scatter_volume, ep_dispatch_volume,
                           fsdp_step_volume, topology_of, ulysses_attention_volume,
                           ulysses_payloads, ulysses_volume_bound)
from omniplan.core import LinkSpec, ModuleSpec, MoESpec, TransformerSpec, WorkloadSpec
from omniplan.plan import ParallelPlan

KINDS = list(CollectiveKind)


@pytest.mark.parametrize("kind", KINDS)
def test_volume_matches_enumeration(kind):
    rng = random.Random(7)
    for P in range(1, 9):
        for _ in range(20):
            M = rng.randint(1, 10**9)
            assert collective_volume(kind, Fraction(M), P) == oracle_volume(kind.value, M, P)


def test_volume_zero_for_singleton_groups():
    for kind in KINDS:
        assert collective_volume(kind, 1000, 1) == 0
        assert collective_steps(kind, 1) == 0


def test_alpha_beta_time_and_node_spanning():
    link = LinkSpec(100.0, 10.0, 1.0, 2.0)
    intra = GroupTopology(4, False)
    inter = GroupTopology(4, True)
    assert collective_time(CollectiveKind.ALL_GATHER, 400, intra, link) == 3 * 1.0 + 300 / 100
    assert collective_time(CollectiveKind.ALL_REDUCE, 400, inter, link) == 6 * 2.0 + 600 / 10
    assert collective_time(CollectiveKind.ALL_TO_ALL, 400, inter, link) == 2.0 + 300 / 10
    c = cluster(nodes=2, gpus=4)
    assert not topology_of([0, 1, 2, 3], c).spans_nodes
    assert topology_of([3, 4], c).spans_nodes


def test_fsdp_examples():
    assert fsdp_step_volume(ParallelPlan(dp_shard=1), 1000, 2) == 0
    assert fsdp_step_volume(ParallelPlan(dp_shard=4), 1000, 2) == 4500
    hsdp = ParallelPlan(dp_replicate=2, dp_shard=2)
    assert fsdp_step_volume(hsdp, 1000, 2) - fsdp_step_volume(ParallelPlan(dp_shard=2), 1000, 2) == 1000


def test_fsdp_matches_enumeration():
    for P in (2, 4, 8):
        for R in (1, 2, 4):
            N, b = 1000 * P, 2
            want = 3 * oracle_volume("all_gather", N * b, P)
            if R > 1:
                want += oracle_volume("all_reduce", Fraction(N * b, P), R)
            got = fsdp_step_volume(ParallelPlan(dp_replicate=R, dp_shard=P), N, b)
            assert got == pytest.approx(float(want), rel=1e-15)


def test_ulysses_matches_enumeration():
    for sp in (1, 2, 4, 8):
        arch = TransformerSpec(1, 64, 8, 8, 8, 64, 10)
        w = WorkloadSpec(128, 1, 1)
        got = ulysses_attention_volume(ParallelPlan(sp=sp), arch, w, 2)
        assert got == float(oracle_ulysses(128, sp, 1, 8, 8, 8, 2))


def test_ulysses_payloads_split_by_tensor():
    arch = TransformerSpec(1, 64, 8, 2, 8, 64, 10)
    p = ulysses_payloads(ParallelPlan(sp=4), arch, WorkloadSpec(128, 1, 1), 2)
    assert p == {"query": 32 * 64 * 2, "key": 32 * 16 * 2, "value": 32 * 16 * 2,
                 "output": 32 * 64 * 2}


def test_ulysses_bound_and_monotone():
    arch = TransformerSpec(1, 512, 32, 16, 16, 64, 10)
    vols = []
    for sp in (2, 4, 8, 16):
        w = WorkloadSpec(1024 * sp, 1, 1)
        plan = ParallelPlan(sp=sp)
        v = ulysses_attention_volume(plan, arch, w)
        bound = ulysses_volume_bound(plan, arch, w)
        assert bound == (2 * 512 + 2 * 256) * 1024 * 2
        assert v == bound * (sp - 1) / sp
        vols.append(v)
    assert vols == sorted(vols)


def test_ep_examples_and_enumeration():
    arch = TransformerSpec(1, 4, 2, 2, 2, 8, 10, MoESpec(8, 2, 8))
    assert ep_dispatch_volume(ParallelPlan(dp_shard=4, ep=4), arch, 16, 2) == 384
    assert oracle_ep(16, 2, 8, 4, 2, 4) == 384
    assert ep_dispatch_volume(ParallelPlan(dp_shard=4, ep=1), arch, 16, 2) == 0
    assert ep_dispatch_volume(ParallelPlan(dp_shard=4, ep=4), arch, 16, 2, imbalance=2) == 768
    for ep in (2, 4, 8):
        for r in range(ep):
            assert ep_dispatch_volume(ParallelPlan(dp_shard=8, ep=ep), arch, 32, 2) == \
                oracle_ep(32, 2, 8, 4, 2, ep, r)


def test_encoder_scatter():
    enc = ModuleSpec("vision", "encoder", raw_param_count=10, tokens_per_item=16)
    w = WorkloadSpec(128, 1, 1, {"text": 0.0, "vision": 1.0})
    assert encoder_scatter_volume(ParallelPlan(sp=1), enc, w, 4) == 0
    # 128 vision tokens over sp=2 -> 64 feature tokens per rank
    assert encoder_scatter_volume(ParallelPlan(sp=2), enc, w, 4, 2) == 256
    assert oracle_scatter(64, 4, 2, 2) == 256
    audio = ModuleSpec("audio", "encoder", raw_param_count=10, tokens_per_item=8)
    w2 = WorkloadSpec(128, 1, 1, {"vision": 0.5, "audio": 0.5})
    both = sum(encoder_scatter_volume(ParallelPlan(sp=2), e, w2, 4, 2) for e in (enc, audio))
    assert both == 2 * 128
