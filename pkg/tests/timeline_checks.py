"""Shared soundness checks for simulated timelines."""

import numpy as np

from conftest import cluster
from omniplan.core import ModelSpec, ModuleSpec, MoESpec, TransformerSpec, WorkloadSpec
from omniplan.graph import COMPUTE
from omniplan.plan import ParallelPlan, validate
from omniplan.simulator import critical_path, node_duration

TOL = 1e-9


def check_timeline(graph, plan, c, tl, knobs=None):
    from omniplan.knobs import DEFAULT_KNOBS
    knobs = knobs or DEFAULT_KNOBS
    n = len(graph.nodes)
    # completeness: every node has exactly one event per simulated device
    assert tl.start.shape == tl.end.shape == (n, len(tl.devices))
    assert np.all(tl.end >= tl.start)
    for j in range(len(tl.devices)):
        for ch in ("compute", "comm"):
            iv = tl.busy_intervals(j, ch)
            assert np.all(iv[1:, 0] >= iv[:-1, 1] - TOL), "resource overlap"
    # dependency order holds on every device
    for node in graph.nodes:
        for d in node.effective_deps(plan):
            assert np.all(tl.start[node.id] >= tl.end[d] - TOL)
    compute = sum(node_duration(nd, None, c, knobs) for nd in graph.nodes if nd.kind == COMPUTE)
    assert tl.step_time >= compute * (1 - 1e-12) - TOL
    assert tl.step_time >= critical_path(graph, plan, c, knobs) * (1 - 1e-12) - TOL


def random_instance(rng):
    """A valid (plan, model, cluster, workload) drawn from small configurations."""
    while True:
        gpus = rng.choice([1, 2, 4, 8])
        nodes = rng.choice([1, 2]) if gpus > 1 else 1
        world = gpus * nodes
        heads = rng.choice([4, 8])
        head_dim = rng.choice([4, 8])
        hidden = heads * head_dim
        kv = rng.choice([h for h in (1, 2, 4, 8) if heads % h == 0])
        moe = None
        if rng.random() < 0.5:
            moe = MoESpec(rng.choice([4, 8, 16]), rng.choice([1, 2]), rng.choice([16, 32]),
                          rng.choice([1, 2]))
        arch = TransformerSpec(rng.randint(1, 4), hidden, heads, kv, head_dim, 4 * hidden,
                               rng.choice([64, 256]), moe)
        mods = [ModuleSpec("lm", "foundation", arch, trainable=rng.random() < 0.9)]
        mix = {"text": 1.0}
        if rng.random() < 0.5:
            mods.insert(0, ModuleSpec("vision", "encoder", raw_param_count=rng.randint(100, 5000),
                                      trainable=rng.random() < 0.3, tokens_per_item=4))
            mix = {"text": 0.5, "vision": 0.5}
        model = ModelSpec(tuple(mods))
        sp = rng.choice([s for s in (1, 2, 4) if world % s == 0])
        dpr = rng.choice([r for r in (1, 2) if world % (sp * r) == 0])
        shard = world // (sp * dpr)
        ep = rng.choice([e for e in (1, 2, 4) if (sp * shard) % e == 0]) if moe else 1
        m = rng.choice([1, 2])
        dp = dpr * shard
        w = WorkloadSpec(rng.choice([16, 32, 64]), m, dp * m * rng.choice([1, 2]), mix)
        plan = ParallelPlan(dp_replicate=dpr, dp_shard=shard, sp=sp, ep=ep, micro_batch=m,
                            recompute=rng.choice(["full", "none"]),
                            async_ulysses=rng.random() < 0.5, moe_overlap=rng.random() < 0.5,
                            fsdp_prefetch_depth=rng.choice([0, 1, 2]))
        c = cluster(nodes=nodes, gpus=gpus)
        if not validate(plan, c, model, w):
            return plan, model, c, w
