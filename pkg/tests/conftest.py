from pathlib import Path

import pytest

from omniplan.config import load_cluster, load_model, load_workload
from omniplan.core import (ClusterSpec, GpuSpec, LinkSpec, ModelSpec, ModuleSpec, MoESpec,
                           TransformerSpec, WorkloadSpec)

DATA = Path(__file__).parent / "data"
GiB = 1 << 30


def toy_dense(layers=2) -> TransformerSpec:
    return TransformerSpec(layers=layers, hidden=4, heads=2, kv_heads=2, head_dim=2, ffn_dim=8,
                           vocab=10)


def toy_moe(stride=1) -> TransformerSpec:
    return TransformerSpec(layers=2, hidden=4, heads=2, kv_heads=2, head_dim=2, ffn_dim=8,
                           vocab=10, moe=MoESpec(4, 2, 8, stride))


def cluster(nodes=1, gpus=8, peak=1e12, hbm=80 * GiB, intra=100e9, inter=25e9,
            lat_intra=1e-6, lat_inter=5e-6) -> ClusterSpec:
    return ClusterSpec(nodes, gpus, GpuSpec(peak, hbm), LinkSpec(intra, inter, lat_intra, lat_inter))


def model_of(arch, trainable=True, encoders=(), decoders=()) -> ModelSpec:
    return ModelSpec((*encoders, ModuleSpec("lm", "foundation", arch, trainable=trainable),
                      *decoders))


@pytest.fixture
def dense7b():
    return load_model(DATA / "dense-7b.json")[0]


@pytest.fixture
def moe30b():
    return load_model(DATA / "moe-30b-a3b.json")[0]


@pytest.fixture
def cluster128():
    c, knobs, _ = load_cluster(DATA / "cluster-128.json")
    return c


@pytest.fixture
def workload128():
    return load_workload(DATA / "workload-128.json")[0]


@pytest.fixture
def text_workload():
    return WorkloadSpec(seq_len=64, micro_batch=1, global_batch=8)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
