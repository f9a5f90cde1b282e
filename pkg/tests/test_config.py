import json

import pytest

from conftest import DATA
from omniplan.config import (ConfigError, bundled_path, cluster_to_dict, config_hash, load_cluster,
                             load_model, load_workload, model_to_dict, parse_cluster, parse_model,
                             parse_workload, workload_to_dict)
from omniplan.core import param_count


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj) if not isinstance(obj, str) else obj)
    return p


def test_bundled_configs_load():
    for name in ("tiny-dense", "tiny-moe"):
        model, _ = load_model(f"bundled:{name}")
        assert model.foundation.arch is not None
    c, knobs, _ = load_cluster("bundled:tiny-cluster")
    assert c.world_size == 4 and knobs.runtime_overhead_bytes == 1 << 30
    w, _ = load_workload("bundled:tiny-workload")
    assert w.fraction("vision") == 0.25
    assert bundled_path("tiny-moe").exists()


def test_acceptance_configs_load():
    m, _ = load_model(DATA / "dense-7b.json")
    assert 7.5e9 < param_count(m.foundation.arch) < 7.7e9


def test_round_trip_dicts():
    c, knobs, _ = load_cluster("bundled:tiny-cluster")
    assert parse_cluster(cluster_to_dict(c)) == c
    m, _ = load_model("bundled:tiny-moe")
    assert parse_model(model_to_dict(m)) == m
    w, _ = load_workload("bundled:tiny-workload")
    assert parse_workload(workload_to_dict(w)) == w


def test_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


@pytest.mark.parametrize("obj,where", [
    ({"modules": []}, "model.json.modules"),
    ({"modules": [{"name": "lm", "kind": "foundation",
                   "arch": {"layers": 1, "hidden": 8, "heads": 3, "vocab": 4}}]},
     "model.json.modules[0].arch.head_dim"),
    ({"modules": [{"name": "lm", "kind": "foundation",
                   "arch": {"layers": "x", "hidden": 8, "heads": 2, "vocab": 4}}]},
     "model.json.modules[0].arch.layers"),
    ({"modules": [{"name": "lm", "kind": "foundation", "raw_param_count": 5,
                   "arch": {"layers": 1, "hidden": 8, "heads": 2, "vocab": 4}}]},
     "model.json.modules[0]"),
    ({"modules": [{"name": "lm", "kind": "foundation",
                   "arch": {"layers": 1, "hidden": 8, "heads": 2, "vocab": 4,
                            "moe": {"num_experts": 4, "top_k": 8, "expert_ffn_dim": 4}}}]},
     "model.json.modules[0].arch.moe"),
])
def test_model_errors_are_path_qualified(tmp_path, obj, where):
    with pytest.raises(ConfigError) as e:
        load_model(write(tmp_path, "model.json", obj))
    assert e.value.where == where


def test_cluster_errors(tmp_path):
    good = json.loads(bundled_path("tiny-cluster").read_text())
    bad = dict(good, gpu={"peak_flops": -1, "hbm_bytes": 1})
    with pytest.raises(ConfigError, match=r"cluster.json.gpu.peak_flops"):
        load_cluster(write(tmp_path, "cluster.json", bad))
    bad = dict(good, modeling={"nope": 1})
    with pytest.raises(ConfigError, match=r"cluster.json.modeling.nope"):
        load_cluster(write(tmp_path, "cluster.json", bad))
    with pytest.raises(ConfigError, match="invalid JSON at line 1"):
        load_cluster(write(tmp_path, "cluster.json", "{"))
    with pytest.raises(ConfigError, match="cannot read"):
        load_cluster(tmp_path / "missing.json")


def test_workload_errors(tmp_path):
    with pytest.raises(ConfigError, match="workload.json.global_batch"):
        load_workload(write(tmp_path, "workload.json", {"seq_len": 8}))
    with pytest.raises(ConfigError, match="sum to 1"):
        load_workload(write(tmp_path, "workload.json",
                            {"seq_len": 8, "global_batch": 1, "modality_mix": {"text": 0.5}}))
