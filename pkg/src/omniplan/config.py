"""JSON config ingestion with path-qualified error messages."""

from __future__ import annotations

import hashlib
import json
from dataclasses import fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Union

from .core import (ClusterSpec, GpuSpec, LinkSpec, ModelSpec, ModuleSpec, MoESpec, SpecError,
                   TransformerSpec, WorkloadSpec)
from .knobs import Knobs


class ConfigError(ValueError):
    def __init__(self, where: str, message: str):
        self.where = where
        super().__init__(f"{where}: {message}")


BUNDLED = ("tiny-dense", "tiny-moe", "tiny-cluster", "tiny-workload")


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("omniplan") / "data" / f"{name}.json"))


def read_json(path: Union[str, Path]) -> tuple[Any, str]:
    """Load a JSON file; ``bundled:NAME`` refers to a config shipped with the package."""
    p = str(path)
    if p.startswith("bundled:"):
        path = bundled_path(p.split(":", 1)[1])
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(str(path), f"cannot read file ({e.strerror})") from None
    try:
        return json.loads(text), path.name
    except json.JSONDecodeError as e:
        raise ConfigError(path.name, f"invalid JSON at line {e.lineno}: {e.msg}") from None


def config_hash(obj: Any) -> str:
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


class _Reader:
    def __init__(self, data: Any, where: str):
        self.data = data
        self.where = where

    def _err(self, key, msg):
        raise ConfigError(f"{self.where}.{key}" if key is not None else self.where, msg)

    def obj(self, key) -> "_Reader":
        v = self._get(key)
        if not isinstance(v, Mapping):
            self._err(key, "expected an object")
        return _Reader(v, f"{self.where}.{key}")

    def _get(self, key, default=...):
        if not isinstance(self.data, Mapping):
            raise ConfigError(self.where, "expected an object")
        if key not in self.data:
            if default is ...:
                self._err(key, "missing required field")
            return default
        return self.data[key]

    def has(self, key) -> bool:
        return isinstance(self.data, Mapping) and self.data.get(key) is not None

    def int(self, key, default=..., minimum=None) -> int:
        v = self._get(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            if isinstance(v, float) and v.is_integer():
                v = int(v)
            else:
                self._err(key, f"expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            self._err(key, f"must be >= {minimum}, got {v}")
        return v

    def num(self, key, default=..., positive=False) -> float:
        v = self._get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self._err(key, f"expected a number, got {v!r}")
        if positive and not v > 0:
            self._err(key, f"must be > 0, got {v}")
        return float(v)

    def bool(self, key, default=...) -> bool:
        v = self._get(key, default)
        if not isinstance(v, bool):
            self._err(key, f"expected true/false, got {v!r}")
        return v

    def str(self, key, default=...) -> str:
        v = self._get(key, default)
        if not isinstance(v, str) or not v:
            self._err(key, f"expected a non-empty string, got {v!r}")
        return v


def _spec(where: str, build):
    try:
        return build()
    except SpecError as e:
        raise ConfigError(where, str(e)) from None


def parse_cluster(data: Any, where: str = "cluster") -> ClusterSpec:
    r = _Reader(data, where)
    g = r.obj("gpu")
    gpu = _spec(g.where, lambda: GpuSpec(g.num("peak_flops", positive=True),
                                         g.int("hbm_bytes", minimum=1)))
    ln = r.obj("link")
    link = _spec(ln.where, lambda: LinkSpec(ln.num("intra_node_bw", positive=True),
                                            ln.num("inter_node_bw", positive=True),
                                            ln.num("intra_latency", positive=True),
                                            ln.num("inter_latency", positive=True)))
    return _spec(where, lambda: ClusterSpec(r.int("num_nodes", minimum=1),
                                            r.int("gpus_per_node", minimum=1), gpu, link))


def parse_knobs(data: Any, where: str = "cluster.modeling") -> Knobs:
    if data is None:
        return Knobs()
    r = _Reader(data, where)
    kw = {}
    known = {f.name: f for f in fields(Knobs)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{where}.{key}", f"unknown knob; expected one of {sorted(known)}")
        default = getattr(Knobs(), key)
        if isinstance(default, bool):
            kw[key] = r.bool(key)
        elif isinstance(default, int):
            kw[key] = r.int(key, minimum=0)
        else:
            kw[key] = r.num(key)
    try:
        return Knobs(**kw)
    except ValueError as e:
        raise ConfigError(where, str(e)) from None


def parse_arch(r: _Reader) -> TransformerSpec:
    moe = None
    if r.has("moe"):
        mr = r.obj("moe")
        moe = _spec(mr.where, lambda: MoESpec(mr.int("num_experts", minimum=1),
                                              mr.int("top_k", minimum=1),
                                              mr.int("expert_ffn_dim", minimum=1),
                                              mr.int("moe_layer_stride", 1, minimum=1)))
    hidden = r.int("hidden", minimum=1)
    heads = r.int("heads", minimum=1)
    head_dim = r.int("head_dim", hidden // heads if hidden % heads == 0 else ..., minimum=1)
    return _spec(r.where, lambda: TransformerSpec(
        r.int("layers", minimum=0), hidden, heads, r.int("kv_heads", heads, minimum=1), head_dim,
        r.int("ffn_dim", 0, minimum=0), r.int("vocab", minimum=1), moe,
        r.bool("tied_embeddings", False)))


def parse_model(data: Any, where: str = "model") -> ModelSpec:
    r = _Reader(data, where)
    mods = r._get("modules")
    if not isinstance(mods, list) or not mods:
        raise ConfigError(f"{where}.modules", "expected a non-empty list")
    modules = []
    for i, _ in enumerate(mods):
        mr = _Reader(mods[i], f"{where}.modules[{i}]")
        if not isinstance(mods[i], Mapping):
            raise ConfigError(mr.where, "expected an object")
        arch = parse_arch(mr.obj("arch")) if mr.has("arch") else None
        raw = mr.int("raw_param_count", minimum=0) if mr.has("raw_param_count") else None
        modules.append(_spec(mr.where, lambda: ModuleSpec(
            mr.str("name"), mr.str("kind"), arch, raw, mr.bool("trainable", True),
            mr.int("tokens_per_item", 0, minimum=0))))
    return _spec(where, lambda: ModelSpec(tuple(modules), r.int("param_dtype_bytes", 2)))


def parse_workload(data: Any, where: str = "workload") -> WorkloadSpec:
    r = _Reader(data, where)
    mix = r._get("modality_mix", {"text": 1.0})
    if not isinstance(mix, Mapping) or not mix:
        raise ConfigError(f"{where}.modality_mix", "expected a non-empty object")
    mr = _Reader(mix, f"{where}.modality_mix")
    mix = {k: mr.num(k) for k in mix}
    return _spec(where, lambda: WorkloadSpec(r.int("seq_len", minimum=1),
                                             r.int("micro_batch", 1, minimum=1),
                                             r.int("global_batch", minimum=1), mix))


def load_cluster(path) -> tuple[ClusterSpec, Knobs, dict]:
    data, name = read_json(path)
    cluster = parse_cluster(data, name)
    knobs = parse_knobs(data.get("modeling"), f"{name}.modeling")
    return cluster, knobs, data


def load_model(path) -> tuple[ModelSpec, dict]:
    data, name = read_json(path)
    return parse_model(data, name), data


def load_workload(path) -> tuple[WorkloadSpec, dict]:
    data, name = read_json(path)
    return parse_workload(data, name), data


def arch_to_dict(a: TransformerSpec) -> dict:
    d = {"layers": a.layers, "hidden": a.hidden, "heads": a.heads, "kv_heads": a.kv_heads,
         "head_dim": a.head_dim, "ffn_dim": a.ffn_dim, "vocab": a.vocab,
         "tied_embeddings": a.tied_embeddings}
    if a.moe:
        d["moe"] = {"num_experts": a.moe.num_experts, "top_k": a.moe.top_k,
                    "expert_ffn_dim": a.moe.expert_ffn_dim,
                    "moe_layer_stride": a.moe.moe_layer_stride}
    return d


def model_to_dict(model: ModelSpec) -> dict:
    mods = []
    for m in model.modules:
        d = {"name": m.name, "kind": m.kind, "trainable": m.trainable,
             "tokens_per_item": m.tokens_per_item}
        if m.arch is not None:
            d["arch"] = arch_to_dict(m.arch)
        else:
            d["raw_param_count"] = m.raw_param_count
        mods.append(d)
    return {"modules": mods, "param_dtype_bytes": model.param_dtype_bytes}


def cluster_to_dict(c: ClusterSpec, knobs: Knobs = None) -> dict:
    d = {"num_nodes": c.num_nodes, "gpus_per_node": c.gpus_per_node,
         "gpu": {"peak_flops": c.gpu.peak_flops, "hbm_bytes": c.gpu.hbm_bytes},
         "link": {"intra_node_bw": c.link.intra_node_bw, "inter_node_bw": c.link.inter_node_bw,
                  "intra_latency": c.link.intra_latency, "inter_latency": c.link.inter_latency}}
    if knobs is not None:
        d["modeling"] = knobs.to_dict()
    return d


def workload_to_dict(w: WorkloadSpec) -> dict:
    return {"seq_len": w.seq_len, "micro_batch": w.micro_batch, "global_batch": w.global_batch,
            "modality_mix": dict(w.modality_mix)}
