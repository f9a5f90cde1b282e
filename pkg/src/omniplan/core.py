"""Hardware, model and workload descriptions plus parameter/FLOP accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

ENCODER = "encoder"
FOUNDATION = "foundation"
DECODER = "decoder"
MODULE_KINDS = (ENCODER, FOUNDATION, DECODER)


class SpecError(ValueError):
    """A description violates one of its own invariants."""


def _positive(name: str, value) -> None:
    if not value > 0:
        raise SpecError(f"{name} must be > 0, got {value!r}")


@dataclass(frozen=True)
class GpuSpec:
    peak_flops: float
    hbm_bytes: int

    def __post_init__(self):
        _positive("peak_flops", self.peak_flops)
        _positive("hbm_bytes", self.hbm_bytes)


@dataclass(frozen=True)
class LinkSpec:
    intra_node_bw: float
    inter_node_bw: float
    intra_latency: float
    inter_latency: float

    def __post_init__(self):
        for name in ("intra_node_bw", "inter_node_bw", "intra_latency", "inter_latency"):
            _positive(name, getattr(self, name))
        if self.intra_node_bw < self.inter_node_bw:
            raise SpecError("intra_node_bw must be >= inter_node_bw")


@dataclass(frozen=True)
class ClusterSpec:
    num_nodes: int
    gpus_per_node: int
    gpu: GpuSpec
    link: LinkSpec

    def __post_init__(self):
        _positive("num_nodes", self.num_nodes)
        _positive("gpus_per_node", self.gpus_per_node)

    @property
    def world_size(self) -> int:
        return self.num_nodes * self.gpus_per_node

    def node_of(self, rank: int) -> int:
        return rank // self.gpus_per_node


@dataclass(frozen=True)
class MoESpec:
    num_experts: int
    top_k: int
    expert_ffn_dim: int
    moe_layer_stride: int = 1

    def __post_init__(self):
        _positive("num_experts", self.num_experts)
        _positive("expert_ffn_dim", self.expert_ffn_dim)
        if not 1 <= self.top_k <= self.num_experts:
            raise SpecError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}")
        if self.moe_layer_stride < 1:
            raise SpecError("moe_layer_stride must be >= 1")


@dataclass(frozen=True)
class TransformerSpec:
    layers: int
    hidden: int
    heads: int
    kv_heads: int
    head_dim: int
    ffn_dim: int
    vocab: int
    moe: Optional[MoESpec] = None
    tied_embeddings: bool = False

    def __post_init__(self):
        if self.layers < 0:
            raise SpecError("layers must be >= 0")
        for name in ("hidden", "heads", "kv_heads", "head_dim", "vocab"):
            _positive(name, getattr(self, name))
        if self.ffn_dim < 0:
            raise SpecError("ffn_dim must be >= 0")
        if self.heads * self.head_dim != self.hidden:
            raise SpecError(
                f"heads * head_dim ({self.heads} * {self.head_dim}) != hidden ({self.hidden})")
        if self.heads % self.kv_heads:
            raise SpecError(f"kv_heads ({self.kv_heads}) must divide heads ({self.heads})")

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    def is_moe_layer(self, i: int) -> bool:
        # Every stride-th layer (1-based) is MoE; stride 1 makes all layers MoE.
        return self.moe is not None and (i + 1) % self.moe.moe_layer_stride == 0

    @property
    def num_moe_layers(self) -> int:
        return sum(self.is_moe_layer(i) for i in range(self.layers))

    # Per-component parameter counts, shared by every consumer of the
    # accounting (memory, step graph, reshard layouts).
    def embedding_params(self) -> int:
        return self.vocab * self.hidden

    def head_params(self) -> int:
        """Output projection plus final norm."""
        return (0 if self.tied_embeddings else self.vocab * self.hidden) + self.hidden

    def attention_params(self) -> int:
        h = self.hidden
        return 2 * h * h + 2 * h * self.kv_dim

    def dense_mlp_params(self) -> int:
        return 3 * self.hidden * self.ffn_dim

    def expert_params(self) -> int:
        """Parameters of a single expert."""
        return 3 * self.hidden * self.moe.expert_ffn_dim

    def router_params(self) -> int:
        return self.hidden * self.moe.num_experts

    def layer_params(self, i: int, active: bool = False) -> int:
        n = self.attention_params() + 2 * self.hidden
        if self.is_moe_layer(i):
            experts = self.moe.top_k if active else self.moe.num_experts
            n += experts * self.expert_params() + self.router_params()
        else:
            n += self.dense_mlp_params()
        return n


@dataclass(frozen=True)
class ModuleSpec:
    name: str
    kind: str
    arch: Optional[TransformerSpec] = None
    raw_param_count: Optional[int] = None
    trainable: bool = True
    tokens_per_item: int = 0

    def __post_init__(self):
        if self.kind not in MODULE_KINDS:
            raise SpecError(f"module {self.name!r}: kind must be one of {MODULE_KINDS}")
        if (self.arch is None) == (self.raw_param_count is None):
            raise SpecError(f"module {self.name!r}: exactly one of arch/raw_param_count must be set")
        if self.raw_param_count is not None and self.raw_param_count < 0:
            raise SpecError(f"module {self.name!r}: raw_param_count must be >= 0")
        if self.tokens_per_item < 0:
            raise SpecError(f"module {self.name!r}: tokens_per_item must be >= 0")

    @property
    def params(self) -> int:
        return param_count(self.arch) if self.arch is not None else self.raw_param_count

    @property
    def active_params(self) -> int:
        return active_param_count(self.arch) if self.arch is not None else self.raw_param_count


@dataclass(frozen=True)
class ModelSpec:
    modules: tuple[ModuleSpec, ...]
    param_dtype_bytes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "modules", tuple(self.modules))
        n_found = sum(m.kind == FOUNDATION for m in self.modules)
        if n_found != 1:
            raise SpecError(f"model must have exactly one foundation module, found {n_found}")
        if self.param_dtype_bytes not in (1, 2, 4):
            raise SpecError("param_dtype_bytes must be one of 1, 2, 4")
        names = [m.name for m in self.modules]
        if len(set(names)) != len(names):
            raise SpecError("module names must be unique")

    @property
    def foundation(self) -> ModuleSpec:
        return next(m for m in self.modules if m.kind == FOUNDATION)

    @property
    def encoders(self) -> list[ModuleSpec]:
        return [m for m in self.modules if m.kind == ENCODER]

    @property
    def decoders(self) -> list[ModuleSpec]:
        return [m for m in self.modules if m.kind == DECODER]

    @property
    def total_params(self) -> int:
        return sum(m.params for m in self.modules)

    @property
    def trainable_params(self) -> int:
        return sum(m.params for m in self.modules if m.trainable)


@dataclass(frozen=True)
class WorkloadSpec:
    seq_len: int
    micro_batch: int
    global_batch: int
    modality_mix: Mapping[str, float] = field(default_factory=lambda: {"text": 1.0})

    def __post_init__(self):
        if self.seq_len < 1:
            raise SpecError("seq_len must be >= 1")
        if self.micro_batch < 1:
            raise SpecError("micro_batch must be >= 1")
        if self.global_batch < self.micro_batch:
            raise SpecError("global_batch must be >= micro_batch")
        if any(f < 0 for f in self.modality_mix.values()):
            raise SpecError("modality fractions must be >= 0")
        if not math.isclose(sum(self.modality_mix.values()), 1.0, abs_tol=1e-9):
            raise SpecError("modality fractions must sum to 1")

    def fraction(self, stream: str) -> float:
        return float(self.modality_mix.get(stream, 0.0))

    def with_seq_len(self, seq_len: int) -> "WorkloadSpec":
        return WorkloadSpec(seq_len, self.micro_batch, self.global_batch, dict(self.modality_mix))


def param_count(arch: TransformerSpec) -> int:
    """Total parameters: embeddings, output head, final norm and every layer."""
    return (arch.embedding_params() + arch.head_params()
            + sum(arch.layer_params(i) for i in range(arch.layers)))


def active_param_count(arch: TransformerSpec) -> int:
    """Parameters touched per token; MoE layers count only top-k experts."""
    return (arch.embedding_params() + arch.head_params()
            + sum(arch.layer_params(i, active=True) for i in range(arch.layers)))


def module_token_weight(module: ModuleSpec, modality_mix: Optional[Mapping[str, float]]) -> float:
    """Share of sequence tokens a module processes.

    Without a modality mix every module is charged for every token.
    """
    if modality_mix is None or module.kind == FOUNDATION:
        return 1.0
    return float(modality_mix.get(module.name, 0.0))


def flops_per_token(model: ModelSpec, seq_len: int,
                    modality_mix: Optional[Mapping[str, float]] = None) -> float:
    """Model FLOPs per sequence token for one training step (MFU numerator)."""
    total = 0.0
    for m in model.modules:
        factor = 6 if m.trainable else 2
        total += factor * m.active_params * module_token_weight(m, modality_mix)
    f = model.foundation
    if f.arch is not None:
        # causal attention: average context S/2, 4*H*ctx forward per layer
        attn_factor = 6 if f.trainable else 2
        total += attn_factor * f.arch.layers * f.arch.hidden * seq_len
    return total


def dense_arch(layers: int, hidden: int, heads: int, kv_heads: int, ffn_dim: int, vocab: int,
               moe: Optional[MoESpec] = None) -> TransformerSpec:
    return TransformerSpec(layers, hidden, heads, kv_heads, hidden // heads, ffn_dim, vocab, moe)


def single_module_model(arch: TransformerSpec, trainable: bool = True,
                        extra: Sequence[ModuleSpec] = (), dtype_bytes: int = 2) -> ModelSpec:
    return ModelSpec((*extra, ModuleSpec("llm", FOUNDATION, arch=arch, trainable=trainable)),
                     dtype_bytes)
