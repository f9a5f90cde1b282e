"""Calibration coefficients for the analytic models.

None of these come from measurements; they are surfaced in every report so a
reader can see exactly what the predictions assume.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

GiB = 1 << 30


@dataclass(frozen=True)
class Knobs:
    # memory model
    c_work: int = 16                      # one layer's recompute working set, in units of m*(S/sp)*H*b
    runtime_overhead_bytes: int = 4 * GiB
    ce_chunk_tokens: int = 1024
    naive_logits: bool = False            # materialise full fp32 logits instead of chunked CE
    a2a_peer_buffer_bytes: int = 1 * GiB  # per-peer staging reserved by each all-to-all communicator
    # comm / simulation
    moe_imbalance: float = 1.0
    compute_efficiency: float = 0.45
    optimizer_flops_per_param: int = 6

    def __post_init__(self):
        if self.c_work < 0 or self.runtime_overhead_bytes < 0 or self.a2a_peer_buffer_bytes < 0:
            raise ValueError("memory knobs must be >= 0")
        if self.ce_chunk_tokens < 1:
            raise ValueError("ce_chunk_tokens must be >= 1")
        if self.moe_imbalance < 1.0:
            raise ValueError("moe_imbalance must be >= 1")
        if not 0 < self.compute_efficiency <= 1:
            raise ValueError("compute_efficiency must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_KNOBS = Knobs()
