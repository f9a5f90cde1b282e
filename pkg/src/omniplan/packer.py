"""Dynamic batching: pack variable-length samples into fixed-capacity sequences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

FIRST_FIT_DECREASING = "first_fit_decreasing"
FIRST_FIT_ARRIVAL = "first_fit_arrival"
POLICIES = (FIRST_FIT_DECREASING, FIRST_FIT_ARRIVAL)


class PackError(ValueError):
    def __init__(self, sample_id, length: int, capacity: int, index: int):
        self.sample_id = sample_id
        self.length = length
        self.capacity = capacity
        self.index = index
        super().__init__(f"sample {sample_id!r} has length {length} > target length {capacity}")


@dataclass(frozen=True)
class Sample:
    id: object
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ValueError(f"sample {self.id!r}: length must be >= 1")


@dataclass
class PackedBatch:
    capacity: int
    entries: list[tuple[object, int, int]] = field(default_factory=list)  # (id, offset, length)

    @property
    def used(self) -> int:
        return self.entries[-1][1] + self.entries[-1][2] if self.entries else 0

    @property
    def free(self) -> int:
        return self.capacity - self.used

    @property
    def boundaries(self) -> list[int]:
        """Cumulative lengths starting at 0 (cu_seqlens for varlen attention)."""
        return [0] + [off + n for _, off, n in self.entries]

    @property
    def ids(self) -> list:
        return [e[0] for e in self.entries]

    def add(self, sample: Sample) -> None:
        self.entries.append((sample.id, self.used, sample.length))

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "ids": self.ids,
                "lengths": [n for _, _, n in self.entries], "boundaries": self.boundaries}


def _first_fit(samples: Iterable[Sample], capacity: int) -> list[PackedBatch]:
    batches: list[PackedBatch] = []
    for s in samples:
        for b in batches:
            if b.free >= s.length:
                b.add(s)
                break
        else:
            b = PackedBatch(capacity)
            b.add(s)
            batches.append(b)
    return batches


def pack(samples: Sequence[Sample], target_len: int,
         policy: str = FIRST_FIT_DECREASING) -> list[PackedBatch]:
    if target_len < 1:
        raise ValueError("target length must be >= 1")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    for i, s in enumerate(samples):
        if s.length > target_len:
            raise PackError(s.id, s.length, target_len, i)
    if policy == FIRST_FIT_DECREASING:
        # ids may be of mixed types across callers; ties fall back to arrival order then
        order = sorted(samples, key=lambda s: (-s.length, _id_key(s.id)))
    else:
        order = list(samples)
    return _first_fit(order, target_len)


def _id_key(sample_id):
    return (0, sample_id, "") if isinstance(sample_id, (int, float)) else (1, 0, str(sample_id))


def padding_ratio(batches: Sequence[PackedBatch]) -> float:
    if not batches:
        return 0.0
    used = sum(b.used for b in batches)
    return 1 - used / sum(b.capacity for b in batches)


def samples_from_lengths(lengths: Iterable[int]) -> list[Sample]:
    return [Sample(i, n) for i, n in enumerate(lengths)]


class StreamingPacker:
    """Buffers samples and flushes a packing once ``k * target_len`` tokens are held.

    Single-writer: ``push`` and ``finish`` must not be called concurrently.
    """

    def __init__(self, target_len: int, k: int = 4, policy: str = FIRST_FIT_DECREASING):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.target_len = target_len
        self.k = k
        self.policy = policy
        self._buffer: list[Sample] = []
        self._tokens = 0

    def push(self, sample: Sample) -> list[PackedBatch]:
        if sample.length > self.target_len:
            raise PackError(sample.id, sample.length, self.target_len, -1)
        self._buffer.append(sample)
        self._tokens += sample.length
        if self._tokens >= self.k * self.target_len:
            return self._flush()
        return []

    def finish(self) -> list[PackedBatch]:
        return self._flush()

    def _flush(self) -> list[PackedBatch]:
        batches = pack(self._buffer, self.target_len, self.policy)
        self._buffer, self._tokens = [], 0
        return batches

    def run(self, samples: Iterable[Sample]) -> Iterator[PackedBatch]:
        for s in samples:
            yield from self.push(s)
        yield from self.finish()
