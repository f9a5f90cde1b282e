"""Named n-D device mesh and communication-group derivation.

Ranks are laid out row-major with the last dimension varying fastest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Iterable, Sequence

import numpy as np


class PlanInvalidError(ValueError):
    """A parallel layout cannot be realised on the requested world."""


@dataclass(frozen=True)
class Group:
    dim_names: tuple[str, ...]
    members: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Mesh:
    dims: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [n for n, _ in self.dims]
        if len(set(names)) != len(names):
            raise PlanInvalidError(f"mesh dim names must be unique: {names}")
        for name, size in self.dims:
            if size < 1:
                raise PlanInvalidError(f"mesh dim {name!r} has size {size} < 1")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.dims)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(s for _, s in self.dims)

    @property
    def world(self) -> int:
        return math.prod(self.shape)

    def size(self, name: str) -> int:
        return self.shape[self._index(name)]

    def _index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown mesh dim {name!r}; mesh has {list(self.names)}") from None

    def rank_to_coord(self, rank: int) -> tuple[int, ...]:
        return rank_to_coord(self, rank)

    def coord_to_rank(self, coord: Sequence[int]) -> int:
        return coord_to_rank(self, coord)

    def groups_along(self, dim_names: Iterable[str]) -> list[Group]:
        return groups_along(self, dim_names)

    def group_of(self, rank: int, dim_names: Iterable[str]) -> Group:
        dim_names = tuple(dim_names)
        coord = self.rank_to_coord(rank)
        idx = [self._index(n) for n in dim_names]
        members = []
        for sub in product(*(range(self.shape[i]) for i in idx)):
            c = list(coord)
            for i, v in zip(idx, sub):
                c[i] = v
            members.append(self.coord_to_rank(c))
        return Group(dim_names, tuple(sorted(members)))


def build_mesh(dim_spec: Sequence[tuple[str, int]], world: int) -> Mesh:
    mesh = Mesh(tuple((str(n), int(s)) for n, s in dim_spec))
    if mesh.world != world:
        desc = " x ".join(f"{n}={s}" for n, s in mesh.dims)
        raise PlanInvalidError(f"mesh product {desc} = {mesh.world} != world size {world}")
    return mesh


def rank_to_coord(mesh: Mesh, rank: int) -> tuple[int, ...]:
    if not 0 <= rank < mesh.world:
        raise IndexError(f"rank {rank} out of range [0, {mesh.world})")
    coord = []
    for size in reversed(mesh.shape):
        rank, c = divmod(rank, size)
        coord.append(c)
    return tuple(reversed(coord))


def coord_to_rank(mesh: Mesh, coord: Sequence[int]) -> int:
    if len(coord) != len(mesh.shape):
        raise IndexError(f"coordinate {tuple(coord)} has wrong arity for mesh {mesh.shape}")
    rank = 0
    for c, size in zip(coord, mesh.shape):
        if not 0 <= c < size:
            raise IndexError(f"coordinate {tuple(coord)} out of range for mesh {mesh.shape}")
        rank = rank * size + c
    return rank


def groups_along(mesh: Mesh, dim_names: Iterable[str]) -> list[Group]:
    """Partition the world into groups spanning ``dim_names``.

    Members share every coordinate outside ``dim_names``; members and groups
    are both ordered by ascending rank.
    """
    dim_names = tuple(dim_names)
    sel = {mesh._index(n) for n in dim_names}
    if len(sel) != len(dim_names):
        raise KeyError(f"duplicate dim names in {dim_names}")
    keep = [i for i in range(len(mesh.shape)) if i not in sel]
    order = keep + [mesh._index(n) for n in dim_names]
    size = 1
    for n in dim_names:
        size *= mesh.shape[mesh._index(n)]
    # rows of the transposed rank grid; the caller's dim order sets member order, so sort
    ranks = np.arange(mesh.world).reshape(mesh.shape).transpose(order).reshape(-1, size)
    return [Group(dim_names, tuple(sorted(row))) for row in ranks.tolist()]
