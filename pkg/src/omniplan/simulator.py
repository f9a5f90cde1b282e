"""Schedule a step graph on per-device compute/comm channels and summarise it.

Each device owns one compute channel and one communication channel.  Every
channel executes its nodes in a single static priority order: the topological
order of the graph with *all* optional edges present, ties broken by lowest
node id.  A node starts once its effective dependencies have finished and its
channel (on every participating device) is free.  Because the order is fixed
and overlap toggles only ever remove edges, start times are a max-plus
function of the inputs, so enabling an overlap feature can never lengthen the
step.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .comm import GroupTopology, collective_time
from .core import ClusterSpec, ModelSpec, WorkloadSpec, flops_per_token
from .graph import COMPUTE, CycleError, OpNode, StepGraph
from .knobs import DEFAULT_KNOBS, Knobs
from .plan import ParallelPlan

CHANNELS = ("compute", "comm")


def channel_order(graph: StepGraph) -> list[int]:
    """Kahn topological order over every potential edge, lowest id first."""
    n = len(graph.nodes)
    indeg = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for node in graph.nodes:
        for d in set(node.all_deps()):
            if not 0 <= d < n:
                raise ValueError(f"node {node.id} depends on unknown node {d}")
            succ[d].append(node.id)
            indeg[node.id] += 1
    heap = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        i = heapq.heappop(heap)
        order.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(heap, j)
    if len(order) != n:
        stuck = sorted(i for i in range(n) if indeg[i] > 0)
        raise CycleError(f"dependency cycle among nodes {stuck[:10]}")
    return order


@dataclass(frozen=True)
class Event:
    device: int
    channel: str
    start: float
    end: float
    node_id: int


@dataclass
class Timeline:
    devices: list[int]
    channels: list[str]          # per node
    start: np.ndarray            # (nodes, devices)
    end: np.ndarray
    names: list[str] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)

    @property
    def step_time(self) -> float:
        return float(self.end.max()) if self.end.size else 0.0

    def events(self, devices: Optional[Sequence[int]] = None) -> Iterator[Event]:
        cols = range(len(self.devices)) if devices is None else [
            self.devices.index(d) for d in devices]
        for j in cols:
            for i, ch in enumerate(self.channels):
                yield Event(self.devices[j], ch, float(self.start[i, j]), float(self.end[i, j]), i)

    def busy_intervals(self, col: int, channel: str) -> np.ndarray:
        mask = np.array([c == channel for c in self.channels], dtype=bool)
        iv = np.stack([self.start[mask, col], self.end[mask, col]], axis=1)
        return iv[np.argsort(iv[:, 0], kind="stable")]

    def exposed_comm(self) -> float:
        """Largest per-device fraction of the step where comm runs with no compute."""
        T = self.step_time
        if T <= 0:
            return 0.0
        worst = 0.0
        for j in range(len(self.devices)):
            comm = self.busy_intervals(j, "comm")
            comp = self.busy_intervals(j, "compute")
            worst = max(worst, _uncovered(comm, comp) / T)
        return worst

    def to_chrome_trace(self, devices: Optional[Sequence[int]] = None) -> list[dict]:
        out = []
        for ev in self.events(devices):
            out.append({"name": self.names[ev.node_id] if self.names else str(ev.node_id),
                        "cat": self.phases[ev.node_id] if self.phases else "",
                        "ph": "X", "ts": ev.start * 1e6, "dur": (ev.end - ev.start) * 1e6,
                        "pid": ev.device, "tid": ev.channel})
        return out

    def write_trace(self, path, devices: Optional[Sequence[int]] = None) -> None:
        with open(path, "w") as f:
            json.dump({"traceEvents": self.to_chrome_trace(devices)}, f, sort_keys=True)


def _uncovered(intervals: np.ndarray, cover: np.ndarray) -> float:
    """Measure of the union of ``intervals`` not covered by ``cover`` (both disjoint, sorted)."""
    total = 0.0
    j = 0
    nc = len(cover)
    for s, e in intervals:
        cur = s
        while j < nc and cover[j, 1] <= cur:
            j += 1
        k = j
        while cur < e:
            if k >= nc or cover[k, 0] >= e:
                total += e - cur
                break
            cs, ce = cover[k]
            if cs > cur:
                total += cs - cur
            cur = max(cur, ce)
            k += 1
    return total


def node_duration(node: OpNode, topo: Optional[GroupTopology], cluster: ClusterSpec,
                  knobs: Knobs) -> float:
    if node.kind == COMPUTE:
        return node.flops / (knobs.compute_efficiency * cluster.gpu.peak_flops)
    return collective_time(node.collective, node.nbytes, topo, cluster.link)


class _GroupIndex:
    """Group instances per (mesh, dims), mapped into simulated-device columns."""

    def __init__(self, graph: StepGraph, cluster: ClusterSpec, devices: list[int]):
        self.graph = graph
        self.cluster = cluster
        self.col = {d: j for j, d in enumerate(devices)}
        self.full = len(devices) == graph.world
        self._cache: dict = {}

    def get(self, mesh: str, dims: tuple[str, ...]):
        key = (mesh, dims)
        if key not in self._cache:
            groups = self.graph.meshes[mesh].groups_along(dims)
            cols, topos = [], []
            for grp in groups:
                c = [self.col[r] for r in grp.members if r in self.col]
                if not c:
                    continue
                nodes = {self.cluster.node_of(r) for r in grp.members}
                cols.append(c)
                topos.append(GroupTopology(grp.size, len(nodes) > 1))
            if self.full:
                cols = np.array(cols, dtype=np.int64)
            self._cache[key] = (cols, topos)
        return self._cache[key]


def simulate(graph: StepGraph, plan: ParallelPlan, cluster: ClusterSpec,
             knobs: Knobs = DEFAULT_KNOBS, devices: Optional[Sequence[int]] = None) -> Timeline:
    """List-schedule ``graph`` on the given devices (default: every rank).

    The graph is SPMD with uniform costs, so any subset of devices yields the
    same per-device schedule as the full world; subsets only save time.
    """
    devices = sorted(set(range(graph.world) if devices is None else devices))
    order = channel_order(graph)
    n, D = len(graph.nodes), len(devices)
    start = np.zeros((n, D))
    end = np.zeros((n, D))
    free = {"compute": np.zeros(D), "comm": np.zeros(D)}
    groups = _GroupIndex(graph, cluster, devices)
    zero = np.zeros(D)

    for i in order:
        node = graph.nodes[i]
        deps = node.effective_deps(plan)
        ready = end[deps].max(axis=0) if deps else zero
        if node.kind == COMPUTE:
            dur = node_duration(node, None, cluster, knobs)
            s = np.maximum(ready, free["compute"])
            start[i] = s
            end[i] = s + dur
            free["compute"] = end[i].copy()
            continue
        cols, topos = groups.get(node.mesh, node.group_dims)
        durs = np.array([node_duration(node, t, cluster, knobs) for t in topos])
        fc = free["comm"]
        if isinstance(cols, np.ndarray):
            s = np.maximum(ready[cols].max(axis=1), fc[cols].max(axis=1))
            start[i, cols] = s[:, None]
            end[i, cols] = (s + durs)[:, None]
            fc[cols] = (s + durs)[:, None]
        else:
            for c, d in zip(cols, durs):
                s = max(ready[c].max(), fc[c].max())
                start[i, c] = s
                end[i, c] = s + d
                fc[c] = s + d
    return Timeline(devices, [nd.channel for nd in graph.nodes], start, end,
                    [nd.name for nd in graph.nodes], [nd.phase for nd in graph.nodes])


def representative_devices(graph: StepGraph, cluster: ClusterSpec) -> Optional[list[int]]:
    """``[0]`` when every instance of every used group has the same topology.

    In that case all ranks follow identical schedules and simulating one rank
    is exact; otherwise ``None`` (simulate the whole world).
    """
    seen = set()
    for node in graph.nodes:
        if node.kind == COMPUTE or (node.mesh, node.group_dims) in seen:
            continue
        seen.add((node.mesh, node.group_dims))
        spans = {len({cluster.node_of(r) for r in grp.members}) > 1
                 for grp in graph.meshes[node.mesh].groups_along(node.group_dims)}
        if len(spans) > 1:
            return None
    return [0]


def critical_path(graph: StepGraph, plan: ParallelPlan, cluster: ClusterSpec,
                  knobs: Knobs = DEFAULT_KNOBS) -> float:
    """Longest dependency chain ignoring channel contention (a lower bound on step time)."""
    groups = _GroupIndex(graph, cluster, list(range(graph.world)))
    finish = [0.0] * len(graph.nodes)
    for i in channel_order(graph):
        node = graph.nodes[i]
        if node.kind == COMPUTE:
            dur = node_duration(node, None, cluster, knobs)
        else:
            _, topos = groups.get(node.mesh, node.group_dims)
            dur = min(node_duration(node, t, cluster, knobs) for t in topos)
        deps = node.effective_deps(plan)
        finish[i] = max((finish[d] for d in deps), default=0.0) + dur
    return max(finish, default=0.0)


def phase_category(phase: str) -> str:
    head = phase.split(".")[0]
    if head in ("encoder", "decoder"):
        return head + ("_bwd" if phase.endswith("bwd") else "")
    if head == "fwd":
        return "forward"
    if head == "bwd":
        return "backward"
    return head


@dataclass(frozen=True)
class StepReport:
    step_time: float
    throughput: float          # tokens / s / GPU
    mfu: float
    exposed_comm: float
    breakdown: dict
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"step_time": self.step_time, "throughput": self.throughput, "mfu": self.mfu,
                "exposed_comm": self.exposed_comm, "breakdown": self.breakdown,
                "notes": list(self.notes)}


def report(timeline: Timeline, plan: ParallelPlan, model: ModelSpec, cluster: ClusterSpec,
           workload: WorkloadSpec) -> StepReport:
    step = timeline.step_time
    world = cluster.world_size
    tokens = workload.global_batch * workload.seq_len
    throughput = tokens / (step * world) if step > 0 else 0.0
    fpt = flops_per_token(model, workload.seq_len, workload.modality_mix)
    mfu = throughput * fpt / cluster.gpu.peak_flops

    breakdown: dict[str, dict[str, float]] = {}
    dur = timeline.end[:, 0] - timeline.start[:, 0]
    for i, ch in enumerate(timeline.channels):
        cat = phase_category(timeline.phases[i]) if timeline.phases else "all"
        slot = breakdown.setdefault(cat, {"compute_s": 0.0, "comm_s": 0.0})
        slot[f"{ch}_s"] += float(dur[i])
    notes = []
    if plan.async_ulysses and plan.sp > 1:
        notes.append("async_ulysses modeled as max(projection, all-to-all): an upper bound "
                     "on achievable overlap")
    if plan.offload_optimizer or plan.offload_activations:
        notes.append("offload reduces memory only; host-device transfer time is not simulated")
    return StepReport(step, throughput, mfu, timeline.exposed_comm(),
                      dict(sorted(breakdown.items())), tuple(notes))
