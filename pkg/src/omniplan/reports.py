"""Recipe sweeps and their table-shaped reports (JSON, CSV, markdown)."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from itertools import product
from typing import Optional, Sequence

from . import __version__
from .core import ClusterSpec, ModelSpec, WorkloadSpec, flops_per_token
from .graph import build_step_graph
from .knobs import DEFAULT_KNOBS, Knobs
from .memory import MemoryBreakdown, estimate, fits
from .plan import ParallelPlan, PlanLimits, validate
from .simulator import StepReport, Timeline, report, representative_devices, simulate

OK = "ok"
OOM = "OOM"
INVALID = "invalid"

MD_COLUMNS = ("Method", "Seqlen", "Memory (GB)", "Throughput", "MFU (%)")
CSV_COLUMNS = ("method", "seqlen", "memory_gb", "throughput", "mfu_pct", "status", "rank",
               "dp_replicate", "dp_shard", "sp", "ep", "micro_batch", "detail")
GB = 1e9


@dataclass
class ReportRow:
    method: str
    seqlen: int
    plan: ParallelPlan
    status: str
    memory: Optional[MemoryBreakdown] = None
    step: Optional[StepReport] = None
    violations: tuple[str, ...] = ()
    rank: Optional[int] = None       # throughput rank among feasible plans of this seqlen

    @property
    def memory_gb(self) -> Optional[float]:
        return self.memory.total / GB if self.memory else None

    @property
    def throughput(self) -> Optional[float]:
        return self.step.throughput if self.step else None

    @property
    def mfu_pct(self) -> Optional[float]:
        return self.step.mfu * 100 if self.step else None

    def to_dict(self) -> dict:
        return {"method": self.method, "seqlen": self.seqlen, "status": self.status,
                "rank": self.rank, "plan": asdict(self.plan),
                "memory_gb": self.memory_gb, "throughput": self.throughput,
                "mfu_pct": self.mfu_pct, "violations": list(self.violations),
                "memory": self.memory.to_dict() if self.memory else None,
                "step": self.step.to_dict() if self.step else None}


@dataclass
class RecipeReport:
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)

    def feasible(self) -> list[ReportRow]:
        return [r for r in self.rows if r.status == OK]

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            p = r.plan
            w.writerow([r.method, r.seqlen, _fmt(r.memory_gb, ".6g"), _fmt(r.throughput, ".6g"),
                        _fmt(r.mfu_pct, ".6g"), r.status, "" if r.rank is None else r.rank,
                        p.dp_replicate, p.dp_shard, p.sp, p.ep, p.micro_batch,
                        " ".join(r.violations)])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(MD_COLUMNS) + " |",
                 "|" + "|".join("---" for _ in MD_COLUMNS) + "|"]
        for r in self.rows:
            if r.status == OK:
                cells = [f"{r.memory_gb:.2f}", f"{r.throughput:.0f}", f"{r.mfu_pct:.2f}"]
            elif r.status == OOM:
                cells = [f"{r.memory_gb:.2f}", OOM, OOM]
            else:
                cells = ["-", INVALID, INVALID]
            lines.append("| " + " | ".join([r.method, str(r.seqlen)] + cells) + " |")
        notes = [f"- {r.method} @ {r.seqlen}: {'; '.join(r.violations)}"
                 for r in self.rows if r.status == INVALID]
        if notes:
            lines += ["", "Invalid plans:"] + notes
        return "\n".join(lines) + "\n"

    def render(self, fmt: str) -> str:
        return {"json": self.to_json, "csv": self.to_csv, "md": self.to_markdown}[fmt]()


def _fmt(x, spec):
    return "" if x is None else format(x, spec)


@dataclass(frozen=True)
class Evaluation:
    memory: Optional[MemoryBreakdown]
    step: Optional[StepReport]
    violations: tuple[str, ...]
    status: str


def run_step(plan: ParallelPlan, model: ModelSpec, cluster: ClusterSpec, workload: WorkloadSpec,
             knobs: Knobs = DEFAULT_KNOBS) -> tuple[Timeline, StepReport]:
    graph = build_step_graph(plan, model, cluster, workload, knobs)
    timeline = simulate(graph, plan, cluster, knobs, representative_devices(graph, cluster))
    return timeline, report(timeline, plan, model, cluster, workload)


def evaluate(plan: ParallelPlan, model: ModelSpec, cluster: ClusterSpec, workload: WorkloadSpec,
             knobs: Knobs = DEFAULT_KNOBS) -> Evaluation:
    """Validate, estimate memory, and simulate only if the plan fits."""
    bad = validate(plan, cluster, model, workload)
    if bad:
        return Evaluation(None, None, tuple(str(v) for v in bad), INVALID)
    mem = estimate(plan, model, cluster, workload, knobs)
    if not fits(mem, cluster.gpu):
        return Evaluation(mem, None, (), OOM)
    _, step = run_step(plan, model, cluster, workload, knobs)
    return Evaluation(mem, step, (), OK)


def _evaluate_args(args):
    return evaluate(*args)


def candidate_plans(cluster: ClusterSpec, model: ModelSpec, workload: WorkloadSpec,
                    limits: PlanLimits) -> list[ParallelPlan]:
    """Every combination of the limits, valid or not, ordered by plan key."""
    world = cluster.world_size
    mbs = limits.micro_batch or (workload.micro_batch,)
    out = []
    for sp, ep, dpr, m in product(sorted(set(limits.sp)), sorted(set(limits.ep)),
                                  sorted(set(limits.dp_replicate)), sorted(set(mbs))):
        dp_shard = max(world // max(sp * dpr, 1), 1)
        out.append(replace(limits.template, dp_replicate=dpr, dp_shard=dp_shard, sp=sp, ep=ep,
                           micro_batch=m))
    return sorted(out, key=lambda p: p.key)


def sweep(cluster: ClusterSpec, model: ModelSpec, workload: WorkloadSpec,
          limits: PlanLimits = PlanLimits(), seqlens: Optional[Sequence[int]] = None,
          knobs: Knobs = DEFAULT_KNOBS, jobs: int = 1, metadata: Optional[dict] = None,
          stamp: bool = False) -> RecipeReport:
    seqlens = sorted(set(seqlens)) if seqlens else [workload.seq_len]
    tasks = []
    for s in seqlens:
        w = workload.with_seq_len(s)
        for plan in candidate_plans(cluster, model, w, limits):
            tasks.append((plan, model, cluster, w, knobs))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_evaluate_args, tasks))   # map keeps submission order
    else:
        results = [_evaluate_args(t) for t in tasks]

    rows = [ReportRow(t[0].label, t[3].seq_len, t[0], ev.status, ev.memory, ev.step,
                      ev.violations) for t, ev in zip(tasks, results)]
    for s in seqlens:
        ok = [r for r in rows if r.seqlen == s and r.status == OK]
        for i, r in enumerate(sorted(ok, key=lambda r: (-r.throughput, r.plan.key))):
            r.rank = i + 1
    meta = dict(metadata or {})
    meta.update({"tool_version": __version__, "world_size": cluster.world_size,
                 "knobs": knobs.to_dict(), "seqlens": seqlens,
                 "flops_per_token": {str(s): flops_per_token(model, s, workload.modality_mix)
                                     for s in seqlens}})
    if stamp:
        meta["generated_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return RecipeReport(rows, meta)


def parse_markdown_table(text: str) -> list[dict]:
    """Read back the table emitted by :meth:`RecipeReport.to_markdown`."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip().startswith("|")]
    if len(lines) < 2:
        return []
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    rows = []
    for ln in lines[2:]:
        cells = [c.strip() for c in ln.strip("|").split("|")]
        rows.append(dict(zip(header, cells)))
    return rows
