"""Batch evaluation: task files, suite manifests, aggregation, replay.

Success rates follow the convention 100 * n_success / n_tasks rounded
half-up to one decimal.  The overall rate over categories of equal size
is the unweighted mean of the per-category rates; with unequal sizes it
is the pooled task-weighted rate.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib.resources import as_file, files
from pathlib import Path
from typing import Callable, Mapping, Sequence

import yaml

from .backend import ChatBackend, SearchProvider, StaticSearchProvider
from .executor import LocalExecutor
from .orchestrator import TaskOutcome, Termination, run_task
from .planner import GlobalPlanner
from .prompts import PromptLibrary
from .protocol import Budgets, Difficulty, EvaluatorSpec, Task
from .transcript import (
    ReplayBackend,
    ReplayDivergence,
    RunRecorder,
    first_divergence,
    read_transcript,
    write_transcript,
)
from .webenv import WebEnv, load_fixture

logger = logging.getLogger(__name__)

TASK_FORMAT = "tandem-task"
SUITE_FORMAT = "tandem-suite"
REPORT_FORMAT = "tandem-report"

__all__ = [
    "ReplayResult",
    "SuiteReport",
    "TaskRun",
    "aggregate",
    "load_manifest",
    "load_suite",
    "load_task_file",
    "overall_rate",
    "render_report",
    "replay_transcript",
    "resolve_search_provider",
    "run_suite",
    "run_single",
    "success_rate",
]


# =====================================================================
# Metric arithmetic
# =====================================================================


def success_rate(n_success: int, n_tasks: int) -> Decimal:
    """100 * n_success / n_tasks, rounded half-up to one decimal."""
    if n_tasks <= 0:
        raise ValueError("success_rate needs at least one task")
    if not 0 <= n_success <= n_tasks:
        raise ValueError("n_success out of range")
    rate = Decimal(100) * Decimal(n_success) / Decimal(n_tasks)
    return rate.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


def overall_rate(counts: Mapping[str, tuple[int, int]]) -> Decimal:
    """Aggregate per-group (n_success, n_tasks) counts into one rate.

    Equal group sizes: unweighted mean of the per-group rates.  Unequal
    sizes: pooled rate over all tasks.
    """
    if not counts:
        raise ValueError("overall_rate needs at least one group")
    sizes = {n for _, n in counts.values()}
    if len(sizes) == 1:
        rates = [success_rate(s, n) for s, n in counts.values()]
        mean = sum(rates, Decimal(0)) / Decimal(len(rates))
        return mean.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    total_success = sum(s for s, _ in counts.values())
    total_tasks = sum(n for _, n in counts.values())
    return success_rate(total_success, total_tasks)


# =====================================================================
# Task and suite files
# =====================================================================


class SuiteLoadError(ValueError):
    pass


def load_task_file(path: str | Path) -> Task:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise SuiteLoadError(f"{path}: bad yaml: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("format") != TASK_FORMAT:
        raise SuiteLoadError(f"{path}: expected format {TASK_FORMAT!r}")
    try:
        ev = raw["evaluator"]
        spec = EvaluatorSpec(kind=ev["kind"], expected=tuple(str(x) for x in ev["expected"]))
        wanted = str(raw.get("difficulty", "unlabeled")).casefold()
        by_name = {d.value.casefold(): d for d in Difficulty}
        if wanted not in by_name:
            raise SuiteLoadError(f"{path}: unknown difficulty {wanted!r}")
        difficulty = by_name[wanted]
        return Task(
            id=str(raw["id"]),
            objective=str(raw["objective"]),
            env_fixture=str(raw["env_fixture"]),
            evaluator=spec,
            difficulty=difficulty,
            site_category=str(raw.get("site_category", "")),
            task_class=str(raw.get("task_class", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SuiteLoadError(f"{path}: {exc}") from exc


def load_manifest(path: str | Path) -> list[Task]:
    """Load a suite manifest; task paths resolve relative to it."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise SuiteLoadError(f"{path}: bad yaml: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("format") != SUITE_FORMAT:
        raise SuiteLoadError(f"{path}: expected format {SUITE_FORMAT!r}")
    entries = raw.get("tasks")
    if not isinstance(entries, list) or not entries:
        raise SuiteLoadError(f"{path}: manifest lists no tasks")
    tasks = [load_task_file((path.parent / str(entry)).resolve()) for entry in entries]
    seen: set[str] = set()
    for task in tasks:
        if task.id in seen:
            raise SuiteLoadError(f"{path}: duplicate task id {task.id!r}")
        seen.add(task.id)
    return tasks


_BUNDLED_SUITES = {"bundled": "bundled.yaml", "demo": "demo.yaml"}


def load_suite(name_or_path: str | Path) -> list[Task]:
    name = str(name_or_path)
    if name in _BUNDLED_SUITES:
        resource = files("tandem") / "data" / "suites" / _BUNDLED_SUITES[name]
        with as_file(resource) as concrete:
            return load_manifest(concrete)
    path = Path(name_or_path)
    if not path.exists():
        raise SuiteLoadError(f"no bundled suite or manifest file named {name!r}")
    return load_manifest(path)


def resolve_search_provider(spec: str | None) -> StaticSearchProvider | None:
    """Map a provider spec to a search provider.

    None or "" means no provider; "bundled" loads the packaged passage
    file; anything else is a filesystem path to a passage file.
    """
    if not spec:
        return None
    if spec == "bundled":
        resource = files("tandem") / "data" / "search" / "passages.yaml"
        with as_file(resource) as concrete:
            return StaticSearchProvider.from_file(concrete)
    return StaticSearchProvider.from_file(spec)


# =====================================================================
# Suite running
# =====================================================================


@dataclass(frozen=True)
class TaskRun:
    task: Task
    outcome: TaskOutcome
    transcript_path: str = ""


@dataclass
class SuiteReport:
    runs: list[TaskRun]
    per_category: dict[str, Decimal] = field(default_factory=dict)
    per_difficulty: dict[str, Decimal] = field(default_factory=dict)
    overall: Decimal = Decimal("0.0")
    n_tasks: int = 0
    n_success: int = 0

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": 1,
            "n_tasks": self.n_tasks,
            "n_success": self.n_success,
            "overall_sr": float(self.overall),
            "categories": {k: float(v) for k, v in sorted(self.per_category.items())},
            "difficulties": {k: float(v) for k, v in sorted(self.per_difficulty.items())},
            "tasks": [
                {
                    **run.outcome.to_dict(),
                    "site_category": run.task.site_category,
                    "difficulty": run.task.difficulty.value,
                    "transcript": run.transcript_path,
                }
                for run in self.runs
            ],
        }


def _group_counts(runs: Sequence[TaskRun], key: Callable[[TaskRun], str]) -> dict[str, tuple[int, int]]:
    counts: dict[str, tuple[int, int]] = {}
    for run in runs:
        k = key(run)
        s, n = counts.get(k, (0, 0))
        counts[k] = (s + (1 if run.outcome.success else 0), n + 1)
    return counts


def aggregate(runs: Sequence[TaskRun]) -> SuiteReport:
    if not runs:
        raise ValueError("aggregate needs at least one run")
    by_cat = _group_counts(runs, lambda r: r.task.site_category or "uncategorized")
    by_diff = _group_counts(runs, lambda r: r.task.difficulty.value)
    return SuiteReport(
        runs=list(runs),
        per_category={k: success_rate(s, n) for k, (s, n) in by_cat.items()},
        per_difficulty={k: success_rate(s, n) for k, (s, n) in by_diff.items()},
        overall=overall_rate(by_cat),
        n_tasks=len(runs),
        n_success=sum(1 for r in runs if r.outcome.success),
    )


def run_single(
    task: Task,
    backend: ChatBackend,
    budgets: Budgets,
    *,
    library: PromptLibrary | None = None,
    temperature: float = 1.0,
    augment_search: bool = False,
    search_provider: SearchProvider | None = None,
    out_dir: str | Path | None = None,
    backend_label: str = "",
) -> TaskRun:
    """Run one task with its own environment and recorder."""
    env = WebEnv(load_fixture(task.env_fixture))
    cap = budgets.max_exchanges if budgets.force_stop_enabled else None
    recorder = RunRecorder(exchange_cap=cap)
    planner = GlobalPlanner(
        backend,
        library=library,
        temperature=temperature,
        search_provider=search_provider,
        augment_search=augment_search,
    )
    executor = LocalExecutor(backend, library=library, temperature=temperature)
    try:
        outcome = run_task(task, planner, executor, env, budgets, recorder)
    except Exception as exc:  # harness must survive any single bad task
        logger.exception("task %s crashed outside the protocol", task.id)
        outcome = TaskOutcome(
            task_id=task.id,
            success=False,
            final_answer="",
            termination=Termination.PROTOCOL_ERROR,
            exchanges_used=recorder.exchanges,
            plan_versions=0,
            detail=f"harness: {type(exc).__name__}: {exc}",
        )
    transcript_path = ""
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dest = out / f"{task.id}.transcript.jsonl"
        header = {
            "task": task.to_dict(),
            "budgets": budgets.to_dict(),
            "backend": backend_label,
            "temperature": temperature,
            "augment_search": augment_search,
        }
        write_transcript(dest, header, recorder.events)
        transcript_path = str(dest)
    return TaskRun(task=task, outcome=outcome, transcript_path=transcript_path)


def run_suite(
    tasks: Sequence[Task],
    backend_factory: Callable[[Task], ChatBackend],
    budgets: Budgets,
    *,
    library: PromptLibrary | None = None,
    temperature: float = 1.0,
    augment_search: bool = False,
    search_provider: SearchProvider | None = None,
    out_dir: str | Path | None = None,
    parallel: int = 1,
    backend_label: str = "",
) -> SuiteReport:
    """Run every task and aggregate.  Results keep manifest order."""
    if not tasks:
        raise ValueError("run_suite needs at least one task")
    if parallel < 1:
        raise ValueError("parallel must be >= 1")

    def one(task: Task) -> TaskRun:
        return run_single(
            task,
            backend_factory(task),
            budgets,
            library=library,
            temperature=temperature,
            augment_search=augment_search,
            search_provider=search_provider,
            out_dir=out_dir,
            backend_label=backend_label,
        )

    if parallel == 1:
        runs = [one(task) for task in tasks]
    else:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            runs = list(pool.map(one, tasks))

    report = aggregate(runs)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        (out / "report.txt").write_text(render_report(report) + "\n", encoding="utf-8")
    return report


# =====================================================================
# Replay
# =====================================================================


@dataclass(frozen=True)
class ReplayResult:
    ok: bool
    message: str
    divergence_seq: int | None = None
    outcome: TaskOutcome | None = None


def replay_transcript(
    path: str | Path, *, library: PromptLibrary | None = None
) -> ReplayResult:
    """Re-run a recorded task against its own transcript.

    The recorded responses are served back in order while every prompt
    is byte-compared against the recording; afterwards the regenerated
    event stream is compared to the recorded one (timestamps and
    latencies excluded).
    """
    header, events, warnings = read_transcript(path)
    for w in warnings:
        logger.warning("replay %s: %s", path, w)
    try:
        task = Task.from_dict(header["task"])
        budgets = Budgets.from_dict(header["budgets"])
    except (KeyError, TypeError, ValueError) as exc:
        return ReplayResult(ok=False, message=f"bad transcript header: {exc}")

    backend = ReplayBackend(events)
    env = WebEnv(load_fixture(task.env_fixture))
    cap = budgets.max_exchanges if budgets.force_stop_enabled else None
    recorder = RunRecorder(exchange_cap=cap)
    augment = bool(header.get("augment_search", False))
    provider = resolve_search_provider("bundled") if augment else None
    planner = GlobalPlanner(
        backend,
        library=library,
        temperature=float(header.get("temperature", 1.0)),
        search_provider=provider,
        augment_search=augment,
    )
    executor = LocalExecutor(
        backend, library=library, temperature=float(header.get("temperature", 1.0))
    )
    try:
        outcome = run_task(task, planner, executor, env, budgets, recorder)
    except ReplayDivergence as exc:
        return ReplayResult(
            ok=False,
            message=f"prompt diverged from recording: {exc}",
            divergence_seq=exc.seq,
        )

    where = first_divergence(events, recorder.events)
    if where is None:
        return ReplayResult(ok=True, message="replay reproduced the recording", outcome=outcome)
    return ReplayResult(
        ok=False,
        message=f"event stream diverged at seq {where}",
        divergence_seq=where,
        outcome=outcome,
    )


# =====================================================================
# Report rendering
# =====================================================================


def _render_table(title: str, rows: dict[str, Decimal], counts: dict[str, tuple[int, int]]) -> list[str]:
    lines = [title, f"{'group':<24}{'tasks':>7}{'success':>9}{'SR%':>8}"]
    for name in sorted(rows):
        s, n = counts[name]
        lines.append(f"{name:<24}{n:>7}{s:>9}{str(rows[name]):>8}")
    return lines


def render_report(report: SuiteReport) -> str:
    by_cat = _group_counts(report.runs, lambda r: r.task.site_category or "uncategorized")
    by_diff = _group_counts(report.runs, lambda r: r.task.difficulty.value)
    lines: list[str] = []
    lines.extend(_render_table("success rate by site category", report.per_category, by_cat))
    lines.append("")
    lines.extend(_render_table("success rate by difficulty", report.per_difficulty, by_diff))
    lines.append("")
    lines.append(
        f"{'overall':<24}{report.n_tasks:>7}{report.n_success:>9}{str(report.overall):>8}"
    )
    terminations: dict[str, int] = {}
    for run in report.runs:
        key = run.outcome.termination.value
        terminations[key] = terminations.get(key, 0) + 1
    parts = ", ".join(f"{k}={v}" for k, v in sorted(terminations.items()))
    lines.append(f"terminations: {parts}")
    exchanges = sum(r.outcome.exchanges_used for r in report.runs)
    lines.append(f"total exchanges: {exchanges}")
    return "\n".join(lines)


def load_report(path: str | Path) -> dict:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("format") != REPORT_FORMAT:
        raise SuiteLoadError(f"{path}: expected format {REPORT_FORMAT!r}")
    return raw
