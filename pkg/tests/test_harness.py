from __future__ import annotations

import json
from collections import Counter
from decimal import Decimal

import pytest

from tandem.harness import (
    SuiteLoadError,
    SuiteReport,
    TaskRun,
    aggregate,
    load_manifest,
    load_report,
    load_suite,
    load_task_file,
    overall_rate,
    render_report,
    replay_transcript,
    resolve_search_provider,
    run_single,
    run_suite,
    success_rate,
)
from tandem.orchestrator import TaskOutcome, Termination
from tandem.protocol import Budgets, Difficulty
from tandem.transcript import read_transcript

from conftest import DATA, make_task, scenario_backend, scenario_task

# ---------------------------------------------------------------------
# Metric arithmetic
# ---------------------------------------------------------------------


def test_success_rate_basics():
    assert success_rate(12, 100) == Decimal("12.0")
    assert success_rate(0, 30) == Decimal("0.0")
    assert success_rate(30, 30) == Decimal("100.0")


def test_success_rate_rounds_half_up():
    assert success_rate(1, 16) == Decimal("6.3")  # 6.25 rounds up
    assert success_rate(1, 3) == Decimal("33.3")
    assert success_rate(2, 3) == Decimal("66.7")
    assert success_rate(1, 8) == Decimal("12.5")


def test_success_rate_rejects_bad_counts():
    with pytest.raises(ValueError):
        success_rate(1, 0)
    with pytest.raises(ValueError):
        success_rate(-1, 10)
    with pytest.raises(ValueError):
        success_rate(11, 10)


def test_overall_rate_equal_groups_is_mean_of_rates():
    counts = {"a": (12, 100), "b": (11, 100), "c": (9, 100), "d": (7, 100), "e": (8, 100)}
    assert overall_rate(counts) == Decimal("9.4")


def test_overall_rate_second_benchmark_row():
    counts = {"a": (22, 100), "b": (14, 100), "c": (12, 100), "d": (9, 100), "e": (12, 100)}
    assert overall_rate(counts) == Decimal("13.8")


def test_overall_rate_means_rounded_group_rates():
    # per-group rounding happens first: (16.7 + 0.0) / 2 = 8.35 -> 8.4,
    # while the pooled rate over the same runs would be 1/12 -> 8.3
    assert overall_rate({"a": (1, 6), "b": (0, 6)}) == Decimal("8.4")


def test_overall_rate_pools_unequal_groups():
    assert overall_rate({"a": (1, 2), "b": (0, 8)}) == Decimal("10.0")
    assert overall_rate({"a": (1, 6), "b": (0, 7)}) == Decimal("7.7")


def test_overall_rate_rejects_empty():
    with pytest.raises(ValueError):
        overall_rate({})


# ---------------------------------------------------------------------
# aggregate / SuiteReport
# ---------------------------------------------------------------------


def fake_run(task_id, category, difficulty, success) -> TaskRun:
    task = make_task(
        id=task_id, site_category=category, difficulty=Difficulty(difficulty)
    )
    outcome = TaskOutcome(
        task_id=task_id,
        success=success,
        final_answer="a",
        termination=Termination.COMPLETED,
        exchanges_used=6,
        plan_versions=1,
    )
    return TaskRun(task=task, outcome=outcome, transcript_path=f"/tmp/{task_id}.jsonl")


def test_aggregate_groups_by_category_and_difficulty():
    runs = [
        fake_run("t1", "shopping", "Easy", True),
        fake_run("t2", "shopping", "Medium", False),
        fake_run("t3", "cms", "Easy", True),
        fake_run("t4", "cms", "Hard", False),
    ]
    report = aggregate(runs)
    assert report.n_tasks == 4
    assert report.n_success == 2
    assert report.per_category["shopping"] == Decimal("50.0")
    assert report.per_category["cms"] == Decimal("50.0")
    assert report.per_difficulty["Easy"] == Decimal("100.0")
    assert report.per_difficulty["Hard"] == Decimal("0.0")
    assert report.overall == Decimal("50.0")


def test_suite_report_to_dict_round_trips_through_json(tmp_path):
    report = aggregate([fake_run("t1", "shopping", "Easy", True)])
    raw = report.to_dict()
    assert raw["format"] == "tandem-report"
    assert raw["version"] == 1
    assert raw["overall_sr"] == 100.0
    assert raw["categories"] == {"shopping": 100.0}
    assert raw["difficulties"] == {"Easy": 100.0}
    row = raw["tasks"][0]
    assert row["task_id"] == "t1"
    assert row["site_category"] == "shopping"
    assert row["difficulty"] == "Easy"
    assert row["transcript"] == "/tmp/t1.jsonl"
    path = tmp_path / "report.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    assert load_report(path)["overall_sr"] == 100.0


def test_load_report_rejects_wrong_format(tmp_path):
    path = tmp_path / "r.json"
    path.write_text('{"format": "other"}', encoding="utf-8")
    with pytest.raises(SuiteLoadError):
        load_report(path)


def test_render_report_mentions_groups_and_overall():
    report = aggregate(
        [fake_run("t1", "shopping", "Easy", True), fake_run("t2", "cms", "Hard", False)]
    )
    text = render_report(report)
    assert "success rate by site category" in text
    assert "shopping" in text
    assert "Hard" in text
    assert "overall" in text
    assert "50.0" in text
    assert "terminations: completed=2" in text


# ---------------------------------------------------------------------
# Task and manifest loading
# ---------------------------------------------------------------------


def test_load_task_file_full_round_trip(tmp_path):
    path = tmp_path / "task.yaml"
    path.write_text(
        """\
format: tandem-task
id: demo-1
objective: Find the cheapest pair of shoes.
env_fixture: shop
site_category: shopping
difficulty: EASY
evaluator:
  kind: must_include
  expected: ["19.99"]
""",
        encoding="utf-8",
    )
    task = load_task_file(path)
    assert task.id == "demo-1"
    assert task.difficulty is Difficulty.EASY
    assert task.evaluator.kind == "must_include"
    assert task.evaluator.expected == ("19.99",)


def test_load_task_file_rejects_unknown_difficulty(tmp_path):
    path = tmp_path / "task.yaml"
    path.write_text(
        "format: tandem-task\nid: x\nobjective: y\nenv_fixture: shop\n"
        "difficulty: brutal\nevaluator: {kind: must_include, expected: [a]}\n",
        encoding="utf-8",
    )
    with pytest.raises(SuiteLoadError):
        load_task_file(path)


def test_load_task_file_rejects_wrong_format(tmp_path):
    path = tmp_path / "task.yaml"
    path.write_text("format: nope\nid: x\n", encoding="utf-8")
    with pytest.raises(SuiteLoadError):
        load_task_file(path)


def test_load_manifest_resolves_relative_paths(tmp_path):
    (tmp_path / "tasks").mkdir()
    (tmp_path / "tasks" / "a.yaml").write_text(
        "format: tandem-task\nid: a\nobjective: o\nenv_fixture: shop\n"
        "evaluator: {kind: must_include, expected: [x]}\n",
        encoding="utf-8",
    )
    manifest = tmp_path / "suite.yaml"
    manifest.write_text(
        "format: tandem-suite\nname: mini\ntasks:\n  - tasks/a.yaml\n", encoding="utf-8"
    )
    tasks = load_manifest(manifest)
    assert [t.id for t in tasks] == ["a"]


def test_load_manifest_rejects_duplicate_ids(tmp_path):
    (tmp_path / "a.yaml").write_text(
        "format: tandem-task\nid: same\nobjective: o\nenv_fixture: shop\n"
        "evaluator: {kind: must_include, expected: [x]}\n",
        encoding="utf-8",
    )
    manifest = tmp_path / "suite.yaml"
    manifest.write_text(
        "format: tandem-suite\nname: dup\ntasks:\n  - a.yaml\n  - a.yaml\n",
        encoding="utf-8",
    )
    with pytest.raises(SuiteLoadError):
        load_manifest(manifest)


def test_load_manifest_rejects_missing_file(tmp_path):
    manifest = tmp_path / "suite.yaml"
    manifest.write_text(
        "format: tandem-suite\nname: ghost\ntasks:\n  - nowhere.yaml\n", encoding="utf-8"
    )
    with pytest.raises((SuiteLoadError, FileNotFoundError)):
        load_manifest(manifest)


def test_bundled_suite_has_the_advertised_shape():
    tasks = load_suite("bundled")
    assert len(tasks) == 30
    histogram = Counter(t.difficulty for t in tasks)
    # 30 / 50 / 20 percent of 30 tasks
    assert histogram[Difficulty.EASY] == 9
    assert histogram[Difficulty.MEDIUM] == 15
    assert histogram[Difficulty.HARD] == 6
    assert len({t.id for t in tasks}) == 30
    assert {t.env_fixture for t in tasks} <= {"shop", "cms", "gitlab"}


def test_demo_suite_lists_the_five_scenarios_plus_one():
    tasks = load_suite("demo")
    assert len(tasks) == 6
    ids = {t.id for t in tasks}
    assert {"scn-happy", "scn-revise", "scn-replan", "scn-overrule"} <= ids


def test_load_suite_rejects_unknown_name():
    with pytest.raises(SuiteLoadError):
        load_suite("not-a-suite")


# ---------------------------------------------------------------------
# Search provider resolution
# ---------------------------------------------------------------------


def test_resolve_search_provider():
    assert resolve_search_provider(None) is None
    assert resolve_search_provider("") is None
    bundled = resolve_search_provider("bundled")
    assert bundled is not None
    assert bundled.search("how many electronics products are there")
    from_path = resolve_search_provider(str(DATA / "search" / "passages.yaml"))
    assert from_path is not None


# ---------------------------------------------------------------------
# run_single / run_suite
# ---------------------------------------------------------------------


def test_run_single_writes_a_replayable_transcript(tmp_path):
    task = scenario_task("scn-happy")
    run = run_single(
        task,
        scenario_backend("scn-happy"),
        Budgets(),
        out_dir=tmp_path,
        backend_label="scripted",
    )
    assert run.outcome.success
    assert run.outcome.exchanges_used == 6
    assert run.transcript_path is not None
    header, events, warnings = read_transcript(run.transcript_path)
    assert warnings == []
    assert header["task"]["id"] == "scn-happy"
    assert header["budgets"]["max_exchanges"] == 30
    assert header["backend"] == "scripted"
    assert header["temperature"] == 1.0
    assert header["augment_search"] is False
    assert events[-1].kind.value == "TaskResult"


def test_run_single_survives_crashing_backend(tmp_path):
    class Boom:
        def complete(self, request):
            raise RuntimeError("wild failure")

    run = run_single(scenario_task("scn-happy"), Boom(), Budgets(), out_dir=tmp_path)
    assert not run.outcome.success
    assert run.outcome.termination is Termination.PROTOCOL_ERROR
    assert "RuntimeError" in run.outcome.detail


def demo_tasks_and_factory():
    tasks = load_suite("demo")
    return tasks, lambda task: scenario_backend(task.id)


def test_run_suite_serial(tmp_path):
    tasks, factory = demo_tasks_and_factory()
    report = run_suite(tasks, factory, Budgets(), out_dir=tmp_path)
    assert report.n_tasks == 6
    assert report.n_success == 6
    assert (tmp_path / "report.json").exists()
    assert (tmp_path / "report.txt").exists()
    raw = load_report(tmp_path / "report.json")
    assert raw["n_tasks"] == 6
    assert len(raw["tasks"]) == 6


def test_run_suite_parallel_matches_serial(tmp_path):
    tasks, factory = demo_tasks_and_factory()
    serial = run_suite(tasks, factory, Budgets(), out_dir=tmp_path / "serial")
    parallel = run_suite(
        tasks, factory, Budgets(), out_dir=tmp_path / "parallel", parallel=4
    )
    serial_rows = [r.outcome.to_dict() for r in serial.runs]
    parallel_rows = [r.outcome.to_dict() for r in parallel.runs]
    assert serial_rows == parallel_rows
    assert serial.overall == parallel.overall


# ---------------------------------------------------------------------
# Replay fidelity
# ---------------------------------------------------------------------


def fresh_transcript(tmp_path, task_id="scn-happy"):
    run = run_single(
        scenario_task(task_id), scenario_backend(task_id), Budgets(), out_dir=tmp_path
    )
    return run.transcript_path


def test_replay_reproduces_a_recording(tmp_path):
    path = fresh_transcript(tmp_path)
    result = replay_transcript(path)
    assert result.ok, result.message
    assert result.outcome is not None
    assert result.outcome.success


def test_replay_detects_a_tampered_response(tmp_path):
    path = fresh_transcript(tmp_path)
    raw_lines = open(path, encoding="utf-8").read().splitlines()
    for i, line in enumerate(raw_lines[1:], start=1):
        record = json.loads(line)
        if record["kind"] == "LlmCall" and "click" in record["payload"]["response"]:
            record["payload"]["response"] = record["payload"]["response"].replace(
                "click [9]", "click [8]"
            )
            raw_lines[i] = json.dumps(record)
            break
    tampered = tmp_path / "tampered.jsonl"
    tampered.write_text("\n".join(raw_lines) + "\n", encoding="utf-8")
    result = replay_transcript(tampered)
    assert not result.ok
    assert result.divergence_seq is not None


def test_replay_rejects_a_headerless_file(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"format": "tandem-transcript", "version": 1}\n', encoding="utf-8"
    )
    result = replay_transcript(path)
    assert not result.ok
    assert "header" in result.message
