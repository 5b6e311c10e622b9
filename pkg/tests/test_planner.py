from __future__ import annotations

import pytest

from tandem.backend import (
    BackendExhausted,
    ChatMessage,
    ChatRequest,
    ProviderError,
    RetrievedPassage,
    ScriptedBackend,
    ScriptedExchange,
    StaticSearchProvider,
    TransportError,
)
from tandem.grammar import DecisionParseError, PlanParseError
from tandem.planner import GlobalPlanner, MissingContextField, PlannerContext
from tandem.protocol import (
    ExecutionReport,
    ExecutionStep,
    GlobalPlan,
    ReplanRequest,
    StepOutcome,
)
from tandem.transcript import RunRecorder

from conftest import action, make_obs, make_phase, make_task

PLAN_TEXT = (
    "Phase 1: Open the kitchen category | Expected: kitchen listing visible\n"
    "Phase 2: Read the kettle price and stop | Expected: price reported"
)
NEW_PLAN_TEXT = (
    "Phase 1: Search for the kettle directly | Expected: search results visible\n"
    "Phase 2: Open the kettle page and stop | Expected: price reported"
)


def make_ctx(**overrides) -> PlannerContext:
    base = dict(task=make_task(), observation=make_obs(), previous_plan=None, passages=())
    base.update(overrides)
    return PlannerContext(**base)


def make_plan(version: int = 1) -> GlobalPlan:
    return GlobalPlan(phases=(make_phase(1), make_phase(2)), plan_version=version)


def make_report(raised: bool = False) -> ExecutionReport:
    steps = (ExecutionStep(action=action("click", target=3), outcome=StepOutcome(ok=not raised, error="" if not raised else "unknown node id")),)
    return ExecutionReport(steps=steps, final_observation=make_obs(), raised_exception=raised)


def planner_with(script: list[tuple[str, str]], **kwargs) -> GlobalPlanner:
    backend = ScriptedBackend([ScriptedExchange(m, r) for m, r in script])
    return GlobalPlanner(backend, **kwargs)


# ---------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------


def test_plan_prompt_carries_objective_and_observation():
    planner = planner_with([])
    ctx = make_ctx()
    text = planner.render_prompt("plan", ctx)
    assert "Construct the global plan" in text
    assert "OBJECTIVE: " + ctx.task.objective in text
    assert "[1] heading 'Shop Home'" in text
    assert "Background passages" not in text


def test_plan_prompt_inserts_passages_between_meta_and_context():
    provider = StaticSearchProvider([("kettle", "kettles pour water", "guide")])
    planner = planner_with([], search_provider=provider, augment_search=True)
    passages = planner.fetch_passages("where is the kettle")
    text = planner.render_prompt("plan", make_ctx(passages=passages))
    meta_at = text.index("Construct the global plan")
    passages_at = text.index("Background passages gathered")
    context_at = text.index("OBSERVATION:")
    assert meta_at < passages_at < context_at
    assert "kettles pour water (source: guide)" in text


def test_decide_prompt_requires_reasons_and_plan():
    planner = planner_with([])
    with pytest.raises(MissingContextField):
        planner.render_prompt("decide", make_ctx(previous_plan=make_plan()), reasons="  ")
    with pytest.raises(MissingContextField):
        planner.render_prompt("decide", make_ctx(), reasons="page is wrong")
    text = planner.render_prompt(
        "decide", make_ctx(previous_plan=make_plan()), reasons="page is wrong", phase_index=2
    )
    assert "Judge whether the fault lies" in text
    assert "page is wrong" in text
    assert "phase 2" in text
    assert "Background passages" not in text


def test_revise_prompt_quotes_the_previous_plan():
    planner = planner_with([])
    text = planner.render_prompt(
        "revise", make_ctx(previous_plan=make_plan()), reasons="dead link", phase_index=1
    )
    assert "You accepted the replan request" in text
    assert "Open the kitchen category" in text  # old plan is quoted verbatim


def test_revise_prompt_can_carry_passages():
    planner = planner_with([])
    passages_ctx = make_ctx(
        previous_plan=make_plan(),
        passages=(RetrievedPassage(query="q", passage="useful fact", source="doc"),),
    )
    text = planner.render_prompt("revise", passages_ctx, reasons="stuck", phase_index=1)
    assert "You accepted the replan request" in text
    assert "useful fact" in text


def test_collate_prompt_requires_report():
    planner = planner_with([])
    with pytest.raises(MissingContextField):
        planner.render_prompt("collate", make_ctx())
    text = planner.render_prompt("collate", make_ctx(), report=make_report())
    assert "Produce the final answer" in text
    assert "click [3]" in text  # the report's steps are quoted


def test_unknown_prompt_action_rejected():
    planner = planner_with([])
    # an action with no prompt file at all
    with pytest.raises(KeyError):
        planner.render_prompt("negotiate", make_ctx())
    # a prompt key that exists but is not a planner operation
    with pytest.raises(MissingContextField):
        planner.render_prompt("intro", make_ctx())


# ---------------------------------------------------------------------
# Passage fetching
# ---------------------------------------------------------------------


def test_fetch_passages_disabled_by_default():
    provider = StaticSearchProvider([("kettle", "text", "")])
    planner = planner_with([], search_provider=provider)
    assert planner.fetch_passages("kettle question") == ()


def test_fetch_passages_requires_provider():
    planner = planner_with([], augment_search=True)
    assert planner.fetch_passages("kettle question") == ()


class _FailingProvider:
    def search(self, query: str):
        raise ProviderError("index offline")


def test_fetch_passages_swallows_provider_errors():
    planner = planner_with([], search_provider=_FailingProvider(), augment_search=True)
    assert planner.fetch_passages("anything") == ()


# ---------------------------------------------------------------------
# make_global_plan
# ---------------------------------------------------------------------


def test_make_global_plan_happy_path():
    planner = planner_with([("Construct the global plan", PLAN_TEXT)])
    recorder = RunRecorder()
    plan = planner.make_global_plan(make_ctx(), recorder)
    assert plan.plan_version == 1
    assert [p.index for p in plan.phases] == [1, 2]
    assert plan.phases[0].subtask == "Open the kitchen category"
    assert recorder.exchanges == 1


def test_make_global_plan_repairs_once():
    planner = planner_with(
        [
            ("Construct the global plan", "sorry, no plan here"),
            ("Construct the global plan", PLAN_TEXT),
        ]
    )
    recorder = RunRecorder()
    plan = planner.make_global_plan(make_ctx(), recorder)
    assert plan.plan_version == 1
    assert recorder.exchanges == 2


def test_make_global_plan_fails_after_one_repair():
    planner = planner_with(
        [
            ("Construct the global plan", "garbage"),
            ("Construct the global plan", "more garbage"),
        ]
    )
    recorder = RunRecorder()
    with pytest.raises(PlanParseError):
        planner.make_global_plan(make_ctx(), recorder)
    assert recorder.exchanges == 2


def test_make_global_plan_rejects_existing_plan():
    planner = planner_with([])
    with pytest.raises(MissingContextField):
        planner.make_global_plan(make_ctx(previous_plan=make_plan()), RunRecorder())


# ---------------------------------------------------------------------
# decide_replan
# ---------------------------------------------------------------------


def make_request_obj() -> ReplanRequest:
    return ReplanRequest(phase_index=1, reasons="the category link is missing", report=make_report(raised=True))


def test_decide_overrule_single_call():
    planner = planner_with(
        [("Judge whether the fault lies", "```overrule```\nScroll down before giving up.")]
    )
    recorder = RunRecorder()
    decision = planner.decide_replan(
        make_request_obj(), make_plan(), make_ctx(previous_plan=make_plan()), recorder
    )
    assert decision.ruling == "overrule"
    assert "Scroll down" in decision.guidance
    assert decision.new_plan is None
    assert recorder.exchanges == 1


def test_decide_revise_costs_a_second_call():
    planner = planner_with(
        [
            ("Judge whether the fault lies", "```revise```\nThe plan assumed a dead link."),
            ("You accepted the replan request", NEW_PLAN_TEXT),
        ]
    )
    recorder = RunRecorder()
    old = make_plan(version=1)
    decision = planner.decide_replan(
        make_request_obj(), old, make_ctx(previous_plan=old), recorder
    )
    assert decision.ruling == "revise"
    assert decision.new_plan is not None
    assert decision.new_plan.plan_version == 2
    assert decision.new_plan.phases[0].subtask == "Search for the kettle directly"
    assert recorder.exchanges == 2


def test_decide_repairs_unparseable_ruling():
    planner = planner_with(
        [
            ("Judge whether the fault lies", "hmm, tough call"),
            ("Judge whether the fault lies", "```overrule```\nKeep going, scroll down."),
        ]
    )
    recorder = RunRecorder()
    decision = planner.decide_replan(
        make_request_obj(), make_plan(), make_ctx(previous_plan=make_plan()), recorder
    )
    assert decision.ruling == "overrule"
    assert recorder.exchanges == 2


def test_overrule_without_guidance_is_a_parse_error():
    planner = planner_with(
        [
            ("Judge whether the fault lies", "```overrule```"),
            ("Judge whether the fault lies", "```overrule```"),
        ]
    )
    with pytest.raises(DecisionParseError):
        planner.decide_replan(
            make_request_obj(), make_plan(), make_ctx(previous_plan=make_plan()), RunRecorder()
        )


def test_decide_requires_plan_in_context():
    planner = planner_with([])
    with pytest.raises(MissingContextField):
        planner.decide_replan(make_request_obj(), make_plan(), make_ctx(), RunRecorder())


def test_revise_plan_repairs_once():
    planner = planner_with(
        [
            ("You accepted the replan request", "no plan, sorry"),
            ("You accepted the replan request", NEW_PLAN_TEXT),
        ]
    )
    recorder = RunRecorder()
    plan = planner.revise_plan(
        make_request_obj(), make_plan(version=3), make_ctx(previous_plan=make_plan(3)), recorder
    )
    assert plan.plan_version == 4
    assert recorder.exchanges == 2


# ---------------------------------------------------------------------
# collate
# ---------------------------------------------------------------------


def test_collate_returns_stripped_answer():
    planner = planner_with([("Produce the final answer", "  $34.50  ")])
    answer = planner.collate(make_report(), make_plan(), make_ctx(), RunRecorder())
    assert answer == "$34.50"


def test_collate_blank_answer_falls_back_to_stop_answer():
    planner = planner_with([("Produce the final answer", "   ")])
    answer = planner.collate(
        make_report(), make_plan(), make_ctx(), RunRecorder(), stop_answer="kettle is $34.50"
    )
    assert answer == "kettle is $34.50"


class _DeadBackend:
    def complete(self, request):
        raise TransportError("connection refused")


def test_collate_survives_transport_failure():
    planner = GlobalPlanner(_DeadBackend())
    answer = planner.collate(
        make_report(), make_plan(), make_ctx(), RunRecorder(), stop_answer="fallback"
    )
    assert answer == "fallback"


def test_collate_survives_backend_exhaustion():
    planner = planner_with([])  # empty script: the collate call raises BackendExhausted
    probe = ChatRequest(system_prompt="s", messages=(ChatMessage("user", "x"),))
    with pytest.raises(BackendExhausted):
        planner.backend.complete(probe)
    answer = planner.collate(make_report(), make_plan(), make_ctx(), RunRecorder())
    assert answer == ""
