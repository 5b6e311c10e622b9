"""Shared protocol types for the two-agent runtime.

Every value that crosses a module boundary (tasks, observations, plans,
action sequences, reports, verdicts, decisions, budgets, transcript events)
is defined here as an immutable dataclass with a JSON-dict codec.  The
module deliberately contains no behavior beyond validation and
(de)serialization; agents, environment and orchestrator build on top.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any

__all__ = [
    "ActionKind",
    "ActionSequence",
    "Budgets",
    "Difficulty",
    "EvaluatorSpec",
    "EventKind",
    "ExecutionReport",
    "ExecutionStep",
    "GlobalDecision",
    "GlobalPlan",
    "LocalVerdict",
    "Observation",
    "PageAction",
    "PhaseSpec",
    "ReplanRequest",
    "StepOutcome",
    "Task",
    "TranscriptEvent",
    "ValidationResult",
    "VerdictDecision",
    "Violation",
    "decode_value",
    "encode_value",
    "validate",
]


# =====================================================================
# Enumerations
# =====================================================================


class Difficulty(str, Enum):
    EASY = "Easy"
    MEDIUM = "Medium"
    HARD = "Hard"
    UNLABELED = "Unlabeled"


class ActionKind(str, Enum):
    CLICK = "click"
    TYPE = "type"
    SCROLL = "scroll"
    GOTO = "goto"
    GO_BACK = "go_back"
    STOP = "stop"


class VerdictDecision(str, Enum):
    MOVE = "move"
    REVISE = "revise"
    REQUEST = "request"


class EventKind(str, Enum):
    LLM_CALL = "LlmCall"
    ENV_STEP = "EnvStep"
    PLAN_ISSUED = "PlanIssued"
    VERDICT_ISSUED = "VerdictIssued"
    REPLAN_REQUESTED = "ReplanRequested"
    DECISION_ISSUED = "DecisionIssued"
    FORCE_STOP = "ForceStop"
    TASK_RESULT = "TaskResult"


EVALUATOR_KINDS = ("exact_match", "must_include", "url_match")

# Directions accepted by scroll actions.
SCROLL_DIRECTIONS = ("up", "down")


def _tuple(seq: Any) -> tuple:
    # Normalizes list inputs so frozen dataclasses stay hashable/comparable.
    return tuple(seq) if not isinstance(seq, tuple) else seq


# =====================================================================
# Task and evaluation
# =====================================================================


@dataclass(frozen=True)
class EvaluatorSpec:
    """How a task's final answer / final env state is judged.

    kind is one of:
      exact_match   answer equals one of `expected` after whitespace/case
                    normalization
      must_include  every string in `expected` occurs in the answer,
                    case-insensitively
      url_match     final page URL equals one of `expected` modulo a
                    trailing slash
    """

    kind: str
    expected: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "expected", _tuple(self.expected))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "expected": list(self.expected)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluatorSpec":
        expected = d["expected"]
        if isinstance(expected, str):
            expected = [expected]
        return cls(kind=d["kind"], expected=tuple(expected))


@dataclass(frozen=True)
class Task:
    """One benchmark task: an objective against a named site fixture."""

    id: str
    objective: str
    env_fixture: str
    evaluator: EvaluatorSpec
    difficulty: Difficulty = Difficulty.UNLABELED
    site_category: str = ""
    # Free-form class label from the difficulty taxonomy shipped with the
    # bundled fixtures (e.g. "Order Management"); empty when unused.
    task_class: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "objective": self.objective,
            "env_fixture": self.env_fixture,
            "evaluator": self.evaluator.to_dict(),
            "difficulty": self.difficulty.value,
            "site_category": self.site_category,
            "task_class": self.task_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        return cls(
            id=d["id"],
            objective=d["objective"],
            env_fixture=d["env_fixture"],
            evaluator=EvaluatorSpec.from_dict(d["evaluator"]),
            difficulty=Difficulty(d.get("difficulty", "Unlabeled")),
            site_category=d.get("site_category", ""),
            task_class=d.get("task_class", ""),
        )


# =====================================================================
# Observations and page actions
# =====================================================================


@dataclass(frozen=True)
class Observation:
    """What an agent sees: rendered accessibility tree plus page context."""

    axtree: str
    url: str
    open_tabs: tuple[str, ...] = ()
    previous_action: str = "None"

    def __post_init__(self) -> None:
        object.__setattr__(self, "open_tabs", _tuple(self.open_tabs))

    def to_dict(self) -> dict:
        return {
            "axtree": self.axtree,
            "url": self.url,
            "open_tabs": list(self.open_tabs),
            "previous_action": self.previous_action,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        return cls(
            axtree=d["axtree"],
            url=d["url"],
            open_tabs=tuple(d.get("open_tabs", ())),
            previous_action=d.get("previous_action", "None"),
        )


@dataclass(frozen=True)
class PageAction:
    """A single browser-level action.

    `target` holds the element id for click/type, the direction for
    scroll, the URL for goto and the final answer for stop.  `text` is
    only used by type.
    """

    kind: ActionKind
    target: int | str | None = None
    text: str | None = None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind.value}
        if self.target is not None:
            d["target"] = self.target
        if self.text is not None:
            d["text"] = self.text
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PageAction":
        return cls(
            kind=ActionKind(d["kind"]),
            target=d.get("target"),
            text=d.get("text"),
        )


@dataclass(frozen=True)
class ActionSequence:
    """Ordered actions planned for one phase."""

    actions: tuple[PageAction, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", _tuple(self.actions))

    def to_dict(self) -> dict:
        return {"actions": [a.to_dict() for a in self.actions]}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionSequence":
        return cls(actions=tuple(PageAction.from_dict(a) for a in d["actions"]))


# =====================================================================
# Plans
# =====================================================================


@dataclass(frozen=True)
class PhaseSpec:
    """One phase of a global plan: a subtask and its expected end state."""

    index: int
    subtask: str
    expected_state: str

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "subtask": self.subtask,
            "expected_state": self.expected_state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseSpec":
        return cls(
            index=d["index"],
            subtask=d["subtask"],
            expected_state=d["expected_state"],
        )


@dataclass(frozen=True)
class GlobalPlan:
    """A versioned multi-phase plan produced by the planning agent."""

    phases: tuple[PhaseSpec, ...]
    plan_version: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "phases", _tuple(self.phases))

    def phase(self, index: int) -> PhaseSpec:
        for p in self.phases:
            if p.index == index:
                return p
        raise KeyError(f"plan v{self.plan_version} has no phase {index}")

    def to_dict(self) -> dict:
        return {
            "plan_version": self.plan_version,
            "phases": [p.to_dict() for p in self.phases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlobalPlan":
        return cls(
            phases=tuple(PhaseSpec.from_dict(p) for p in d["phases"]),
            plan_version=d["plan_version"],
        )


# =====================================================================
# Execution reporting
# =====================================================================


@dataclass(frozen=True)
class StepOutcome:
    """Result of applying one action: Ok, or an environment error."""

    ok: bool
    error: str = ""

    @classmethod
    def success(cls) -> "StepOutcome":
        return cls(ok=True)

    @classmethod
    def env_error(cls, message: str) -> "StepOutcome":
        return cls(ok=False, error=message)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "error": self.error}

    @classmethod
    def from_dict(cls, d: dict) -> "StepOutcome":
        return cls(ok=d["ok"], error=d.get("error", ""))


@dataclass(frozen=True)
class ExecutionStep:
    action: PageAction
    outcome: StepOutcome

    def to_dict(self) -> dict:
        return {"action": self.action.to_dict(), "outcome": self.outcome.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionStep":
        return cls(
            action=PageAction.from_dict(d["action"]),
            outcome=StepOutcome.from_dict(d["outcome"]),
        )


@dataclass(frozen=True)
class ExecutionReport:
    """What happened when an action sequence ran against the environment."""

    steps: tuple[ExecutionStep, ...]
    final_observation: Observation
    raised_exception: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", _tuple(self.steps))

    def to_dict(self) -> dict:
        return {
            "steps": [s.to_dict() for s in self.steps],
            "final_observation": self.final_observation.to_dict(),
            "raised_exception": self.raised_exception,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionReport":
        return cls(
            steps=tuple(ExecutionStep.from_dict(s) for s in d["steps"]),
            final_observation=Observation.from_dict(d["final_observation"]),
            raised_exception=d["raised_exception"],
        )


# =====================================================================
# Verdicts, replanning and decisions
# =====================================================================


@dataclass(frozen=True)
class LocalVerdict:
    """The execution agent's self-check after running a phase."""

    decision: VerdictDecision
    reasons: str = ""

    def to_dict(self) -> dict:
        return {"decision": self.decision.value, "reasons": self.reasons}

    @classmethod
    def from_dict(cls, d: dict) -> "LocalVerdict":
        return cls(decision=VerdictDecision(d["decision"]), reasons=d.get("reasons", ""))


@dataclass(frozen=True)
class ReplanRequest:
    """Escalation from the execution agent asking for a new global plan."""

    phase_index: int
    reasons: str
    report: ExecutionReport

    def to_dict(self) -> dict:
        return {
            "phase_index": self.phase_index,
            "reasons": self.reasons,
            "report": self.report.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReplanRequest":
        return cls(
            phase_index=d["phase_index"],
            reasons=d["reasons"],
            report=ExecutionReport.from_dict(d["report"]),
        )


@dataclass(frozen=True)
class GlobalDecision:
    """The planner's ruling on a replan request.

    ruling == "revise": `new_plan` carries the replacement plan.
    ruling == "overrule": `guidance` carries advice for the execution
    agent; the current plan stays in force, byte for byte.
    """

    ruling: str
    new_plan: GlobalPlan | None = None
    guidance: str = ""

    @classmethod
    def revise(cls, new_plan: GlobalPlan) -> "GlobalDecision":
        return cls(ruling="revise", new_plan=new_plan)

    @classmethod
    def overrule(cls, guidance: str) -> "GlobalDecision":
        return cls(ruling="overrule", guidance=guidance)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"ruling": self.ruling}
        if self.new_plan is not None:
            d["new_plan"] = self.new_plan.to_dict()
        if self.guidance:
            d["guidance"] = self.guidance
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GlobalDecision":
        new_plan = d.get("new_plan")
        return cls(
            ruling=d["ruling"],
            new_plan=GlobalPlan.from_dict(new_plan) if new_plan else None,
            guidance=d.get("guidance", ""),
        )


# =====================================================================
# Budgets
# =====================================================================


@dataclass(frozen=True)
class Budgets:
    """Dialogue limits for one task run.

    max_exchanges caps the total number of completed agent LLM calls and
    only binds while force_stop_enabled is true.  The per-phase revision
    and per-task replan limits bind only when force stop is disabled.
    """

    max_exchanges: int = 30
    max_local_revisions_per_phase: int = 3
    max_replan_requests_per_task: int = 3
    force_stop_enabled: bool = True

    def to_dict(self) -> dict:
        return {
            "max_exchanges": self.max_exchanges,
            "max_local_revisions_per_phase": self.max_local_revisions_per_phase,
            "max_replan_requests_per_task": self.max_replan_requests_per_task,
            "force_stop_enabled": self.force_stop_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Budgets":
        return cls(
            max_exchanges=d["max_exchanges"],
            max_local_revisions_per_phase=d["max_local_revisions_per_phase"],
            max_replan_requests_per_task=d["max_replan_requests_per_task"],
            force_stop_enabled=d["force_stop_enabled"],
        )


# =====================================================================
# Transcript events
# =====================================================================


@dataclass(frozen=True)
class TranscriptEvent:
    """One record in a task's append-only event log.

    Payload schema by kind:
      LlmCall          {role, prompt, response, latency}
      EnvStep          {action, ok, error}
      PlanIssued       {plan}
      VerdictIssued    {decision, reasons}
      ReplanRequested  {request}
      DecisionIssued   {ruling, new_plan?|guidance?}
      ForceStop        {exchange_count, reason}
      TaskResult       {success, answer, termination, detail}
    """

    seq: int
    timestamp: float
    kind: EventKind
    payload: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "ts": self.timestamp,
            "kind": self.kind.value,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TranscriptEvent":
        return cls(
            seq=d["seq"],
            timestamp=d["ts"],
            kind=EventKind(d["kind"]),
            payload=d.get("payload", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "TranscriptEvent":
        return cls.from_dict(json.loads(line))


_PAYLOAD_REQUIRED_KEYS: dict[EventKind, tuple[str, ...]] = {
    EventKind.LLM_CALL: ("role", "prompt", "response", "latency"),
    EventKind.ENV_STEP: ("action", "ok"),
    EventKind.PLAN_ISSUED: ("plan",),
    EventKind.VERDICT_ISSUED: ("decision",),
    EventKind.REPLAN_REQUESTED: ("request",),
    EventKind.DECISION_ISSUED: ("ruling",),
    EventKind.FORCE_STOP: ("exchange_count", "reason"),
    EventKind.TASK_RESULT: ("success", "answer", "termination"),
}


# =====================================================================
# Validation
# =====================================================================


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return f"{self.path}: {self.message}"


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[Violation, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "violations", _tuple(self.violations))

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _violations_for(value: Any, path: str) -> list[Violation]:
    out: list[Violation] = []

    def bad(msg: str, sub: str = "") -> None:
        out.append(Violation(path + sub, msg))

    if isinstance(value, Task):
        if not value.id.strip():
            bad("task id must be nonempty", ".id")
        if not value.objective.strip():
            bad("objective must be nonempty", ".objective")
        if not value.env_fixture.strip():
            bad("env_fixture must be nonempty", ".env_fixture")
        out.extend(_violations_for(value.evaluator, path + ".evaluator"))

    elif isinstance(value, EvaluatorSpec):
        if value.kind not in EVALUATOR_KINDS:
            bad(f"unknown evaluator kind {value.kind!r}", ".kind")
        if not value.expected:
            bad("expected values must be nonempty", ".expected")
        elif any(not isinstance(e, str) or not e for e in value.expected):
            bad("every expected value must be a nonempty string", ".expected")

    elif isinstance(value, Observation):
        if not value.axtree.strip():
            bad("axtree must be nonempty", ".axtree")
        if not value.previous_action:
            bad("previous_action must be nonempty (use 'None')", ".previous_action")

    elif isinstance(value, PageAction):
        kind = value.kind
        if kind in (ActionKind.CLICK, ActionKind.TYPE):
            if not isinstance(value.target, int):
                bad("target must be an integer element id", ".target")
            if kind is ActionKind.TYPE and not isinstance(value.text, str):
                bad("type action requires text", ".text")
        elif kind is ActionKind.SCROLL:
            if value.target not in SCROLL_DIRECTIONS:
                bad("scroll direction must be 'up' or 'down'", ".target")
        elif kind is ActionKind.GOTO:
            if not isinstance(value.target, str) or not value.target.strip():
                bad("goto requires a nonempty url", ".target")
        elif kind is ActionKind.GO_BACK:
            if value.target is not None or value.text is not None:
                bad("go_back takes no arguments", ".target")
        elif kind is ActionKind.STOP:
            if not isinstance(value.target, str):
                bad("stop requires an answer string (may be empty)", ".target")

    elif isinstance(value, ActionSequence):
        if not value.actions:
            bad("action sequence must be nonempty", ".actions")
        for i, a in enumerate(value.actions):
            out.extend(_violations_for(a, f"{path}.actions[{i}]"))
            if a.kind is ActionKind.STOP and i != len(value.actions) - 1:
                bad("no action may follow a stop", f".actions[{i}]")

    elif isinstance(value, PhaseSpec):
        if value.index < 1:
            bad("phase index must be >= 1", ".index")
        if not value.subtask.strip():
            bad("subtask must be nonempty", ".subtask")
        if not value.expected_state.strip():
            bad("expected_state must be nonempty", ".expected_state")

    elif isinstance(value, GlobalPlan):
        if not value.phases:
            bad("plan must have at least one phase", ".phases")
        if value.plan_version < 1:
            bad("plan_version must be >= 1", ".plan_version")
        for i, p in enumerate(value.phases):
            out.extend(_violations_for(p, f"{path}.phases[{i}]"))
        indices = [p.index for p in value.phases]
        if indices != list(range(1, len(indices) + 1)):
            bad(f"phase indices must be contiguous from 1, got {indices}", ".phases")

    elif isinstance(value, ExecutionReport):
        if not value.steps:
            bad("report must contain at least one step", ".steps")
        for i, s in enumerate(value.steps):
            out.extend(_violations_for(s.action, f"{path}.steps[{i}].action"))
        any_error = any(not s.outcome.ok for s in value.steps)
        if value.raised_exception != any_error:
            bad(
                "raised_exception must equal the presence of an EnvError step",
                ".raised_exception",
            )
        out.extend(_violations_for(value.final_observation, path + ".final_observation"))

    elif isinstance(value, LocalVerdict):
        if value.decision in (VerdictDecision.REVISE, VerdictDecision.REQUEST):
            if not value.reasons.strip():
                bad("reasons required for revise/request verdicts", ".reasons")

    elif isinstance(value, ReplanRequest):
        if value.phase_index < 1:
            bad("phase_index must be >= 1", ".phase_index")
        if not value.reasons.strip():
            bad("reasons must be nonempty", ".reasons")
        out.extend(_violations_for(value.report, path + ".report"))

    elif isinstance(value, GlobalDecision):
        if value.ruling not in ("revise", "overrule"):
            bad(f"unknown ruling {value.ruling!r}", ".ruling")
        elif value.ruling == "revise":
            if value.new_plan is None:
                bad("revise ruling requires new_plan", ".new_plan")
            else:
                out.extend(_violations_for(value.new_plan, path + ".new_plan"))
        elif not value.guidance.strip():
            bad("overrule ruling requires nonempty guidance", ".guidance")

    elif isinstance(value, Budgets):
        if value.max_exchanges <= 0:
            bad("max_exchanges must be positive", ".max_exchanges")
        if value.max_local_revisions_per_phase < 0:
            bad("max_local_revisions_per_phase must be >= 0", ".max_local_revisions_per_phase")
        if value.max_replan_requests_per_task < 0:
            bad("max_replan_requests_per_task must be >= 0", ".max_replan_requests_per_task")

    elif isinstance(value, TranscriptEvent):
        if value.seq < 0:
            bad("seq must be >= 0", ".seq")
        required = _PAYLOAD_REQUIRED_KEYS[value.kind]
        missing = [k for k in required if k not in value.payload]
        if missing:
            bad(f"payload missing keys {missing} for kind {value.kind.value}", ".payload")

    else:
        bad(f"no validation rules for type {type(value).__name__}")

    return out


def validate(value: Any) -> ValidationResult:
    """Check a protocol value against its structural invariants."""
    return ValidationResult(violations=tuple(_violations_for(value, type(value).__name__)))


# =====================================================================
# Generic codec
# =====================================================================

_CODEC_TYPES = (
    Task,
    EvaluatorSpec,
    Observation,
    PageAction,
    ActionSequence,
    PhaseSpec,
    GlobalPlan,
    StepOutcome,
    ExecutionStep,
    ExecutionReport,
    LocalVerdict,
    ReplanRequest,
    GlobalDecision,
    Budgets,
    TranscriptEvent,
)

_CODEC_BY_NAME = {t.__name__: t for t in _CODEC_TYPES}


def encode_value(value: Any) -> dict:
    """Encode any protocol value to a type-tagged JSON-safe dict."""
    name = type(value).__name__
    if name not in _CODEC_BY_NAME:
        raise TypeError(f"{name} is not a protocol type")
    return {"type": name, "value": value.to_dict()}


def decode_value(d: dict) -> Any:
    """Inverse of encode_value: decode_value(encode_value(x)) == x."""
    try:
        cls = _CODEC_BY_NAME[d["type"]]
    except KeyError:
        raise ValueError(f"unknown protocol type tag {d.get('type')!r}") from None
    return cls.from_dict(d["value"])


def dataclass_field_names(cls: type) -> tuple[str, ...]:
    """Field names of a protocol dataclass (used by tests and tooling)."""
    return tuple(f.name for f in fields(cls))
