"""Prompt resources for both agents.

Prompt text lives in editable files under ``data/prompts/<agent>/<action>.txt``
inside the package; a PromptLibrary can overlay a user directory with the
same layout, so deployments can tune wording without touching code.  The
shared tail block every prompt ends with (OBSERVATION / URL / OBJECTIVE /
PREVIOUS ACTION) is rendered by ``context_block``.

PROMPT_MARKERS maps each prompt key to a phrase unique to that prompt,
which scripted-backend fixtures use to recognize what kind of response a
prompt expects.
"""

from __future__ import annotations

from importlib.resources import files
from pathlib import Path

from .protocol import Observation

__all__ = [
    "PROMPT_KEYS",
    "PROMPT_MARKERS",
    "PromptLibrary",
    "context_block",
]

PROMPT_KEYS = (
    "global/intro",
    "global/plan",
    "global/decide",
    "global/revise",
    "global/collate",
    "local/intro",
    "local/plan",
    "local/pass_check",
    "local/false_check",
    "local/revise",
    "local/overruled",
)

# One stable, distinctive phrase per prompt, for scripted matchers.  Each
# phrase sits on a single line of its prompt file; a test enforces that.
PROMPT_MARKERS = {
    "global/plan": "Construct the global plan",
    "global/decide": "Judge whether the fault lies",
    "global/revise": "You accepted the replan request",
    "global/collate": "Produce the final answer",
    "local/plan": "Work out the action sequence",
    "local/pass_check": "ran without errors",
    "local/false_check": "An action in this phase failed",
    "local/revise": "You decided to adjust your action sequence",
    "local/overruled": "kept the global plan",
}

# Repair follow-ups appended when a response does not parse.
REPAIR_PLAN = (
    "Your reply could not be parsed. Reply again using exactly one line per "
    "phase in the format 'Phase 1: <subtask> | Expected: <expected state>', "
    "with no other text."
)
REPAIR_ACTIONS = (
    "Your reply could not be parsed. Reply again with one action per line in "
    "the format '**Action 1:** [action]', using only the documented actions, "
    "with no other text."
)
REPAIR_VERDICT = (
    "Your reply could not be parsed. Reply again in exactly the format "
    "'Action: [token]' on one line and 'Reasons: [your reasons]' on the "
    "next, choosing a token that is allowed for this check."
)
REPAIR_DECISION = (
    "Your reply could not be parsed. Reply again with exactly one ruling "
    "token, ```revise``` or ```overrule```, followed by your suggestions if "
    "you overrule."
)


class PromptLibrary:
    """Loads prompt texts by key, with an optional override directory."""

    def __init__(self, override_dir: str | Path | None = None) -> None:
        self._override_dir = Path(override_dir) if override_dir else None
        self._cache: dict[str, str] = {}

    def get(self, key: str) -> str:
        if key not in PROMPT_KEYS:
            raise KeyError(f"unknown prompt key {key!r}")
        if key in self._cache:
            return self._cache[key]
        text = self._load(key)
        self._cache[key] = text
        return text

    def _load(self, key: str) -> str:
        relative = f"{key}.txt"
        if self._override_dir is not None:
            candidate = self._override_dir / relative
            if candidate.exists():
                return candidate.read_text(encoding="utf-8")
        resource = files("tandem").joinpath("data", "prompts", *relative.split("/"))
        return resource.read_text(encoding="utf-8")


def context_block(observation: Observation, objective: str) -> str:
    """The shared prompt tail carrying page context and the objective."""
    tabs = " | ".join(observation.open_tabs) if observation.open_tabs else "none"
    return (
        f"OBSERVATION: {observation.axtree}\n"
        f"URL: {observation.url}\n"
        f"OPEN TABS: {tabs}\n"
        f"OBJECTIVE: {objective}\n"
        f"PREVIOUS ACTION: {observation.previous_action}"
    )
