"""Trajectory-level reward: format term, reasoning term, clipped total."""

from __future__ import annotations

import re
import string
from dataclasses import asdict, dataclass
from typing import Sequence

from .environment import ARITY, GRAPH_KINDS, Step, Trajectory

TOTAL_MIN, TOTAL_MAX = -1.0, 3.0

_PUNCT = string.punctuation + "‘’“”"


def normalize_answer(text: str) -> str:
    """Case-fold, trim, collapse whitespace, strip edge punctuation (idempotent)."""
    prev = None
    out = text
    while out != prev:
        prev = out
        out = re.sub(r"\s+", " ", out.casefold()).strip().strip(_PUNCT)
    return out


@dataclass(frozen=True)
class RewardBreakdown:
    format: float
    reasoning: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def is_well_formed(step: Step) -> bool:
    return (
        bool(step.thought.strip())
        and not step.malformed
        and len(step.action.args) == ARITY.get(step.action.kind, -1)
        and bool(step.observation.strip())
        and step.env_error is None
    )


def format_reward(t: Trajectory) -> float:
    return min(1.0, 0.5 * sum(is_well_formed(s) for s in t.steps))


def answer_matches(answer: str, gold: Sequence[str]) -> bool:
    a = normalize_answer(answer)
    return any(a == normalize_answer(g) for g in gold)


def reasoning_reward(t: Trajectory, gold: Sequence[str]) -> float:
    if not gold:
        raise ValueError("gold answer list must be non-empty")
    valid_op = any(
        s.action.kind in GRAPH_KINDS and s.env_error is None and not s.malformed
        for s in t.steps
    )
    r = 0.5 if valid_op else 0.0
    if t.final_answer is not None:
        r += 1.0 if answer_matches(t.final_answer, gold) else -0.5
    return r


def total_reward(t: Trajectory, gold: Sequence[str]) -> RewardBreakdown:
    f = format_reward(t)
    r = reasoning_reward(t, gold)
    return RewardBreakdown(format=f, reasoning=r, total=max(TOTAL_MIN, min(TOTAL_MAX, f + r)))
