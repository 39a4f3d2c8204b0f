"""Consensus and majority vote over one round of agent turns."""

from __future__ import annotations

from collections.abc import Sequence

from .domain import AgentTurn
from .extract import normalize_answer


def check_consensus(turns: Sequence[AgentTurn], task_kind: str) -> bool:
    """True iff every normalized answer is non-empty and all are equal."""
    answers = {normalize_answer(t.answer, task_kind) for t in turns}
    return len(answers) == 1 and "" not in answers


def majority_vote(turns: Sequence[AgentTurn], task_kind: str) -> str:
    """Most frequent normalized answer; ties go to the answer first proposed by the lowest agent id.

    Empty answers only win when every answer is empty.
    """
    counts: dict[str, int] = {}
    first_proposer: dict[str, int] = {}
    for t in turns:
        a = normalize_answer(t.answer, task_kind)
        if not a:
            continue
        counts[a] = counts.get(a, 0) + 1
        first_proposer[a] = min(first_proposer.get(a, t.agent_id), t.agent_id)
    if not counts:
        return ""
    return min(counts, key=lambda a: (-counts[a], first_proposer[a]))
