"""Reflect-Critique-Refine debate: prompts, consensus, novel-step detection, and the round loop."""

from __future__ import annotations

import logging
import re
import string
from collections.abc import Sequence
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .agents import AgentRequest, DebateContext, respond
from .domain import AgentConfig, AgentTurn, DebateFailure, DebateRecord, Query, Termination, check_pool
from .errors import ConfigurationError, TransportError
from .extract import extract_answer, extract_rationale, final_answer_text
from .voting import check_consensus, majority_vote

__all__ = [
    "DebateConfig",
    "build_round0_prompt",
    "build_rcr_prompt",
    "check_consensus",
    "majority_vote",
    "detect_novel_step",
    "run_debate",
    "run_debates",
]

log = logging.getLogger(__name__)

JACCARD_THRESHOLD = 0.6
NOVELTY_NUDGE = (
    "\n\nYour answer changed but your reasoning adds no new step. "
    "State at least one new reasoning step that justifies the change."
)


@dataclass(frozen=True)
class DebateConfig:
    max_rounds: int = 5
    agent_count: int | None = None
    consensus_on_normalized: bool = True
    prompt_template_set: str | None = None
    novel_step_retry: bool = False
    max_tokens: int = 1024
    seed: int | None = None
    templates_dir: str | None = None

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.agent_count is not None and self.agent_count < 1:
            raise ValueError("agent_count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "max_rounds": self.max_rounds,
            "agent_count": self.agent_count,
            "consensus_on_normalized": self.consensus_on_normalized,
            "prompt_template_set": self.prompt_template_set,
            "novel_step_retry": self.novel_step_retry,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
            "templates_dir": self.templates_dir,
        }

    @classmethod
    def from_dict(cls, d) -> DebateConfig:
        return cls(**dict(d))


# --- prompts -------------------------------------------------------------------


@lru_cache(maxsize=None)
def load_template(task_kind: str, templates_dir: str | None = None) -> str:
    name = f"{task_kind}.txt"
    try:
        if templates_dir is not None:
            text = (Path(templates_dir) / name).read_text(encoding="utf-8")
        else:
            text = resources.files("debate_evolve").joinpath("templates", name).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigurationError(f"no prompt template for task kind {task_kind!r}") from exc
    return text[:-1] if text.endswith("\n") else text


def _question_block(query: Query) -> str:
    if query.choices is None:
        return query.text
    lines = [query.text] + [f"({label}) {text}" for label, text in query.choices]
    return "\n".join(lines)


def build_round0_prompt(query: Query) -> str:
    if not query.text.strip():
        raise ValueError(f"query {query.id!r} has empty text")
    return (
        f"{_question_block(query)}\n\n"
        "Think through the problem step by step. "
        "Your final answer must be in the format \\boxed{answer} at the end."
    )


def render_own_previous(turn: AgentTurn | None) -> str:
    if turn is None:
        return ""
    return f"Your previous answer: {turn.answer}\nYour previous reasoning: {turn.rationale}"


def render_context(peer_turns: Sequence[AgentTurn]) -> str:
    blocks = [
        f"Agent {t.agent_id} answer: {t.answer}\nAgent {t.agent_id} reasoning: {t.rationale}"
        for t in sorted(peer_turns, key=lambda t: t.agent_id)
    ]
    return "\n\n".join(blocks)


_PLACEHOLDER = re.compile(r"\{(self\.agent_id|question|own_previous|context|round_num)\}")


def build_rcr_prompt(
    query: Query,
    agent_id: int,
    own_previous: AgentTurn | None,
    peer_turns: Sequence[AgentTurn],
    round_num: int,
    template_set: str | None = None,
    templates_dir: str | None = None,
) -> str:
    """Fill the task's RCR template in a single pass (substituted text is never re-scanned)."""
    if round_num < 1:
        raise ValueError("RCR prompts start at round 1")
    template = load_template(template_set or query.task_kind, templates_dir)
    values = {
        "self.agent_id": str(agent_id),
        "question": _question_block(query),
        "own_previous": render_own_previous(own_previous),
        "context": render_context(peer_turns),
        "round_num": str(round_num),
    }
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)


# --- novel steps ---------------------------------------------------------------

_SENTENCE_END = re.compile(r"(?<=[.?!])\s+|\n+")
_PUNCT = str.maketrans("", "", string.punctuation)


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_END.split(text) if s.strip()]


def sentence_tokens(sentence: str) -> frozenset[str]:
    return frozenset(sentence.lower().translate(_PUNCT).split())


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def detect_novel_step(new_rationale: str, own_previous: str, peer_rationales: Sequence[str]) -> bool:
    """True iff some sentence of ``new_rationale`` is unlike (Jaccard < 0.6) every earlier sentence."""
    earlier = [sentence_tokens(s) for text in (own_previous, *peer_rationales) for s in split_sentences(text)]
    for sentence in split_sentences(new_rationale):
        tokens = sentence_tokens(sentence)
        if not tokens:
            continue
        if all(jaccard(tokens, old) < JACCARD_THRESHOLD for old in earlier):
            return True
    return False


# --- the debate loop -----------------------------------------------------------

_shared_pool: ThreadPoolExecutor | None = None


def _agent_pool() -> ThreadPoolExecutor:
    global _shared_pool
    if _shared_pool is None:
        _shared_pool = ThreadPoolExecutor(max_workers=32, thread_name_prefix="dte-agent")
    return _shared_pool


def _consensus(turns: Sequence[AgentTurn], task_kind: str, normalized: bool) -> bool:
    if len(turns) == 1:
        return True
    if normalized:
        return check_consensus(turns, task_kind)
    raw = {final_answer_text(t.raw_text).strip() for t in turns}
    return len(raw) == 1 and "" not in raw


def _make_turn(agent_id: int, round_num: int, raw: str, task_kind: str, prev: AgentTurn | None, peers) -> AgentTurn:
    rationale = extract_rationale(raw)
    novel = True
    if prev is not None:
        novel = detect_novel_step(rationale, prev.rationale, [p.rationale for p in peers])
    return AgentTurn(agent_id, round_num, extract_answer(raw, task_kind), rationale, raw, novel)


def run_debate(
    query: Query,
    agents: Sequence[AgentConfig],
    config: DebateConfig = DebateConfig(),
    executor: Executor | None = None,
) -> DebateRecord:
    """Debate ``query`` until consensus or ``max_rounds`` refinement rounds, then majority vote.

    Agent calls of one round run concurrently when any agent is remote; rounds
    are sequential. Raises TransportError if an agent cannot be reached.
    """
    if not agents:
        raise ValueError("at least one agent is required")
    check_pool(agents)
    if config.agent_count is not None and config.agent_count != len(agents):
        raise ConfigurationError(f"config expects {config.agent_count} agents, got {len(agents)}")
    kind = query.task_kind
    template_set = config.prompt_template_set

    def call(agent: AgentConfig, prompt: str, context: DebateContext) -> str:
        request = AgentRequest(prompt, agent.temperature, config.max_tokens, config.seed)
        return respond(agent, request, context)

    def run_round(jobs):
        if executor is None and not any(a.backend == "http" for a in agents):
            return [call(*job) for job in jobs]
        pool = executor or _agent_pool()
        return list(pool.map(lambda job: call(*job), jobs))

    prompt0 = build_round0_prompt(query)
    raws = run_round([(a, prompt0, DebateContext(query, 0)) for a in agents])
    rounds = [tuple(_make_turn(a.agent_id, 0, raw, kind, None, ()) for a, raw in zip(agents, raws))]
    if _consensus(rounds[0], kind, config.consensus_on_normalized):
        return _finish(query, rounds, Termination.consensus(0), config, len(agents))

    for t in range(1, config.max_rounds + 1):
        prev = rounds[-1]
        jobs, contexts = [], []
        for i, agent in enumerate(agents):
            peers = tuple(sorted((p for j, p in enumerate(prev) if j != i), key=lambda p: p.agent_id))
            prompt = build_rcr_prompt(query, agent.agent_id, prev[i], peers, t, template_set, config.templates_dir)
            ctx = DebateContext(query, t, prev[i], peers)
            jobs.append((agent, prompt, ctx))
            contexts.append(ctx)
        raws = run_round(jobs)
        turns = []
        for (agent, prompt, ctx), raw in zip(jobs, raws):
            turn = _make_turn(agent.agent_id, t, raw, kind, ctx.own_previous, ctx.peer_turns)
            if config.novel_step_retry and turn.answer != ctx.own_previous.answer and not turn.novel_step:
                raw = call(agent, prompt + NOVELTY_NUDGE, ctx)
                turn = _make_turn(agent.agent_id, t, raw, kind, ctx.own_previous, ctx.peer_turns)
            if turn.answer != ctx.own_previous.answer and not turn.novel_step:
                log.debug("query %s round %d: agent %d switched without a novel step", query.id, t, agent.agent_id)
            turns.append(turn)
        rounds.append(tuple(turns))
        if _consensus(rounds[-1], kind, config.consensus_on_normalized):
            return _finish(query, rounds, Termination.consensus(t), config, len(agents))

    return _finish(query, rounds, Termination.majority_vote(), config, len(agents))


def _finish(query, rounds, termination: Termination, config: DebateConfig, n: int) -> DebateRecord:
    last = rounds[-1]
    final = last[0].answer if termination.kind == "consensus" else majority_vote(last, query.task_kind)
    return DebateRecord(query, tuple(rounds), final, termination, n, config.max_rounds)


def run_debates(
    queries: Sequence[Query],
    agents: Sequence[AgentConfig],
    config: DebateConfig = DebateConfig(),
    parallelism: int = 4,
) -> list[DebateRecord | DebateFailure]:
    """Debate many queries with at most ``parallelism`` in flight; output order follows input order."""

    def one(query: Query) -> DebateRecord | DebateFailure:
        try:
            return run_debate(query, agents, config)
        except TransportError as exc:
            log.error("debate for %s failed: %s", query.id, exc)
            return DebateFailure(query.id, str(exc))

    if parallelism <= 1 or len(queries) <= 1:
        return [one(q) for q in queries]
    with ThreadPoolExecutor(max_workers=parallelism, thread_name_prefix="dte-query") as pool:
        return list(pool.map(one, queries))


def with_temperature(agents: Sequence[AgentConfig], temperature: float) -> list[AgentConfig]:
    return [replace(a, temperature=temperature) for a in agents]
