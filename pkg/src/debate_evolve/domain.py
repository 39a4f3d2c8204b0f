"""Core value types shared by the debate, trace, metrics and evolution modules.

Every type is a frozen dataclass with a ``to_dict``/``from_dict`` pair; the
canonical JSON form (sorted keys, compact separators) is what the trace store
and the CLI read and write.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

TASK_KINDS = ("math", "science", "commonsense")
BACKENDS = ("mock", "probabilistic", "http", "policy")


def canonical_json(obj: Any) -> str:
    """Serialize a domain object (or plain data) to canonical JSON."""
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _freeze(value: Any) -> Any:
    # JSON-ish mappings/lists -> hashable-ish immutable structures are overkill;
    # we only need tuples for list fields so equality after round-trip holds.
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    if isinstance(value, dict):
        return {k: _freeze(v) for k, v in value.items()}
    return value


def _thaw(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    if isinstance(value, Mapping):
        return {k: _thaw(v) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    task_kind: str
    choices: tuple[tuple[str, str], ...] | None = None
    gold_answer: str | None = None
    dataset: str = ""

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        if self.choices is not None:
            object.__setattr__(self, "choices", tuple((str(l), str(t)) for l, t in self.choices))
        if (self.choices is None) != (self.task_kind == "math"):
            raise ValueError("choices must be present iff task_kind is not math")
        if self.choices is not None:
            labels = [label for label, _ in self.choices]
            if len(set(labels)) != len(labels):
                raise ValueError(f"duplicate choice labels in query {self.id!r}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "task_kind": self.task_kind,
            "choices": None if self.choices is None else [{"label": l, "text": t} for l, t in self.choices],
            "gold_answer": self.gold_answer,
            "dataset": self.dataset,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Query:
        choices = d.get("choices")
        if choices is not None:
            choices = tuple((c["label"], c["text"]) for c in choices)
        return cls(
            id=d["id"],
            text=d["text"],
            task_kind=d["task_kind"],
            choices=choices,
            gold_answer=d.get("gold_answer"),
            dataset=d.get("dataset", ""),
        )


@dataclass(frozen=True)
class AgentConfig:
    agent_id: int
    backend: str
    temperature: float = 0.0
    backend_params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must lie in [0, 2], got {self.temperature}")
        object.__setattr__(self, "backend_params", _freeze(dict(self.backend_params)))

    def with_temperature(self, temperature: float) -> AgentConfig:
        return AgentConfig(self.agent_id, self.backend, temperature, self.backend_params)

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "backend": self.backend,
            "temperature": self.temperature,
            "backend_params": _thaw(self.backend_params),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> AgentConfig:
        return cls(
            agent_id=int(d["agent_id"]),
            backend=d["backend"],
            temperature=float(d.get("temperature", 0.0)),
            backend_params=d.get("backend_params", {}),
        )


def check_pool(agents: Iterable[AgentConfig]) -> None:
    ids = [a.agent_id for a in agents]
    if len(set(ids)) != len(ids):
        raise ValueError(f"agent ids must be unique within a pool: {ids}")


@dataclass(frozen=True)
class AgentTurn:
    agent_id: int
    round: int
    answer: str
    rationale: str
    raw_text: str
    novel_step: bool = True

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "round": self.round,
            "answer": self.answer,
            "rationale": self.rationale,
            "raw_text": self.raw_text,
            "novel_step": self.novel_step,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> AgentTurn:
        return cls(
            agent_id=int(d["agent_id"]),
            round=int(d["round"]),
            answer=d["answer"],
            rationale=d["rationale"],
            raw_text=d["raw_text"],
            novel_step=bool(d["novel_step"]),
        )


@dataclass(frozen=True)
class Termination:
    """Why a debate stopped: ``consensus`` at ``round``, or ``majority_vote``."""

    kind: str
    round: int | None = None

    def __post_init__(self):
        if self.kind == "consensus":
            if self.round is None or self.round < 0:
                raise ValueError("consensus termination needs a round >= 0")
        elif self.kind == "majority_vote":
            if self.round is not None:
                raise ValueError("majority_vote termination carries no round")
        else:
            raise ValueError(f"unknown termination kind {self.kind!r}")

    @classmethod
    def consensus(cls, round: int) -> Termination:
        return cls("consensus", round)

    @classmethod
    def majority_vote(cls) -> Termination:
        return cls("majority_vote")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "round": self.round}

    @classmethod
    def from_dict(cls, d: Mapping) -> Termination:
        return cls(d["kind"], d.get("round"))


@dataclass(frozen=True)
class DebateRecord:
    query: Query
    rounds: tuple[tuple[AgentTurn, ...], ...]
    final_answer: str
    termination: Termination
    agent_count: int
    max_rounds: int

    def __post_init__(self):
        object.__setattr__(self, "rounds", tuple(tuple(r) for r in self.rounds))

    @property
    def debate_rounds(self) -> int:
        """Number of rounds with index >= 1."""
        return len(self.rounds) - 1

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "rounds": [[t.to_dict() for t in r] for r in self.rounds],
            "final_answer": self.final_answer,
            "termination": self.termination.to_dict(),
            "agent_count": self.agent_count,
            "max_rounds": self.max_rounds,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> DebateRecord:
        return cls(
            query=Query.from_dict(d["query"]),
            rounds=tuple(tuple(AgentTurn.from_dict(t) for t in r) for r in d["rounds"]),
            final_answer=d["final_answer"],
            termination=Termination.from_dict(d["termination"]),
            agent_count=int(d["agent_count"]),
            max_rounds=int(d["max_rounds"]),
        )


@dataclass(frozen=True)
class DebateFailure:
    """Per-query error record; the other queries of a batch are unaffected."""

    query_id: str
    error: str
    kind: str = "transport"

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "error": self.error, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: Mapping) -> DebateFailure:
        return cls(d["query_id"], d["error"], d.get("kind", "transport"))


@dataclass(frozen=True)
class TrainingExample:
    query_id: str
    x: str
    y_star: str
    rationale: str
    source_round_count: int
    reward: float

    def __post_init__(self):
        if not self.rationale:
            raise ValueError("rationale must be non-empty")
        if self.source_round_count < 0:
            raise ValueError("source_round_count must be >= 0")

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "x": self.x,
            "y_star": self.y_star,
            "rationale": self.rationale,
            "source_round_count": self.source_round_count,
            "reward": self.reward,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainingExample:
        return cls(
            query_id=d["query_id"],
            x=d["x"],
            y_star=d["y_star"],
            rationale=d["rationale"],
            source_round_count=int(d["source_round_count"]),
            reward=float(d["reward"]),
        )


@dataclass(frozen=True)
class RewardParams:
    w_vote: float = 2.0
    w_fmt: float = 0.5
    w_brev: float = 0.5
    tau: float = 120.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        return {"w_vote": self.w_vote, "w_fmt": self.w_fmt, "w_brev": self.w_brev, "tau": self.tau}

    @classmethod
    def from_dict(cls, d: Mapping) -> RewardParams:
        return cls(**{k: float(v) for k, v in d.items()})


BASELINE_MODES = ("running_mean", "group_mean", "none")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class GrpoParams:
    """Constants of the clipped objective plus toy-trainer settings.

    ``baseline`` selects what is subtracted from the reward before it enters the
    surrogate: a per-context running mean (default), the group mean, or nothing
    (the objective exactly as written, raw reward).
    """

    epsilon: float = 0.2
    beta: float = 0.02
    learning_rate: float = 0.1
    steps: int = 200
    group_size: int = 8
    seed: int = 0
    contexts_per_step: int = 1
    inner_epochs: int = 1
    baseline: str = "running_mean"
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.group_size < 1 or self.contexts_per_step < 1 or self.inner_epochs < 1:
            raise ValueError("group_size, contexts_per_step and inner_epochs must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.baseline not in BASELINE_MODES:
            raise ValueError(f"baseline must be one of {BASELINE_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "beta": self.beta,
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "group_size": self.group_size,
            "seed": self.seed,
            "contexts_per_step": self.contexts_per_step,
            "inner_epochs": self.inner_epochs,
            "baseline": self.baseline,
            "optimizer": self.optimizer,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> GrpoParams:
        return cls(**dict(d))


@dataclass(frozen=True)
class EvolutionState:
    iteration: int
    max_iterations: int
    agent_pool: tuple[AgentConfig, ...]
    validation_reward_history: tuple[float, ...] = ()
    trace_sets: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "agent_pool", tuple(self.agent_pool))
        object.__setattr__(self, "validation_reward_history", tuple(self.validation_reward_history))
        object.__setattr__(self, "trace_sets", tuple(self.trace_sets))
        if self.iteration > self.max_iterations:
            raise ValueError("iteration exceeds max_iterations")
        if len(self.validation_reward_history) != self.iteration:
            raise ValueError("validation history length must equal iteration")

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "max_iterations": self.max_iterations,
            "agent_pool": [a.to_dict() for a in self.agent_pool],
            "validation_reward_history": list(self.validation_reward_history),
            "trace_sets": list(self.trace_sets),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> EvolutionState:
        return cls(
            iteration=int(d["iteration"]),
            max_iterations=int(d["max_iterations"]),
            agent_pool=tuple(AgentConfig.from_dict(a) for a in d["agent_pool"]),
            validation_reward_history=tuple(float(v) for v in d["validation_reward_history"]),
            trace_sets=tuple(d["trace_sets"]),
        )


REPORT_FIELDS = (
    "accuracy",
    "delta_vs_baseline",
    "avg_debate_rounds",
    "sycophancy_per_query",
    "c_to_i",
    "i_to_c",
    "debate_helped",
    "n_queries",
)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    delta_vs_baseline: float
    avg_debate_rounds: float
    sycophancy_per_query: float
    c_to_i: int
    i_to_c: int
    debate_helped: int
    n_queries: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        if min(self.c_to_i, self.i_to_c, self.debate_helped, self.n_queries) < 0:
            raise ValueError("counts must be non-negative")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in REPORT_FIELDS}

    @classmethod
    def from_dict(cls, d: Mapping) -> MetricsReport:
        return cls(
            accuracy=float(d["accuracy"]),
            delta_vs_baseline=float(d["delta_vs_baseline"]),
            avg_debate_rounds=float(d["avg_debate_rounds"]),
            sycophancy_per_query=float(d["sycophancy_per_query"]),
            c_to_i=int(d["c_to_i"]),
            i_to_c=int(d["i_to_c"]),
            debate_helped=int(d["debate_helped"]),
            n_queries=int(d["n_queries"]),
        )


def validate(record: DebateRecord) -> list[str]:
    """Check every DebateRecord invariant; returns one message per violation."""
    from .debate import check_consensus, majority_vote

    problems: list[str] = []
    n, t_max = record.agent_count, record.max_rounds
    kind = record.query.task_kind
    if n < 1:
        problems.append(f"agent_count: must be >= 1, got {n}")
    if t_max < 1:
        problems.append(f"max_rounds: must be >= 1, got {t_max}")
    if not 1 <= len(record.rounds) <= t_max + 1:
        problems.append(f"rounds: length {len(record.rounds)} outside [1, {t_max + 1}]")
    for t, turns in enumerate(record.rounds):
        if len(turns) != n:
            problems.append(f"rounds[t] size: round {t} has {len(turns)} turns, expected {n}")
        for turn in turns:
            if turn.round != t:
                problems.append(f"rounds[{t}].round: turn of agent {turn.agent_id} labelled round {turn.round}")
            if t == 0 and not turn.novel_step:
                problems.append(f"rounds[0].novel_step: agent {turn.agent_id} must be true at round 0")
    if problems or not record.rounds:
        return problems

    def consensus_at(t: int) -> bool:
        # a lone agent always agrees with itself
        return n == 1 or check_consensus(record.rounds[t], kind)

    term = record.termination
    if term.kind == "consensus":
        t = term.round
        if t >= len(record.rounds) or t != len(record.rounds) - 1:
            problems.append(f"termination: consensus({t}) but {len(record.rounds)} rounds stored")
        elif not consensus_at(t):
            problems.append(f"termination: consensus({t}) claimed but round-{t} answers differ")
        elif any(consensus_at(s) for s in range(t)):
            problems.append(f"termination: consensus({t}) is not the earliest consensus round")
        elif record.final_answer != record.rounds[t][0].answer:
            problems.append("final_answer: differs from the consensus answer")
    else:
        if len(record.rounds) != t_max + 1:
            problems.append(f"termination: majority_vote requires {t_max + 1} rounds, got {len(record.rounds)}")
        elif any(consensus_at(s) for s in range(len(record.rounds))):
            problems.append("termination: majority_vote although some round reached consensus")
        elif record.final_answer != majority_vote(record.rounds[-1], kind):
            problems.append("final_answer: not the majority vote of the terminal round")
    return problems
