"""Agent backends: scripted mocks, probabilistic simulators, toy policies and an HTTP client."""

from __future__ import annotations

import logging
import math
import os
import threading
import time
import zlib
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import httpx
import numpy as np

from .domain import AgentConfig, AgentTurn, Query
from .errors import ConfigurationError, TransportError
from .voting import majority_vote

log = logging.getLogger(__name__)

SIMULATED_RATIONALE = "I worked through the problem step by step and checked the result."


@dataclass(frozen=True)
class AgentRequest:
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class DebateContext:
    """What an agent may see besides its prompt: the query and the previous round."""

    query: Query
    round: int = 0
    own_previous: AgentTurn | None = None
    peer_turns: tuple[AgentTurn, ...] = ()


@dataclass(frozen=True)
class ProbabilisticAgentParams:
    p_correct: float
    sycophancy: float
    answer_space: tuple[str, ...]

    def __post_init__(self):
        if not (0.0 <= self.p_correct <= 1.0 and 0.0 <= self.sycophancy <= 1.0):
            raise ConfigurationError("p_correct and sycophancy must lie in [0, 1]")
        if not self.answer_space:
            raise ConfigurationError("answer_space must be non-empty")


def _rng(agent: AgentConfig, query_id: str, round_: int, salt: int = 0) -> np.random.Generator:
    # temperature 0 means greedy decoding: identical agents must produce identical draws
    agent_key = 0 if agent.temperature == 0 else agent.agent_id + 1
    seed = int(agent.backend_params.get("seed", 0))
    return np.random.default_rng([seed, zlib.crc32(query_id.encode()), round_, agent_key, salt])


def _default_answer_space(query: Query) -> tuple[str, ...]:
    if query.choices is not None:
        return tuple(label for label, _ in query.choices)
    gold = query.gold_answer or "0"
    try:
        base = int(float(gold))
    except ValueError:
        return (gold, f"not {gold}")
    return (gold,) + tuple(str(base + k) for k in (1, 2, 3))


def probabilistic_params(agent: AgentConfig, query: Query) -> ProbabilisticAgentParams:
    bp = agent.backend_params
    space = tuple(bp.get("answer_space") or _default_answer_space(query))
    params = ProbabilisticAgentParams(
        p_correct=float(bp.get("p_correct", 0.5)),
        sycophancy=float(bp.get("sycophancy", 0.0)),
        answer_space=space,
    )
    if query.gold_answer not in params.answer_space:
        raise ConfigurationError(f"answer_space of agent {agent.agent_id} lacks gold {query.gold_answer!r}")
    return params


def _respond_probabilistic(agent: AgentConfig, context: DebateContext) -> str:
    query = context.query
    if query.gold_answer is None:
        raise ConfigurationError("probabilistic agents need the gold answer in the context")
    params = probabilistic_params(agent, query)
    rng = _rng(agent, query.id, context.round)
    if context.round == 0 or context.own_previous is None:
        if rng.random() < params.p_correct:
            answer = query.gold_answer
        else:
            wrong = [a for a in params.answer_space if a != query.gold_answer]
            answer = wrong[rng.integers(len(wrong))] if wrong else query.gold_answer
    else:
        answer = context.own_previous.answer
        if context.peer_turns and rng.random() < params.sycophancy:
            answer = majority_vote(context.peer_turns, query.task_kind) or answer
    return f"{SIMULATED_RATIONALE}\nThe answer is \\boxed{{{answer}}}"


def _respond_mock(agent: AgentConfig, context: DebateContext) -> str:
    script = agent.backend_params.get("script", {})
    entry = script.get(context.query.id, script.get("*"))
    if entry is None:
        raise ConfigurationError(f"mock agent {agent.agent_id} has no script for query {context.query.id!r}")
    if isinstance(entry, str):
        return entry
    if context.round >= len(entry):
        raise ConfigurationError(
            f"mock agent {agent.agent_id} has no script for ({context.query.id!r}, round {context.round})"
        )
    return entry[context.round]


def render_policy_output(label: str) -> str:
    return f"<reasoning>Selected {label}.</reasoning>\n<answer>{label}</answer>"


def _respond_policy(agent: AgentConfig, context: DebateContext) -> str:
    from .grpo import ToyPolicy

    bp = agent.backend_params
    policy = ToyPolicy.from_dict(bp["policy"])
    context_of = bp.get("context_of", {})
    if context.query.id not in context_of:
        raise ConfigurationError(f"policy agent {agent.agent_id} has no context for {context.query.id!r}")
    rng = _rng(agent, context.query.id, context.round)
    action = policy.sample(int(context_of[context.query.id]), rng, agent.temperature)
    return render_policy_output(policy.action_labels[action])


# --- HTTP ----------------------------------------------------------------------

_clients: dict[float, httpx.Client] = {}
_limits: dict[tuple[str, int], threading.BoundedSemaphore] = {}
_registry_lock = threading.Lock()


def _client(timeout: float) -> httpx.Client:
    with _registry_lock:
        if timeout not in _clients:
            _clients[timeout] = httpx.Client(timeout=timeout)
        return _clients[timeout]


def _limiter(base_url: str, agent_id: int, max_in_flight: int) -> threading.BoundedSemaphore:
    with _registry_lock:
        key = (base_url, agent_id)
        if key not in _limits:
            _limits[key] = threading.BoundedSemaphore(max_in_flight)
        return _limits[key]


def chat_completion_payload(model: str, request: AgentRequest) -> dict[str, Any]:
    payload: dict[str, Any] = {
        "model": model,
        "messages": [{"role": "user", "content": request.prompt}],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    if request.seed is not None:
        payload["seed"] = request.seed
    return payload


def _respond_http(agent: AgentConfig, request: AgentRequest) -> str:
    bp = agent.backend_params
    base_url = bp.get("base_url")
    model = bp.get("model")
    if not base_url or not model:
        raise ConfigurationError(f"http agent {agent.agent_id} needs base_url and model")
    timeout = float(bp.get("timeout", 30.0))
    retries = int(bp.get("retries", 3))
    backoff = float(bp.get("backoff", 0.5))
    key = os.environ.get(bp.get("api_key_env", "OPENAI_API_KEY"), "")
    headers = {"Authorization": f"Bearer {key}"} if key else {}
    url = base_url.rstrip("/") + "/chat/completions"
    payload = chat_completion_payload(model, request)

    status: int | None = None
    last_error = ""
    attempts = 0
    with _limiter(base_url, agent.agent_id, int(bp.get("max_in_flight", 4))):
        for attempt in range(retries + 1):
            attempts = attempt + 1
            try:
                resp = _client(timeout).post(url, json=payload, headers=headers)
                status = resp.status_code
                if 200 <= status < 300:
                    return resp.json()["choices"][0]["message"]["content"]
                last_error = f"HTTP {status}"
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            except (KeyError, IndexError, ValueError) as exc:
                raise TransportError(f"malformed completion from {url}: {exc}", status, attempts) from exc
            log.warning("agent %s attempt %d/%d failed: %s", agent.agent_id, attempts, retries + 1, last_error)
            if attempt < retries:
                time.sleep(backoff * 2**attempt)
    raise TransportError(f"{url} failed after {attempts} attempts: {last_error}", status, attempts)


def respond(agent: AgentConfig, request: AgentRequest, context: DebateContext) -> str:
    """Raw text produced by ``agent`` for one debate turn."""
    if agent.backend == "mock":
        return _respond_mock(agent, context)
    if agent.backend == "probabilistic":
        return _respond_probabilistic(agent, context)
    if agent.backend == "policy":
        return _respond_policy(agent, context)
    return _respond_http(agent, request)


def estimate_majority_accuracy(p: float, n_agents: int) -> float:
    """Probability that a strict majority of ``n_agents`` independent voters is correct."""
    if n_agents < 1 or n_agents % 2 == 0:
        raise ValueError(f"n_agents must be a positive odd integer, got {n_agents}")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return sum(
        math.comb(n_agents, j) * p**j * (1 - p) ** (n_agents - j)
        for j in range(n_agents // 2 + 1, n_agents + 1)
    )


def probabilistic_pool(
    n_agents: int,
    p_correct: float,
    sycophancy: float = 0.0,
    temperature: float = 1.0,
    seed: int = 0,
    answer_space: Sequence[str] | None = None,
) -> list[AgentConfig]:
    params: dict[str, Any] = {"p_correct": p_correct, "sycophancy": sycophancy, "seed": seed}
    if answer_space is not None:
        params["answer_space"] = list(answer_space)
    return [AgentConfig(i + 1, "probabilistic", temperature, params) for i in range(n_agents)]


def mock_agent(agent_id: int, script: Mapping[str, Any]) -> AgentConfig:
    return AgentConfig(agent_id, "mock", 0.0, {"script": dict(script)})
