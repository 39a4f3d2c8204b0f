"""The debate -> train -> evolve loop, its stopping rule and temperature schedule."""

from __future__ import annotations

import json
import logging
import shlex
import shutil
import subprocess
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .agents import AgentRequest, DebateContext, render_policy_output, respond
from .debate import DebateConfig, build_round0_prompt, run_debates, with_temperature
from .domain import (
    AgentConfig,
    DebateFailure,
    DebateRecord,
    EvolutionState,
    GrpoParams,
    Query,
    RewardParams,
    check_pool,
)
from .errors import ConfigurationError, TrainingError, TransportError
from .grpo import TableEnvironment, ToyPolicy, grpo_train, reward_from_parts, shaped_reward, write_train_log
from .metrics import report_for_records, write_report_json
from .traces import SelectionStrategy, extract_training_example, select, write_jsonl, write_manifest

log = logging.getLogger(__name__)

TRAINERS = ("toy_grpo", "external_command", "none")


@dataclass(frozen=True)
class EvolutionConfig:
    max_iterations: int = 5
    batch_size: int = 32
    stopping_threshold: float = 0.01
    patience: int = 1
    small_model: bool = False
    temp_start: float = 0.7
    temp_end: float = 0.3
    temperature: float = 1.0
    trainer: str = "toy_grpo"
    command: str | None = None
    command_timeout: float | None = None
    strategy: str = "all_traces"
    strategy_k: int | None = None
    evolving_agent_id: int = 1
    seed: int = 0
    parallelism: int = 4

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if not 0 < self.stopping_threshold < 1:
            raise ConfigurationError("stopping_threshold must lie in (0, 1)")
        if self.temp_end > self.temp_start:
            raise ConfigurationError("temp_end must not exceed temp_start")
        if self.trainer not in TRAINERS:
            raise ConfigurationError(f"trainer must be one of {TRAINERS}")
        if self.trainer == "external_command" and not self.command:
            raise ConfigurationError("external_command trainer needs a command template")
        if self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("batch_size and patience must be >= 1")

    def selection(self) -> SelectionStrategy:
        return SelectionStrategy.parse(self.strategy, self.strategy_k, self.seed)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: Mapping) -> EvolutionConfig:
        return cls(**dict(d))


def temperature_for_round(k: int, config: EvolutionConfig) -> float:
    """Sampling temperature of evolution round ``k`` (1-based)."""
    K = config.max_iterations
    if not 1 <= k <= K:
        raise ValueError(f"round {k} outside [1, {K}]")
    if not config.small_model:
        return config.temperature
    t = config.temp_start - (config.temp_start - config.temp_end) * (k - 1) / max(K - 1, 1)
    return max(t, config.temp_end)


def _relative_gain(prev: float, last: float) -> float:
    return (last - prev) / max(abs(prev), 1e-12)


def should_stop(history: Sequence[float], config: EvolutionConfig) -> bool:
    """Stop at the iteration cap, or once ``patience`` consecutive gains fall below the threshold."""
    if len(history) >= config.max_iterations:
        return True
    p = config.patience
    if len(history) < p + 1:
        return False
    gains = [_relative_gain(history[i - 1], history[i]) for i in range(len(history) - p, len(history))]
    return all(g < config.stopping_threshold for g in gains)


# --- toy world -----------------------------------------------------------------


@dataclass(frozen=True)
class ToyWorld:
    """Maps query ids to toy-policy contexts and fixes the nominal output length."""

    labels: tuple[str, ...]
    context_of: Mapping[str, int]
    n_contexts: int
    nominal_length: float | None = 0.0

    def policy_agent(self, agent_id: int, policy: ToyPolicy, temperature: float = 1.0, seed: int = 0) -> AgentConfig:
        return AgentConfig(
            agent_id,
            "policy",
            temperature,
            {"policy": policy.to_dict(), "context_of": dict(self.context_of), "seed": seed},
        )

    def initial_policy(self) -> ToyPolicy:
        return ToyPolicy.uniform(self.n_contexts, self.labels)


def make_toy_world(
    n_train: int = 40, n_validation: int = 20, n_contexts: int = 4, n_labels: int = 4
) -> tuple[ToyWorld, list[Query], list[Query]]:
    """A multiple-choice world where a query's gold label is fixed by its group (context)."""
    labels = tuple("ABCDEFGHIJ"[:n_labels])
    choices = tuple((l, f"option {l}") for l in labels)
    context_of: dict[str, int] = {}

    def make(split: str, n: int) -> list[Query]:
        out = []
        for i in range(n):
            c = i % n_contexts
            qid = f"toy:{split}:{i}"
            context_of[qid] = c
            out.append(Query(qid, f"Which option belongs to group {c}? (item {i})", "commonsense", choices, labels[c % n_labels], "toy"))
        return out

    train, val = make("train", n_train), make("validation", n_validation)
    return ToyWorld(labels, context_of, n_contexts), train, val


def _trace_environment(world: ToyWorld, examples, reward_params: RewardParams) -> TableEnvironment:
    table = np.zeros((world.n_contexts, len(world.labels)))
    counts = np.zeros(world.n_contexts)
    for e in examples:
        c = world.context_of[e.query_id]
        counts[c] += 1
        for a, label in enumerate(world.labels):
            raw = render_policy_output(label)
            table[c, a] += shaped_reward(raw, e.y_star, "commonsense", reward_params, world.nominal_length)
    table /= np.maximum(counts, 1)[:, None]
    return TableEnvironment(table, counts)


# --- validation ------------------------------------------------------------------


def evaluate_validation_reward(
    agent: AgentConfig,
    held_out: Sequence[Query],
    reward_params: RewardParams = RewardParams(),
    *,
    train_ids: Sequence[str] = (),
    length: float | None = None,
) -> float:
    """Mean shaped reward of the agent's single-pass answers on the held-out split."""
    if not held_out:
        raise ConfigurationError("validation split is empty")
    overlap = {q.id for q in held_out} & set(train_ids)
    if overlap:
        raise ConfigurationError(f"validation and training splits share {len(overlap)} ids, e.g. {sorted(overlap)[0]}")
    total = 0.0
    for q in held_out:
        if q.gold_answer is None:
            raise ConfigurationError(f"validation query {q.id} has no gold answer")
        raw = respond(agent, AgentRequest(build_round0_prompt(q), agent.temperature), DebateContext(q, 0))
        total += shaped_reward(raw, q.gold_answer, q.task_kind, reward_params, length)
    return total / len(held_out)


def expected_policy_reward(policy: ToyPolicy, world: ToyWorld, held_out: Sequence[Query], reward_params: RewardParams) -> float:
    """Exact expectation of the validation reward under the policy's sampling distribution."""
    probs = policy.probs()
    total = 0.0
    for q in held_out:
        c = world.context_of[q.id]
        for a, label in enumerate(world.labels):
            total += probs[c, a] * reward_from_parts(label == q.gold_answer, True, world.nominal_length or 0.0, reward_params)
    return total / len(held_out)


# --- the loop ---------------------------------------------------------------------


@dataclass
class EvolutionResult:
    state: EvolutionState
    baseline_reward: float
    policy: ToyPolicy | None = None
    halted: str | None = None
    iteration_dirs: list[Path] = field(default_factory=list)
    kl_evo: list[float] = field(default_factory=list)


def _run_external(command: str, traces_path: Path, iteration: int, timeout: float | None) -> str:
    cmd = command.replace("{traces_path}", str(traces_path)).replace("{iteration}", str(iteration))
    try:
        proc = subprocess.run(shlex.split(cmd), capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise TrainingError(f"trainer command failed to run: {exc}") from exc
    lines = [l for l in proc.stdout.splitlines() if l.strip()]
    if proc.returncode != 0 or len(lines) != 1:
        raise TrainingError(
            f"trainer command exited {proc.returncode} with {len(lines)} output lines: {proc.stderr.strip()[:200]}"
        )
    return lines[0].strip()


def _mean_kl(a: ToyPolicy, b: ToyPolicy) -> float:
    from .kernels import kl_rows_value_grad

    return float(kl_rows_value_grad(a.logits, b.logits)[0].mean())


def run_evolution(
    queries: Sequence[Query],
    validation: Sequence[Query],
    pool: Sequence[AgentConfig],
    debate_config: DebateConfig,
    config: EvolutionConfig,
    reward_params: RewardParams = RewardParams(),
    grpo_params: GrpoParams = GrpoParams(),
    *,
    output_dir: str | Path,
    world: ToyWorld | None = None,
) -> EvolutionResult:
    """Iterate debate, trace extraction, training and pool replacement until the stopping rule fires.

    Artifacts of iteration k land in ``output_dir/iter_k`` only once that
    iteration completes. A trainer failure stops the loop and returns the state
    of the last completed iteration.
    """
    if not queries:
        raise ConfigurationError("no training queries")
    pool = list(pool)
    check_pool(pool)
    ids = [a.agent_id for a in pool]
    if config.evolving_agent_id not in ids:
        raise ConfigurationError(f"evolving agent {config.evolving_agent_id} not in pool {ids}")
    slot = ids.index(config.evolving_agent_id)
    train_ids = [q.id for q in queries]
    if config.trainer == "toy_grpo":
        if world is None or pool[slot].backend != "policy":
            raise ConfigurationError("toy_grpo needs a toy world and a policy-backed evolving agent")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    length = world.nominal_length if world is not None else None

    def validate_agent(agent: AgentConfig) -> float:
        return evaluate_validation_reward(agent, validation, reward_params, train_ids=train_ids, length=length)

    policy = ToyPolicy.from_dict(pool[slot].backend_params["policy"]) if pool[slot].backend == "policy" else None
    ref_policy = policy
    baseline = validate_agent(pool[slot])
    rng = np.random.default_rng(config.seed)
    state = EvolutionState(0, config.max_iterations, tuple(pool))
    result = EvolutionResult(state, baseline, policy)
    history: list[float] = []
    trace_sets: list[str] = []
    (out / "baseline.json").write_text(json.dumps({"validation_reward": baseline}) + "\n")

    for k in range(1, config.max_iterations + 1):
        final_dir = out / f"iter_{k}"
        work = out / f"iter_{k}.partial"
        shutil.rmtree(work, ignore_errors=True)
        work.mkdir()
        batch_idx = rng.choice(len(queries), size=min(config.batch_size, len(queries)), replace=False)
        batch = [queries[i] for i in batch_idx]
        agents_k = with_temperature(pool, temperature_for_round(k, config)) if config.small_model else pool
        outcomes = run_debates(batch, agents_k, debate_config, config.parallelism)
        records = [o for o in outcomes if isinstance(o, DebateRecord)]
        failures = [o for o in outcomes if isinstance(o, DebateFailure)]
        if failures and not records:
            shutil.rmtree(work, ignore_errors=True)
            raise TransportError(f"every debate of iteration {k} failed: {failures[0].error}")
        examples = [e for e in (extract_training_example(r, reward_params) for r in records) if e is not None]
        selected = select(examples, config.selection())
        write_jsonl(records, work / "records.jsonl")
        write_jsonl(failures, work / "failures.jsonl")
        traces_path = work / "traces.jsonl"
        write_jsonl(selected, traces_path)
        write_report_json(report_for_records(records), work / "report.json")
        write_manifest(
            work / "manifest.json",
            dataset=batch[0].dataset,
            agent_pool=agents_k,
            config={"debate": debate_config.to_dict(), "evolution": config.to_dict(), "iteration": k},
            counts={"queries": len(batch), "records": len(records), "failures": len(failures),
                    "examples": len(examples), "selected": len(selected)},
        )

        old = pool[slot]
        new = old
        try:
            if config.trainer == "toy_grpo" and selected:
                env = _trace_environment(world, selected, reward_params)
                trained, train_log = grpo_train(policy, ref_policy, env, replace(grpo_params, seed=grpo_params.seed + k))
                write_train_log(train_log, work / "train_log.csv")
                trained.save(work / "policy.json")
                result.kl_evo.append(_mean_kl(trained, policy))
                policy = trained
                new = replace(old, backend_params={**old.backend_params, "policy": policy.to_dict()})
            elif config.trainer == "external_command":
                identifier = _run_external(config.command, traces_path.resolve(), k, config.command_timeout)
                new = replace(old, backend="http", backend_params={**old.backend_params, "model": identifier})
        except TrainingError as exc:
            log.error("iteration %d: trainer failed: %s", k, exc)
            shutil.rmtree(work, ignore_errors=True)
            result.halted = str(exc)
            return result

        pool[slot] = new
        reward = validate_agent(new)
        history.append(reward)
        trace_sets.append(f"{final_dir.name}/traces.jsonl")  # relative to output_dir
        state = EvolutionState(k, config.max_iterations, tuple(pool), tuple(history), tuple(trace_sets))
        (work / "state.json").write_text(json.dumps(state.to_dict(), sort_keys=True, indent=2) + "\n")
        shutil.rmtree(final_dir, ignore_errors=True)
        work.rename(final_dir)
        result.state, result.policy = state, policy
        result.iteration_dirs.append(final_dir)
        log.info("iteration %d: validation reward %.6f", k, reward)
        if should_stop(history, config):
            break
    return result
