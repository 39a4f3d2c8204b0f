"""Shaped reward, the clipped GRPO objective with a KL anchor, and a toy trainer.

The toy policy is a table of logits, one softmax row per context. It is small
enough that the KL term is computed exactly over the support and the analytic
gradient can be checked against finite differences.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .domain import GrpoParams, RewardParams
from .errors import TrainingError
from .extract import answers_equal, extract_answer, extract_xml, token_count
from .kernels import kl_rows_value_grad, surrogate_value_grad


def reward_from_parts(correct: bool, format_ok: bool, length: float, params: RewardParams) -> float:
    return (
        params.w_vote * float(correct)
        + params.w_fmt * float(format_ok)
        + params.w_brev * math.exp(-length / params.tau)
    )


def shaped_reward(
    raw_output: str,
    y_star: str,
    task_kind: str,
    params: RewardParams = RewardParams(),
    length: float | None = None,
) -> float:
    """Vote match + format compliance + brevity bonus of one model output.

    ``length`` overrides the whitespace token count of ``raw_output``; the toy
    environment uses it to give its one-word outputs a nominal length.
    """
    answer = extract_answer(raw_output, task_kind)
    correct = bool(answer) and answers_equal(answer, y_star, task_kind)
    n = token_count(raw_output) if length is None else length
    return reward_from_parts(correct, extract_xml(raw_output).format_ok, n, params)


# --- toy policy --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ToyPolicy:
    logits: np.ndarray
    action_labels: tuple[str, ...]

    def __post_init__(self):
        logits = np.array(self.logits, dtype=np.float64)
        if logits.ndim != 2:
            raise ValueError("logits must be a matrix [n_contexts x n_actions]")
        if logits.shape[1] < 2:
            raise ValueError("a toy policy needs at least two actions")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        labels = tuple(str(l) for l in self.action_labels)
        if len(labels) != logits.shape[1]:
            raise ValueError("one action label per logit column")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "action_labels", labels)

    @classmethod
    def uniform(cls, n_contexts: int, labels: Sequence[str]) -> ToyPolicy:
        return cls(np.zeros((n_contexts, len(labels))), tuple(labels))

    @property
    def n_contexts(self) -> int:
        return self.logits.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logits.shape[1]

    def probs(self, temperature: float = 1.0) -> np.ndarray:
        return softmax(self.logits, temperature)

    def sample(self, x: int, rng: np.random.Generator, temperature: float = 1.0) -> int:
        """Draw an action index; temperature 0 is greedy (lowest index on ties)."""
        if temperature == 0:
            return int(np.argmax(self.logits[x]))
        p = softmax(self.logits[x : x + 1], temperature)[0]
        return int(rng.choice(self.n_actions, p=p))

    def __eq__(self, other):
        if not isinstance(other, ToyPolicy):
            return NotImplemented
        return self.action_labels == other.action_labels and np.array_equal(self.logits, other.logits)

    def to_dict(self) -> dict:
        return {"logits": self.logits.tolist(), "action_labels": list(self.action_labels)}

    @classmethod
    def from_dict(cls, d) -> ToyPolicy:
        return cls(np.array(d["logits"], dtype=np.float64), tuple(d["action_labels"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")))

    @classmethod
    def load(cls, path: str | Path) -> ToyPolicy:
        return cls.from_dict(json.loads(Path(path).read_text()))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def log_prob(policy: ToyPolicy, x: int, y: int) -> float:
    if not (0 <= x < policy.n_contexts and 0 <= y < policy.n_actions):
        raise ValueError(f"(context, action) = ({x}, {y}) out of range")
    row = policy.logits[x]
    m = row.max()
    return float(row[y] - m - math.log(np.exp(row - m).sum()))


# --- objective -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Entries (context, action, reward, log-prob under the step-start policy)."""

    contexts: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    logprob_old: np.ndarray

    def __post_init__(self):
        arrays = [
            np.asarray(self.contexts, dtype=np.int64),
            np.asarray(self.actions, dtype=np.int64),
            np.asarray(self.rewards, dtype=np.float64),
            np.asarray(self.logprob_old, dtype=np.float64),
        ]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise ValueError("batch columns must be 1-d and of equal length")
        if arrays[0].size == 0:
            raise ValueError("batch must be non-empty")
        if np.any(arrays[3] > 0) or not np.all(np.isfinite(arrays[2])):
            raise ValueError("logprob_old must be <= 0 and rewards finite")
        for name, a in zip(("contexts", "actions", "rewards", "logprob_old"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return self.contexts.shape[0]


def _check_shapes(policy: ToyPolicy, ref_policy: ToyPolicy, batch: SampleBatch) -> None:
    if policy.logits.shape != ref_policy.logits.shape:
        raise ValueError(f"policy shape {policy.logits.shape} != reference shape {ref_policy.logits.shape}")
    if batch.contexts.min() < 0 or batch.contexts.max() >= policy.n_contexts:
        raise ValueError("batch context index out of range")
    if batch.actions.min() < 0 or batch.actions.max() >= policy.n_actions:
        raise ValueError("batch action index out of range")


def _objective_and_grad(logits, ref_logits, batch: SampleBatch, rewards, params: GrpoParams, backend=None):
    surr, g_surr = surrogate_value_grad(
        logits, batch.contexts, batch.actions, rewards, batch.logprob_old, params.epsilon, backend=backend
    )
    kl, g_kl = kl_rows_value_grad(logits, ref_logits, backend=backend)
    weights = np.bincount(batch.contexts, minlength=logits.shape[0]) / len(batch)
    value = surr - params.beta * float(weights @ kl)
    grad = g_surr - params.beta * weights[:, None] * g_kl
    return value, grad, float(weights @ kl)


def grpo_objective(policy: ToyPolicy, ref_policy: ToyPolicy, batch: SampleBatch, params: GrpoParams) -> float:
    """Batch mean of min(rho*r, clip(rho, 1-eps, 1+eps)*r) minus beta * mean KL to the reference."""
    _check_shapes(policy, ref_policy, batch)
    value, _, _ = _objective_and_grad(policy.logits, ref_policy.logits, batch, batch.rewards, params)
    return value


def grpo_objective_and_grad(
    policy: ToyPolicy, ref_policy: ToyPolicy, batch: SampleBatch, params: GrpoParams, backend=None
) -> tuple[float, np.ndarray]:
    _check_shapes(policy, ref_policy, batch)
    value, grad, _ = _objective_and_grad(policy.logits, ref_policy.logits, batch, batch.rewards, params, backend)
    return value, grad


# --- training ------------------------------------------------------------------


class Environment(Protocol):
    n_contexts: int

    def sample_contexts(self, rng: np.random.Generator, n: int) -> np.ndarray: ...

    def rewards(self, contexts: np.ndarray, actions: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class TableEnvironment:
    """Rewards looked up in a [context x action] table; contexts drawn uniformly or by weight."""

    table: np.ndarray
    context_weights: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "table", np.asarray(self.table, dtype=np.float64))
        if self.context_weights is not None:
            w = np.asarray(self.context_weights, dtype=np.float64)
            object.__setattr__(self, "context_weights", w / w.sum())

    @property
    def n_contexts(self) -> int:
        return self.table.shape[0]

    def sample_contexts(self, rng, n):
        return rng.choice(self.n_contexts, size=n, p=self.context_weights)

    def rewards(self, contexts, actions):
        return self.table[contexts, actions]


@dataclass
class _Adam:
    lr: float
    b1: float = 0.9
    b2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def ascend(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return theta + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class _Sgd:
    lr: float

    def ascend(self, theta, grad):
        return theta + self.lr * grad


@dataclass(frozen=True)
class TrainLogRow:
    step: int
    objective: float
    mean_reward: float
    mean_kl: float


def grpo_train(
    policy: ToyPolicy,
    ref_policy: ToyPolicy,
    env: Environment,
    params: GrpoParams,
    backend: str | None = None,
) -> tuple[ToyPolicy, list[TrainLogRow]]:
    """Run ``params.steps`` sample-then-ascend steps and return the policy plus a per-step log.

    Each step samples ``contexts_per_step`` contexts, ``group_size`` actions for
    each from the step-start policy, and freezes their log-probs as the ratio
    denominator. The surrogate's gradient is the score-function (REINFORCE)
    form ``rho * A * grad log pi``; the KL gradient is exact.
    """
    if policy.logits.shape != ref_policy.logits.shape:
        raise ValueError("policy and reference shapes differ")
    if env.n_contexts != policy.n_contexts:
        raise ValueError("environment and policy disagree on the number of contexts")
    rng = np.random.default_rng(params.seed)
    theta = policy.logits.copy()
    ref = ref_policy.logits
    opt = _Adam(params.learning_rate) if params.optimizer == "adam" else _Sgd(params.learning_rate)
    baseline = np.zeros(policy.n_contexts)
    seen = np.zeros(policy.n_contexts)
    log: list[TrainLogRow] = []

    for step in range(params.steps):
        ctx = np.repeat(env.sample_contexts(rng, params.contexts_per_step), params.group_size)
        probs = softmax(theta[ctx])
        u = rng.random(ctx.shape[0])
        act = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), policy.n_actions - 1)
        r = np.asarray(env.rewards(ctx, act), dtype=np.float64)
        lp_old = log_softmax(theta[ctx])[np.arange(ctx.shape[0]), act]
        batch = SampleBatch(ctx, act, r, np.minimum(lp_old, 0.0))

        if params.baseline == "running_mean":
            adv = r - baseline[ctx]
            for x in np.unique(ctx):
                mask = ctx == x
                k = mask.sum()
                baseline[x] += (r[mask].sum() - k * baseline[x]) / (seen[x] + k)
                seen[x] += k
        elif params.baseline == "group_mean":
            groups = np.arange(ctx.shape[0]) // params.group_size
            means = np.bincount(groups, weights=r) / params.group_size
            adv = r - means[groups]
        else:
            adv = r

        objective, _, mean_kl = _objective_and_grad(theta, ref, batch, r, params, backend)
        log.append(TrainLogRow(step, objective, float(r.mean()), mean_kl))
        for _ in range(params.inner_epochs):
            _, grad, _ = _objective_and_grad(theta, ref, batch, adv, params, backend)
            if not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite gradient at step {step}")
            theta = opt.ascend(theta, grad)
        if not np.all(np.isfinite(theta)):
            raise TrainingError(f"non-finite parameters after step {step}")

    return ToyPolicy(theta, policy.action_labels), log


def write_train_log(rows: Sequence[TrainLogRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "objective", "mean_reward", "mean_kl"])
        for row in rows:
            w.writerow([row.step, repr(row.objective), repr(row.mean_reward), repr(row.mean_kl)])


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    """Max over contexts of half the L1 distance between probability rows."""
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1).max())
