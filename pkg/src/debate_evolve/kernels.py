"""Hot numeric loops: the clipped surrogate, the exact categorical KL, and vote tallying.

Each kernel exists twice. ``*_nb`` is an explicit-loop version compiled with
numba; ``*_np`` is the vectorized numpy fallback. The public functions pick one
according to ``backend`` (default: numba when available). Both must agree to
floating-point round-off; ``tests/test_kernels.py`` checks that.
"""

from __future__ import annotations

import math

import numpy as np

from . import _accel
from ._accel import njit


def _resolve(backend: str | None) -> str:
    if backend is None:
        return "numba" if _accel.USE_NUMBA else "numpy"
    if backend == "numba" and not _accel.HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {backend!r}")
    return backend


# --- clipped surrogate -------------------------------------------------------


def _surrogate_np(logits, ctx, act, adv, lp_old, eps):
    b = ctx.shape[0]
    z = logits[ctx]
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(b)
    lp = z[rows, act] - lse
    rho = np.exp(lp - lp_old)
    unclipped = rho * adv
    clipped = np.clip(rho, 1.0 - eps, 1.0 + eps) * adv
    values = np.minimum(unclipped, clipped)
    coef = np.where(unclipped <= clipped, adv * rho, 0.0) / b
    p = np.exp(z - lse[:, None])
    g = -coef[:, None] * p
    g[rows, act] += coef
    grad = np.zeros_like(logits)
    np.add.at(grad, ctx, g)
    return values.mean(), grad


@njit
def _surrogate_nb(logits, ctx, act, adv, lp_old, eps):
    b = ctx.shape[0]
    n_act = logits.shape[1]
    grad = np.zeros_like(logits)
    total = 0.0
    for i in range(b):
        x = ctx[i]
        m = logits[x, 0]
        for j in range(1, n_act):
            if logits[x, j] > m:
                m = logits[x, j]
        s = 0.0
        for j in range(n_act):
            s += math.exp(logits[x, j] - m)
        lse = m + math.log(s)
        rho = math.exp(logits[x, act[i]] - lse - lp_old[i])
        unclipped = rho * adv[i]
        c = min(max(rho, 1.0 - eps), 1.0 + eps)
        clipped = c * adv[i]
        if unclipped <= clipped:
            total += unclipped
            coef = adv[i] * rho / b
            for j in range(n_act):
                grad[x, j] -= coef * math.exp(logits[x, j] - lse)
            grad[x, act[i]] += coef
        else:
            total += clipped
    return total / b, grad


def surrogate_value_grad(logits, ctx, act, adv, lp_old, eps, backend=None):
    """Mean of min(rho*A, clip(rho)*A) over the batch and its gradient w.r.t. the logits."""
    args = (
        np.ascontiguousarray(logits, dtype=np.float64),
        np.ascontiguousarray(ctx, dtype=np.int64),
        np.ascontiguousarray(act, dtype=np.int64),
        np.ascontiguousarray(adv, dtype=np.float64),
        np.ascontiguousarray(lp_old, dtype=np.float64),
        float(eps),
    )
    if _resolve(backend) == "numba":
        value, grad = _surrogate_nb(*args)
        return float(value), grad
    value, grad = _surrogate_np(*args)
    return float(value), grad


# --- exact KL between categorical rows ---------------------------------------


def _kl_rows_np(logits, ref_logits):
    def log_softmax(z):
        m = z.max(axis=1, keepdims=True)
        return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))

    lp = log_softmax(logits)
    lq = log_softmax(ref_logits)
    p = np.exp(lp)
    kl = (p * (lp - lq)).sum(axis=1)
    grad = p * (lp - lq - kl[:, None])
    return kl, grad


@njit
def _kl_rows_nb(logits, ref_logits):
    n_ctx, n_act = logits.shape
    kl = np.zeros(n_ctx)
    grad = np.zeros_like(logits)
    lp = np.empty(n_act)
    lq = np.empty(n_act)
    for x in range(n_ctx):
        mp = logits[x, 0]
        mq = ref_logits[x, 0]
        for j in range(1, n_act):
            mp = max(mp, logits[x, j])
            mq = max(mq, ref_logits[x, j])
        sp = 0.0
        sq = 0.0
        for j in range(n_act):
            sp += math.exp(logits[x, j] - mp)
            sq += math.exp(ref_logits[x, j] - mq)
        for j in range(n_act):
            lp[j] = logits[x, j] - mp - math.log(sp)
            lq[j] = ref_logits[x, j] - mq - math.log(sq)
        k = 0.0
        for j in range(n_act):
            k += math.exp(lp[j]) * (lp[j] - lq[j])
        kl[x] = k
        for j in range(n_act):
            grad[x, j] = math.exp(lp[j]) * (lp[j] - lq[j] - k)
    return kl, grad


def kl_rows_value_grad(logits, ref_logits, backend=None):
    """Per-row KL(softmax(logits) || softmax(ref_logits)) and its gradient w.r.t. logits."""
    a = np.ascontiguousarray(logits, dtype=np.float64)
    b = np.ascontiguousarray(ref_logits, dtype=np.float64)
    if _resolve(backend) == "numba":
        return _kl_rows_nb(a, b)
    return _kl_rows_np(a, b)


# --- vote tallying for the simulator -----------------------------------------


def _majority_correct_np(correct):
    n = correct.shape[1]
    return (correct.sum(axis=1) * 2 > n).mean()


@njit
def _majority_correct_nb(correct):
    trials, n = correct.shape
    hits = 0
    for i in range(trials):
        c = 0
        for j in range(n):
            c += correct[i, j]
        if 2 * c > n:
            hits += 1
    return hits / trials


def majority_correct_rate(correct, backend=None) -> float:
    """Fraction of rows (trials) in a 0/1 matrix whose correct votes form a strict majority."""
    arr = np.ascontiguousarray(correct, dtype=np.int64)
    if _resolve(backend) == "numba":
        return float(_majority_correct_nb(arr))
    return float(_majority_correct_np(arr))


def simulate_majority_accuracy(p: float, n_agents: int, trials: int, seed: int = 0, backend=None) -> float:
    """Monte Carlo estimate of independent-vote majority accuracy."""
    rng = np.random.default_rng(seed)
    correct = rng.random((trials, n_agents)) < p
    return majority_correct_rate(correct, backend=backend)
