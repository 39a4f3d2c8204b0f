"""One test per acceptance criterion; each records a PASS/FAIL line printed at session end."""

import math
import time

import numpy as np
import pytest

from debate_evolve.agents import estimate_majority_accuracy, probabilistic_pool
from debate_evolve.debate import DebateConfig, build_rcr_prompt, run_debate
from debate_evolve.domain import AgentTurn, GrpoParams, Query, RewardParams, TrainingExample, canonical_json
from debate_evolve.dte import EvolutionConfig, run_evolution, should_stop
from debate_evolve.grpo import (
    SampleBatch,
    TableEnvironment,
    ToyPolicy,
    grpo_objective,
    grpo_objective_and_grad,
    grpo_train,
    reward_from_parts,
    shaped_reward,
    total_variation,
)
from debate_evolve.metrics import forgetting, kl_categorical, score_record
from debate_evolve.traces import SelectionStrategy, select

from oracles import fuzzed_pool, rescan, reward_oracle
from scenarios import MATH_Q, consensus_at_0, converge_at_1, never_converge, toy_evolution_setup
from test_grpo import fd_gradient, random_instance


@pytest.fixture(scope="module", autouse=True)
def warm_kernels():
    # compile the numba kernels outside the timed sections
    pol, ref, batch = random_instance(0)
    grpo_objective_and_grad(pol, ref, batch, GrpoParams())
    grpo_train(ToyPolicy.uniform(1, ("a", "b")), ToyPolicy.uniform(1, ("a", "b")), TableEnvironment([[1.0, 0.0]]), GrpoParams(steps=1))


def test_01_reward_exactness(acceptance):
    start = time.perf_counter()
    formatted = shaped_reward("<reasoning></reasoning>\n<answer>4</answer>", "4", "math", RewardParams(), length=0)
    plain = reward_from_parts(True, False, 120, RewardParams())
    elapsed = time.perf_counter() - start
    err1 = abs(formatted - float(reward_oracle(True, True, 0)))
    err2 = abs(plain - float(reward_oracle(True, False, 120)))
    ok = formatted == pytest.approx(3.0, abs=1e-9) and err1 <= 1e-9 and err2 <= 1e-9 and elapsed < 1e-3
    acceptance("01 reward exactness", ok, f"3.0 err={err1:.1e}, 2+0.5/e err={err2:.1e}, {elapsed * 1e6:.0f} us")


def test_02_gradient_check(acceptance):
    params = GrpoParams(beta=0.3)
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        pol, ref, batch = random_instance(seed, n_ctx=3, n_act=4)
        _, grad = grpo_objective_and_grad(pol, ref, batch, params)
        fd = fd_gradient(pol, ref, batch, params, h=1e-5)
        worst = max(worst, np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), np.linalg.norm(grad), 1e-12))
    elapsed = time.perf_counter() - start
    acceptance("02 GRPO gradient check", worst <= 1e-4 and elapsed < 1.0, f"max rel err {worst:.2e}, {elapsed:.3f} s")


def test_03_clipping_semantics(acceptance):
    pol = ToyPolicy.uniform(1, ("a", "b"))
    lp = math.log(0.5)

    def value(rho, r):
        batch = SampleBatch([0], [0], [r], [lp - math.log(rho)])
        return grpo_objective(pol, pol, batch, GrpoParams(epsilon=0.2, beta=0.0))

    got = (value(1.5, 1.0), value(0.5, -1.0), value(1.0, 0.37))
    ok = got == (1.2, -0.8, 0.37)
    acceptance("03 clipping semantics", ok, f"got {got}")


def test_04_kl_properties(acceptance):
    rng = np.random.default_rng(0)
    self_kl = []
    negatives = 0
    for _ in range(100):
        k = int(rng.integers(2, 8))
        p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        self_kl.append(kl_categorical(p, p))
        negatives += kl_categorical(p, q) < 0
    ln2_err = abs(kl_categorical([1, 0], [0.5, 0.5]) - math.log(2))
    ok = max(self_kl) <= 1e-12 and negatives == 0 and ln2_err <= 1e-9
    acceptance("04 KL properties", ok, f"max KL(p,p)={max(self_kl):.1e}, negatives={negatives}, ln2 err={ln2_err:.1e}")


def test_05_toy_bandit(acceptance):
    env = TableEnvironment(np.array([[1.0, 0.0]]))
    ref = ToyPolicy.uniform(1, ("best", "other"))
    start = time.perf_counter()
    free, _ = grpo_train(ref, ref, env, GrpoParams(steps=200, learning_rate=0.1, beta=0.0, seed=3))
    anchored, _ = grpo_train(ref, ref, env, GrpoParams(steps=200, learning_rate=0.1, beta=100.0, seed=3))
    elapsed = time.perf_counter() - start
    p_best = free.probs()[0, 0]
    tv = total_variation(anchored.probs(), ref.probs())
    ok = p_best > 0.9 and tv <= 0.05 and elapsed < 5.0
    acceptance("05 toy bandit convergence", ok, f"p(best)={p_best:.4f}, TV(beta=100)={tv:.4f}, {elapsed:.2f} s")


def test_06_debate_protocol(acceptance):
    details = []
    ok = True
    for make in (consensus_at_0, converge_at_1, never_converge):
        agents, expected = make()
        record = run_debate(MATH_Q, agents, DebateConfig(max_rounds=5))
        same = canonical_json(record.to_dict()) == canonical_json(expected.to_dict())
        ok &= same
        details.append(f"{make.__name__}={'ok' if same else 'DIFF'}({record.termination.kind}, {len(record.rounds)} rounds)")
    acceptance("06 debate protocol", ok, "; ".join(details))


def test_07_metrics_oracle(acceptance):
    mismatches = 0
    for seed in range(50):
        record = run_debate(MATH_Q, fuzzed_pool(seed), DebateConfig(max_rounds=5))
        m = score_record(record, "4")
        mismatches += (m.transitions.c_to_i, m.transitions.i_to_c, m.sycophancy_events) != rescan(record, "4")
    rounds = syc = 0
    # temperature 0 on every agent: the "both deterministic" configuration
    agents = probabilistic_pool(3, p_correct=0.5, temperature=0.0, seed=1)
    for i in range(50):
        m = score_record(run_debate(Query(f"d{i}", "x", "math", gold_answer="4"), agents), "4")
        rounds += m.debate_rounds
        syc += m.sycophancy_events
    ok = mismatches == 0 and rounds == 0 and syc == 0
    acceptance("07 metrics oracle", ok, f"{mismatches} mismatches over 50 fuzzed debates; deterministic rounds={rounds}, sycophancy={syc}")


def _round0(agents, n, seed_prefix):
    from debate_evolve.agents import AgentRequest, DebateContext, respond
    from debate_evolve.extract import extract_answer

    for i in range(n):
        q = Query(f"{seed_prefix}{i}", "x", "math", gold_answer="7")
        yield [
            AgentTurn(a.agent_id, 0, extract_answer(respond(a, AgentRequest("p"), DebateContext(q, 0)), "math"), "", "")
            for a in agents
        ]


def test_08_simulation_sanity(acceptance):
    from debate_evolve.voting import majority_vote

    # the closed form is the chance that a strict majority answers correctly; with a
    # binary answer space the plurality vote measures the same event
    start = time.perf_counter()
    agents = probabilistic_pool(3, p_correct=0.7, sycophancy=0.0, temperature=1.0, seed=2024)
    strict = sum(2 * sum(t.answer == "7" for t in turns) > 3 for turns in _round0(agents, 10_000, "sim")) / 10_000
    binary = probabilistic_pool(3, p_correct=0.7, temperature=1.0, seed=2024, answer_space=["7", "8"])
    vote = sum(majority_vote(turns, "math") == "7" for turns in _round0(binary, 10_000, "bin")) / 10_000
    elapsed = time.perf_counter() - start
    target = estimate_majority_accuracy(0.7, 3)
    ok = abs(strict - target) <= 0.02 and abs(vote - target) <= 0.02 and abs(target - 0.784) < 1e-12 and elapsed < 30
    acceptance(
        "08 simulation sanity",
        ok,
        f"strict majority {strict:.4f}, binary-space vote {vote:.4f} vs analytic {target:.3f}, {elapsed:.1f} s",
    )


def _evolve(tmp_path, name, trainer):
    world, train, val, pool = toy_evolution_setup()
    cfg = EvolutionConfig(trainer=trainer, batch_size=16, parallelism=1)
    return run_evolution(
        train, val, pool, DebateConfig(max_rounds=2), cfg, RewardParams(), GrpoParams(steps=200), output_dir=tmp_path / name, world=world
    )


def test_09_evolution_loop(acceptance, tmp_path):
    toy = _evolve(tmp_path, "toy", "toy_grpo")
    again = _evolve(tmp_path, "again", "toy_grpo")
    none = _evolve(tmp_path, "none", "none")
    hist = toy.state.validation_reward_history
    files = sorted(p.relative_to(tmp_path / "toy") for p in (tmp_path / "toy").rglob("*") if p.is_file())
    identical = all((tmp_path / "toy" / f).read_bytes() == (tmp_path / "again" / f).read_bytes() for f in files)
    ok = (
        hist[0] > toy.baseline_reward
        and toy.state.iteration <= 5
        and should_stop(hist, EvolutionConfig())
        and none.state.iteration == 2
        and identical
        and toy.state == again.state
    )
    acceptance(
        "09 evolution loop",
        ok,
        f"baseline {toy.baseline_reward:.3f} -> {[round(float(h), 3) for h in hist]}, stop at {toy.state.iteration}; "
        f"trainer=none stops at {none.state.iteration}; reproducible={identical}",
    )


def test_10_selection_strategies(acceptance):
    rng = np.random.default_rng(5)
    rounds = rng.integers(0, 4, size=10_552)
    pool = [TrainingExample(f"p{i}", "x", "1", "r", int(r), 1.0) for i, r in enumerate(rounds)]
    everything = select(pool, SelectionStrategy("all_traces"))
    debate_only = select(pool, SelectionStrategy("debate_only"))
    s = SelectionStrategy("random_k", k=2000, seed=17)
    a, b = select(pool, s), select(pool, s)
    ids = {e.query_id for e in everything}
    ok = (
        len(everything) == 10_552
        and {e.query_id for e in debate_only} <= ids
        and len(debate_only) == int((rounds >= 1).sum())
        and a == b
        and len(a) == 2000
        and len({e.query_id for e in a}) == 2000
        and len(select(pool[:3], SelectionStrategy("random_k", k=5))) == 3
    )
    acceptance("10 selection strategies", ok, f"all={len(everything)}, debate_only={len(debate_only)}, random_k=2000 stable={a == b}")


def test_11_prompt_fidelity(acceptance):
    own = AgentTurn(1, 0, "4", "Two and two make four.", "", True)
    peers = [AgentTurn(2, 0, "5", "I added one extra.", "", True), AgentTurn(3, 0, "4", "Count on fingers.", "", True)]
    expected = (
        "You are Agent 1 in a multi-agent debate to solve the following math problem:\n\n"
        "Problem: What is 2+2?\n\n"
        "Your previous answer: 4\nYour previous reasoning: Two and two make four.\n\n"
        "Here are the solutions from other agents:\n"
        "Agent 2 answer: 5\nAgent 2 reasoning: I added one extra.\n\n"
        "Agent 3 answer: 4\nAgent 3 reasoning: Count on fingers.\n\n"
        "This is debate round 1. Please carefully analyze all solutions—including your own—identify any "
        "errors in reasoning, and provide your revised solution.\n\n"
        "- If you believe your previous answer is correct, explain why and defend it.\n"
        "- If you believe you made an error, explain the error and provide a corrected solution.\n"
        "- If you believe another agent's answer is correct, explain why you agree with it.\n\n"
        "Your final answer must be in the format \\boxed{answer} at the end."
    )
    got = build_rcr_prompt(MATH_Q, 1, own, peers, 1)
    acceptance("11 prompt fidelity", got == expected, f"{len(got)} chars, byte-equal={got == expected}")


def test_12_forgetting(acceptance):
    value = forgetting([62.8, 73.1, 72.2])
    acceptance("12 forgetting formula", abs(value - 0.9) <= 1e-9, f"{value:.12f}")
