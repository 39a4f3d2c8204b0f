import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from debate_evolve.agents import mock_agent, probabilistic_pool
from debate_evolve.debate import DebateConfig, run_debate
from debate_evolve.domain import REPORT_FIELDS, AgentTurn, DebateRecord, MetricsReport, Query, Termination
from debate_evolve.errors import DivergenceError
from debate_evolve.metrics import (
    RecordMetrics,
    TransitionCounts,
    aggregate,
    forgetting,
    kl_categorical,
    read_reports,
    score_record,
    verbosity_gap,
    write_report_json,
    write_reports_csv,
)

from oracles import fuzzed_pool, rescan
from scenarios import MATH_Q, consensus_at_0


def test_sycophancy_example():
    a = mock_agent(1, {"q1": ["Two and two. \\boxed{4}"] * 2})
    b = mock_agent(2, {"q1": ["Count up. \\boxed{4}", "Multiply them. \\boxed{7}"]})
    c = mock_agent(3, {"q1": ["Multiply them. \\boxed{7}"] * 2})
    record = run_debate(MATH_Q, [a, b, c], DebateConfig(max_rounds=1))
    m = score_record(record, "4")
    assert m.sycophancy_events == 1
    assert m.transitions == TransitionCounts(c_to_i=1, i_to_c=0)


def test_consensus_at_0_is_quiet():
    _, record = consensus_at_0()
    m = score_record(record, "4")
    assert (m.transitions, m.sycophancy_events, m.debate_rounds) == (TransitionCounts(0, 0), 0, 0)


def test_debate_helped_example():
    t = lambda i, r, a: AgentTurn(i, r, a, "x.", "x.", True)
    r0 = [t(1, 0, "7"), t(2, 0, "7"), t(3, 0, "4")]
    r1 = [t(1, 1, "4"), t(2, 1, "4"), t(3, 1, "4")]
    record = DebateRecord(MATH_Q, [r0, r1], "4", Termination.consensus(1), 3, 5)
    assert score_record(record, "4").debate_helped is True
    # a round-0 majority that is already right does not count as help
    r0b = [t(1, 0, "4"), t(2, 0, "4"), t(3, 0, "7")]
    assert score_record(DebateRecord(MATH_Q, [r0b, r1], "4", Termination.consensus(1), 3, 5), "4").debate_helped is False


@pytest.mark.parametrize("seed", range(30))
def test_score_matches_rescan(seed):
    record = run_debate(MATH_Q, fuzzed_pool(seed), DebateConfig(max_rounds=5))
    m = score_record(record, "4")
    assert (m.transitions.c_to_i, m.transitions.i_to_c, m.sycophancy_events) == rescan(record, "4")
    # net transitions equal the change in correct agents
    correct = lambda rnd: sum(x.answer == "4" for x in rnd)
    assert m.transitions.i_to_c - m.transitions.c_to_i == correct(record.rounds[-1]) - correct(record.rounds[0])
    if len(record.rounds) == 1:
        assert m.sycophancy_events == 0


def test_single_agent_has_no_sycophancy():
    record = run_debate(MATH_Q, [mock_agent(1, {"q1": "Just guess. \\boxed{7}"})])
    assert score_record(record, "4").sycophancy_events == 0


def test_deterministic_agents_never_debate():
    agents = probabilistic_pool(3, p_correct=0.5, temperature=0.0, seed=3)
    total_rounds = total_syc = 0
    for i in range(50):
        q = Query(f"d{i}", "x", "math", gold_answer="4")
        m = score_record(run_debate(q, agents), "4")
        total_rounds += m.debate_rounds
        total_syc += m.sycophancy_events
    assert (total_rounds, total_syc) == (0, 0)


def _rm(correct=False, rounds=0, c2i=0, i2c=0, syc=0, helped=False):
    return RecordMetrics(correct, rounds, TransitionCounts(c2i, i2c), syc, helped)


def test_aggregate_examples():
    assert aggregate([_rm(True), _rm(False)], 2).accuracy == 0.5
    # 369 events spread across 1319 queries
    items = [_rm(syc=1 if i < 369 else 0) for i in range(1319)]
    assert aggregate(items, 1319).sycophancy_per_query == pytest.approx(0.28, abs=0.005)
    zero = aggregate([_rm() for _ in range(4)], 4)
    assert zero == MetricsReport(0.0, 0.0, 0.0, 0.0, 0, 0, 0, 4)
    r = aggregate([_rm(True, 2, 1, 2, 1, True)], 1, baseline_accuracy=0.25)
    assert r.delta_vs_baseline == 0.75 and r.avg_debate_rounds == 2.0


record_metrics = st.builds(
    _rm, st.booleans(), st.integers(0, 5), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.booleans()
)


@given(st.lists(record_metrics, min_size=1, max_size=12), st.randoms())
def test_aggregate_order_invariant(items, rnd):
    shuffled = list(items)
    rnd.shuffle(shuffled)
    a, b = aggregate(items, len(items)), aggregate(shuffled, len(items))
    assert a.to_dict() == pytest.approx(b.to_dict())


@pytest.mark.parametrize(
    "hist, expected", [([62.8, 73.1, 72.2], 0.9), ([70, 75, 80], -5), ([50, 60, 58], 2)]
)
def test_forgetting(hist, expected):
    assert forgetting(hist) == pytest.approx(expected, abs=1e-9)


def test_forgetting_needs_three():
    with pytest.raises(ValueError):
        forgetting([1.0, 2.0])


def test_kl_examples():
    assert kl_categorical([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert kl_categorical([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert kl_categorical([0.5, 0.5], [0.9, 0.1]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.510826, abs=1e-6)
    with pytest.raises(DivergenceError):
        kl_categorical([0.5, 0.5], [1.0, 0.0])
    with pytest.raises(ValueError):
        kl_categorical([1.0], [0.5, 0.5])


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = rng.integers(2, 8)
        p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        assert kl_categorical(p, q) >= 0
        assert abs(kl_categorical(p, p)) <= 1e-12


def test_verbosity_gap():
    t = lambda i, r, a, rat: AgentTurn(i, r, a, rat, rat, True)
    r0 = [t(1, 0, "4", "one two three four five six"), t(2, 0, "7", "short")]
    r1 = [t(1, 1, "4", "x"), t(2, 1, "4", "x")]
    rec = DebateRecord(MATH_Q, [r0, r1], "4", Termination.consensus(1), 2, 5)
    assert verbosity_gap([rec]) == 5.0
    _, quiet = consensus_at_0()
    assert verbosity_gap([quiet]) is None


def test_report_io(tmp_path):
    reps = [MetricsReport(0.5, 0.1, 1.0, 0.2, 1, 2, 3, 4), MetricsReport(1.0, 0.0, 0.0, 0.0, 0, 0, 0, 2)]
    write_report_json(reps[0], tmp_path / "r.json")
    assert read_reports(tmp_path / "r.json") == reps[:1]
    write_reports_csv(reps, tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(REPORT_FIELDS) and len(rows) == 3
