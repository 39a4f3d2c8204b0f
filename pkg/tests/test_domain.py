import json

import pytest
from hypothesis import given, strategies as st

from debate_evolve.domain import (
    AgentConfig,
    AgentTurn,
    DebateFailure,
    DebateRecord,
    EvolutionState,
    GrpoParams,
    MetricsReport,
    Query,
    RewardParams,
    Termination,
    TrainingExample,
    canonical_json,
    check_pool,
    validate,
)

from scenarios import MATH_Q, consensus_at_0, converge_at_1, never_converge

words = st.text(alphabet="abcxyz 0123456789.\\{}", max_size=20)
labels = st.sampled_from("ABCDE")


@st.composite
def queries(draw):
    kind = draw(st.sampled_from(["math", "science", "commonsense"]))
    choices = None
    if kind != "math":
        ls = draw(st.lists(labels, min_size=1, max_size=5, unique=True))
        choices = tuple((l, draw(words)) for l in ls)
    return Query(draw(st.text(min_size=1, max_size=8)), draw(words), kind, choices, draw(st.none() | words), draw(words))


turns = st.builds(
    AgentTurn, st.integers(1, 9), st.integers(0, 5), words, words, words, st.booleans()
)
terminations = st.one_of(st.integers(0, 5).map(Termination.consensus), st.just(Termination.majority_vote()))
agent_configs = st.builds(
    AgentConfig,
    st.integers(1, 50),
    st.sampled_from(["mock", "probabilistic", "http", "policy"]),
    st.floats(0, 2),
    st.dictionaries(st.sampled_from(["p", "s", "urls", "x"]), st.integers() | words | st.lists(st.integers(), max_size=3)),
)


def roundtrip(obj):
    encoded = canonical_json(obj.to_dict())
    back = type(obj).from_dict(json.loads(encoded))
    assert back == obj
    assert canonical_json(back.to_dict()) == encoded


@given(queries())
def test_query_roundtrip(q):
    roundtrip(q)


@given(turns)
def test_turn_roundtrip(t):
    roundtrip(t)


@given(agent_configs)
def test_agent_config_roundtrip(a):
    roundtrip(a)


@given(terminations)
def test_termination_roundtrip(t):
    roundtrip(t)


@given(queries(), st.lists(st.lists(turns, max_size=3), max_size=3), words, terminations)
def test_record_roundtrip(q, rounds, final, term):
    roundtrip(DebateRecord(q, rounds, final, term, 3, 5))


@given(
    st.builds(
        TrainingExample,
        words,
        words,
        words,
        st.text(min_size=1, max_size=10),
        st.integers(0, 5),
        st.floats(allow_nan=False, allow_infinity=False),
    )
)
def test_training_example_roundtrip(e):
    roundtrip(e)


@given(st.lists(agent_configs, max_size=3), st.lists(st.floats(0, 3), max_size=4))
def test_evolution_state_roundtrip(pool, hist):
    roundtrip(EvolutionState(len(hist), 5, pool, hist, tuple(f"it{i}" for i in range(len(hist)))))


def test_params_and_report_roundtrip():
    roundtrip(RewardParams(1.0, 0.25, 0.75, 60.0))
    roundtrip(GrpoParams(epsilon=0.1, beta=0.5, baseline="none", optimizer="sgd"))
    roundtrip(MetricsReport(0.5, 0.1, 1.5, 0.28, 3, 4, 2, 10))
    roundtrip(DebateFailure("q9", "boom"))


def test_invariant_violations_rejected():
    with pytest.raises(ValueError):
        Query("q", "t", "math", (("A", "x"),))
    with pytest.raises(ValueError):
        Query("q", "t", "science", None)
    with pytest.raises(ValueError):
        AgentConfig(1, "mock", temperature=2.5)
    with pytest.raises(ValueError):
        check_pool([AgentConfig(1, "mock"), AgentConfig(1, "mock")])
    with pytest.raises(ValueError):
        TrainingExample("q", "x", "4", "", 1, 1.0)
    with pytest.raises(ValueError):
        RewardParams(tau=0)
    with pytest.raises(ValueError):
        GrpoParams(epsilon=1.5)
    with pytest.raises(ValueError):
        EvolutionState(2, 5, (), (1.0,))
    with pytest.raises(ValueError):
        MetricsReport(1.5, 0, 0, 0, 0, 0, 0, 0)


def _turn(agent, rnd, ans):
    return AgentTurn(agent, rnd, ans, "r.", f"r. \\boxed{{{ans}}}", True)


def test_validate_examples():
    ok = DebateRecord(MATH_Q, [[_turn(i, 0, "4") for i in (1, 2, 3)]], "4", Termination.consensus(0), 3, 5)
    assert validate(ok) == []

    short = DebateRecord(MATH_Q, [[_turn(1, 0, "4"), _turn(2, 0, "4")]], "4", Termination.consensus(0), 3, 5)
    problems = validate(short)
    assert len(problems) == 1 and "rounds[t] size" in problems[0]

    lying = DebateRecord(
        MATH_Q, [[_turn(1, 0, "4"), _turn(2, 0, "4"), _turn(3, 0, "7")]], "4", Termination.consensus(0), 3, 5
    )
    problems = validate(lying)
    assert len(problems) == 1 and "termination" in problems[0]


def test_validate_scenarios_clean():
    for make in (consensus_at_0, converge_at_1, never_converge):
        _, expected = make()
        assert validate(expected) == []


def test_validate_rejects_late_consensus_and_bad_vote():
    r0 = [_turn(i, 0, "4") for i in (1, 2, 3)]
    r1 = [_turn(i, 1, "4") for i in (1, 2, 3)]
    late = DebateRecord(MATH_Q, [r0, r1], "4", Termination.consensus(1), 3, 5)
    assert any("earliest" in p for p in validate(late))
    _, never = never_converge()
    bad = DebateRecord(never.query, never.rounds, "2", never.termination, 3, 5)
    assert any("final_answer" in p for p in validate(bad))
