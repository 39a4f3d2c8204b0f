"""Evaluation metrics: accuracy, transitions, sycophancy, debate-helped, forgetting and KL."""

from __future__ import annotations

import csv
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import REPORT_FIELDS, DebateRecord, MetricsReport
from .errors import DivergenceError
from .extract import answers_equal, token_count
from .voting import majority_vote


@dataclass(frozen=True)
class TransitionCounts:
    c_to_i: int = 0
    i_to_c: int = 0


@dataclass(frozen=True)
class RecordMetrics:
    correct: bool
    debate_rounds: int
    transitions: TransitionCounts
    sycophancy_events: int
    debate_helped: bool


def score_record(record: DebateRecord, gold: str) -> RecordMetrics:
    if not gold:
        raise ValueError("gold answer must be non-empty")
    kind = record.query.task_kind

    def ok(answer: str) -> bool:
        return bool(answer) and answers_equal(answer, gold, kind)

    c_to_i = i_to_c = events = 0
    for t in range(1, len(record.rounds)):
        prev, cur = record.rounds[t - 1], record.rounds[t]
        for i, turn in enumerate(cur):
            before = prev[i]
            was, now = ok(before.answer), ok(turn.answer)
            c_to_i += was and not now
            i_to_c += now and not was
            switched = not answers_equal(turn.answer, before.answer, kind)
            if switched and turn.answer and not now and not turn.novel_step:
                peer_answers = [p.answer for j, p in enumerate(prev) if j != i]
                if any(answers_equal(turn.answer, a, kind) for a in peer_answers):
                    events += 1

    round0 = record.rounds[0]
    n_correct0 = sum(ok(t.answer) for t in round0)
    initial_wrong = not ok(majority_vote(round0, kind)) or 2 * n_correct0 <= len(round0)
    correct = ok(record.final_answer)
    return RecordMetrics(
        correct=correct,
        debate_rounds=len(record.rounds) - 1,
        transitions=TransitionCounts(c_to_i, i_to_c),
        sycophancy_events=events,
        debate_helped=correct and initial_wrong,
    )


def aggregate(per_record: Iterable[RecordMetrics], n_queries: int, baseline_accuracy: float = 0.0) -> MetricsReport:
    if n_queries < 1:
        raise ValueError("n_queries must be >= 1")
    items = list(per_record)
    n_correct = sum(m.correct for m in items)
    accuracy = n_correct / n_queries
    return MetricsReport(
        accuracy=accuracy,
        delta_vs_baseline=accuracy - baseline_accuracy,
        avg_debate_rounds=sum(m.debate_rounds for m in items) / len(items) if items else 0.0,
        sycophancy_per_query=sum(m.sycophancy_events for m in items) / n_queries,
        c_to_i=sum(m.transitions.c_to_i for m in items),
        i_to_c=sum(m.transitions.i_to_c for m in items),
        debate_helped=sum(m.debate_helped for m in items),
        n_queries=n_queries,
    )


def report_for_records(records: Sequence[DebateRecord], baseline_accuracy: float = 0.0) -> MetricsReport:
    """Score records against the gold answers stored on their queries."""
    scored = [score_record(r, r.query.gold_answer) for r in records]
    return aggregate(scored, max(len(records), 1), baseline_accuracy)


def forgetting(acc_history: Sequence[float]) -> float:
    """max over earlier rounds of (Acc_t - Acc_last); negative when the last round is best."""
    if len(acc_history) < 3:
        raise ValueError("forgetting needs at least three accuracies (rounds 0, 1, 2)")
    last = acc_history[-1]
    return max(a - last for a in acc_history[:-1])


def kl_categorical(p: Sequence[float], q: Sequence[float]) -> float:
    """Sum p_i ln(p_i / q_i) with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support sizes differ: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise DivergenceError("q has zero mass where p is positive")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def verbosity_gap(records: Iterable[DebateRecord]) -> float | None:
    """Mean rationale length (tokens) of adopted minus non-adopted answers over disagreement rounds.

    An answer at round t-1 is adopted when some other agent switches to it at
    round t. Returns None when no round has both kinds.
    """
    adopted, other = [], []
    for record in records:
        kind = record.query.task_kind
        for t in range(1, len(record.rounds)):
            prev, cur = record.rounds[t - 1], record.rounds[t]
            taken = set()
            for i, turn in enumerate(cur):
                if answers_equal(turn.answer, prev[i].answer, kind):
                    continue
                for j, p in enumerate(prev):
                    if j != i and answers_equal(turn.answer, p.answer, kind):
                        taken.add(j)
            if not taken:
                continue
            for j, p in enumerate(prev):
                (adopted if j in taken else other).append(token_count(p.rationale))
    if not adopted or not other:
        return None
    return float(np.mean(adopted) - np.mean(other))


def write_report_json(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")


def read_reports(path: str | Path) -> list[MetricsReport]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [MetricsReport.from_dict(d) for d in data]


def write_reports_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(REPORT_FIELDS))
        writer.writeheader()
        for r in reports:
            writer.writerow(r.to_dict())
