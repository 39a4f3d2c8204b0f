"""Turning debate records into training traces, selecting subsets, and the JSON Lines store."""

from __future__ import annotations

import hashlib
import json
import re
import threading
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, TypeVar

import numpy as np

from .debate import JACCARD_THRESHOLD, jaccard, sentence_tokens, split_sentences
from .domain import DebateRecord, RewardParams, TrainingExample, canonical_json
from .errors import DataFormatError
from .extract import answers_equal, token_count
from .grpo import shaped_reward

T = TypeVar("T")

_MATH_TOKEN = re.compile(r"\d+(?:\.\d+)?|[+\-*/×÷=^<>√%]|(?<![A-Za-z])[A-Za-z](?![A-Za-z])")
_NOT_VARIABLES = {"a", "A", "I"}


def math_tokens(text: str) -> set[str]:
    return {t for t in _MATH_TOKEN.findall(text) if t not in _NOT_VARIABLES}


def extract_training_example(
    record: DebateRecord, reward_params: RewardParams = RewardParams()
) -> TrainingExample | None:
    """Compress the best terminal-round rationale that reached the final answer.

    A sentence survives if another terminal-round agent wrote a similar one, or
    (for records that went past round 0) if it introduces a math token that no
    rationale of the previous round contained.
    """
    kind = record.query.task_kind
    y_star = record.final_answer
    terminal = record.rounds[-1]
    candidates = [t for t in terminal if t.answer and answers_equal(t.answer, y_star, kind)]
    if not candidates:
        return None
    scored = [(shaped_reward(t.raw_text, y_star, kind, reward_params), t) for t in candidates]
    reward, best = min(scored, key=lambda st: (-st[0], token_count(st[1].rationale), st[1].agent_id))

    others = [sentence_tokens(s) for t in terminal if t.agent_id != best.agent_id for s in split_sentences(t.rationale)]
    prior_tokens: set[str] | None = None
    if len(record.rounds) > 1:
        prior_tokens = set().union(*(math_tokens(t.rationale) for t in record.rounds[-2]))

    kept = []
    for sentence in split_sentences(best.rationale):
        tokens = sentence_tokens(sentence)
        shared = bool(tokens) and any(jaccard(tokens, o) >= JACCARD_THRESHOLD for o in others)
        new_math = prior_tokens is not None and bool(math_tokens(sentence) - prior_tokens)
        if shared or new_math:
            kept.append(sentence)
    rationale = "\n".join(kept) if kept else best.rationale.strip()
    if not rationale:
        rationale = best.raw_text.strip()
    if not rationale:
        return None
    return TrainingExample(
        query_id=record.query.id,
        x=record.query.text,
        y_star=y_star,
        rationale=rationale,
        source_round_count=len(record.rounds) - 1,
        reward=reward,
    )


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str
    k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("all_traces", "debate_only", "random_k"):
            raise ValueError(f"unknown selection strategy {self.kind!r}")
        if self.kind == "random_k" and (self.k is None or self.k < 1):
            raise ValueError("random_k needs k >= 1")

    @classmethod
    def parse(cls, name: str, k: int | None = None, seed: int = 0) -> SelectionStrategy:
        """Accepts CLI spellings such as ``debate-only`` or ``random-k``."""
        return cls(name.replace("-", "_").lower(), k, seed)


def select(examples: Sequence[TrainingExample], strategy: SelectionStrategy) -> list[TrainingExample]:
    if strategy.kind == "all_traces":
        return list(examples)
    if strategy.kind == "debate_only":
        return [e for e in examples if e.source_round_count >= 1]
    n = len(examples)
    rng = np.random.default_rng(strategy.seed)
    keep = np.sort(rng.choice(n, size=min(strategy.k, n), replace=False))
    return [examples[i] for i in keep]


# --- JSON Lines store ----------------------------------------------------------


def write_jsonl(items: Iterable[Any], path: str | Path) -> int:
    path = Path(path)
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(canonical_json(item) + "\n")
            count += 1
    return count


def read_jsonl(path: str | Path, decode: Callable[[dict], T]) -> list[T]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(decode(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
    return out


def persist(examples: Iterable[TrainingExample], path: str | Path) -> int:
    return write_jsonl(examples, path)


def load(path: str | Path) -> list[TrainingExample]:
    return read_jsonl(path, TrainingExample.from_dict)


class TraceWriter:
    """Append-only JSON Lines writer shared by concurrent producers."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.write_text("")

    def append(self, item: Any) -> None:
        line = canonical_json(item) + "\n"
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)


def config_hash(config: Any) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:16]


def write_manifest(path: str | Path, *, dataset: str, agent_pool: Sequence[Any], config: Any, counts: dict) -> dict:
    manifest = {
        "dataset": dataset,
        "agent_pool": [a.to_dict() if hasattr(a, "to_dict") else a for a in agent_pool],
        "config_hash": config_hash(config),
        "counts": dict(counts),
    }
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest
