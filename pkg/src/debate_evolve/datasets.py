"""Loading GSM-style and multiple-choice JSON Lines benchmarks into Query objects."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .domain import TASK_KINDS, Query
from .errors import ConfigurationError, DataFormatError
from .extract import normalize_answer

# (train, validation, test) example counts of the public splits
SPLIT_COUNTS: dict[str, dict[str, int]] = {
    "gsm8k": {"train": 7473, "test": 1319},
    "gsm_plus": {"validation": 10552, "test": 2400},
    "arc_easy": {"train": 2251, "validation": 570, "test": 2376},
    "arc_challenge": {"train": 1119, "validation": 299, "test": 1172},
    "commonsenseqa": {"train": 9741, "validation": 1221, "test": 1140},
}

DEFAULT_TASK_KIND = {
    "gsm8k": "math",
    "gsm_plus": "math",
    "arc_easy": "science",
    "arc_challenge": "science",
    "commonsenseqa": "commonsense",
}

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: str
    task_kind: str
    expected_count: int | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigurationError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.task_kind not in TASK_KINDS:
            raise ConfigurationError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        known = SPLIT_COUNTS.get(self.name)
        if known is not None and self.expected_count is not None:
            if self.split not in known:
                raise ConfigurationError(f"{self.name} has no {self.split} split")
            if known[self.split] != self.expected_count:
                raise ConfigurationError(
                    f"{self.name}/{self.split} has {known[self.split]} examples, manifest says {self.expected_count}"
                )

    @classmethod
    def standard(cls, name: str, split: str, check_count: bool = True) -> DatasetManifest:
        """Manifest for one of the five known benchmarks, count filled in from the split table."""
        count = SPLIT_COUNTS[name].get(split) if check_count else None
        return cls(name, split, DEFAULT_TASK_KIND[name], count)

    def to_dict(self) -> dict:
        return {"name": self.name, "split": self.split, "task_kind": self.task_kind, "expected_count": self.expected_count}

    @classmethod
    def from_dict(cls, d) -> DatasetManifest:
        return cls(d["name"], d["split"], d["task_kind"], d.get("expected_count"))

    @classmethod
    def from_file(cls, path: str | Path) -> DatasetManifest:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataFormatError(f"bad manifest {path}: {exc}") from exc


def gsm_gold(answer_field: str) -> str:
    """Text after the final ``#### `` marker, normalized."""
    marker = answer_field.rfind("####")
    if marker == -1:
        raise ValueError("answer has no #### marker")
    return normalize_answer(answer_field[marker + 4 :].strip(), "math")


def _choices(raw) -> tuple[tuple[str, str], ...]:
    # accept [{"label":..,"text":..}] and the column form {"label":[..],"text":[..]}
    if isinstance(raw, dict):
        return tuple(zip(map(str, raw["label"]), map(str, raw["text"])))
    return tuple((str(c["label"]), str(c["text"])) for c in raw)


def load(path: str | Path, manifest: DatasetManifest) -> list[Query]:
    queries: list[Query] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                qid = f"{manifest.name}:{manifest.split}:{lineno}"
                if manifest.task_kind == "math":
                    query = Query(qid, row["question"], "math", None, gsm_gold(str(row["answer"])), manifest.name)
                else:
                    question = row["question"]
                    if isinstance(question, dict):  # ARC/CSQA originals nest choices under the question
                        text, raw_choices = question["stem"], question["choices"]
                    else:
                        text, raw_choices = question, row["choices"]
                    gold = normalize_answer(str(row["answerKey"]), manifest.task_kind)
                    query = Query(qid, text, manifest.task_kind, _choices(raw_choices), gold, manifest.name)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: {type(exc).__name__}: {exc}") from exc
            queries.append(query)
    if manifest.expected_count is not None and len(queries) != manifest.expected_count:
        raise DataFormatError(f"{path}: expected {manifest.expected_count} examples, found {len(queries)}")
    return queries
