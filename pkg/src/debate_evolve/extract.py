"""Answer extraction, normalization and the XML format check."""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction

_BOXED = "\\boxed{"


@dataclass(frozen=True)
class ExtractedOutput:
    reasoning: str | None
    answer: str | None
    format_ok: bool


def _boxed_span(text: str) -> tuple[int, int] | None:
    """(start of ``\\boxed{``, index one past the closing brace) of the last balanced group."""
    start = text.rfind(_BOXED)
    if start == -1:
        return None
    depth = 0
    for i in range(start + len(_BOXED) - 1, len(text)):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return start, i + 1
    return None


def extract_boxed(text: str) -> str | None:
    span = _boxed_span(text)
    if span is None:
        return None
    start, end = span
    return text[start + len(_BOXED) : end - 1].strip()


def strip_boxed(text: str) -> str:
    """Text with its last balanced ``\\boxed{...}`` group removed."""
    span = _boxed_span(text)
    if span is None:
        return text.strip()
    return (text[: span[0]] + text[span[1] :]).strip()


_REASONING = re.compile(r"<reasoning>(.*?)</reasoning>", re.DOTALL)
_ANSWER = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_TEMPLATE = re.compile(r"\s*<reasoning>(.*?)</reasoning>\s*<answer>(.*?)</answer>\s*", re.DOTALL)
_TAGS = ("<reasoning>", "</reasoning>", "<answer>", "</answer>")


def extract_xml(text: str) -> ExtractedOutput:
    r = _REASONING.search(text)
    a = _ANSWER.search(text)
    ok = (
        all(text.count(tag) == 1 for tag in _TAGS)
        and _TEMPLATE.fullmatch(text) is not None
    )
    return ExtractedOutput(
        reasoning=r.group(1).strip() if r else None,
        answer=a.group(1).strip() if a else None,
        format_ok=ok,
    )


_NUMBER = r"-?(?:\d+(?:\.\d*)?|\.\d+)"
_NUMERIC = re.compile(rf"({_NUMBER})(?:\s*/\s*({_NUMBER}))?")
_FRAC = re.compile(r"\\d?frac\{\s*(" + _NUMBER + r")\s*\}\{\s*(" + _NUMBER + r")\s*\}")


def _canonical_number(value: Fraction) -> str:
    num, den = value.numerator, value.denominator
    if den == 1:
        return str(num)
    d, twos, fives = den, 0, 0
    while d % 2 == 0:
        d //= 2
        twos += 1
    while d % 5 == 0:
        d //= 5
        fives += 1
    if d != 1:
        return f"{num}/{den}"
    places = max(twos, fives)
    scaled = abs(num) * 10**places // den
    digits = str(scaled).rjust(places + 1, "0")
    body = f"{digits[:-places]}.{digits[-places:]}".rstrip("0").rstrip(".")
    return ("-" if num < 0 else "") + body


def _normalize_math(text: str) -> str | None:
    s = text.replace("$", "").replace(",", "").replace("%", "")
    s = _FRAC.sub(r"\1/\2", s)
    matches = list(_NUMERIC.finditer(s))
    if not matches:
        return None
    m = matches[-1]
    try:
        value = Fraction(m.group(1).rstrip("."))
        if m.group(2) is not None:
            value /= Fraction(m.group(2).rstrip("."))
    except (ValueError, ZeroDivisionError):
        return None
    return _canonical_number(value)


_LONE_LABEL = re.compile(r"\(?([A-J])\)?[.:]?")
_PAREN_LABEL = re.compile(r"\(([A-J])\)")
_ANSWER_IS = re.compile(r"ANSWER(?:\s+IS)?\s*:?\s*\(?([A-J])\)?(?![A-Z0-9])")


def _normalize_choice(text: str) -> str:
    if m := _LONE_LABEL.fullmatch(text):
        return m.group(1)
    if found := _PAREN_LABEL.findall(text):
        return found[-1]
    if found := _ANSWER_IS.findall(text):
        return found[-1]
    return text


def normalize_answer(raw: str, task_kind: str) -> str:
    """Canonical string form of an answer; never raises.

    Math answers become the shortest exact decimal (or ``a/b`` in lowest terms
    when the fraction does not terminate). Multiple-choice answers collapse to
    a single uppercase label when one can be found. Anything unparseable comes
    back trimmed and case-folded, so equality stays total.
    """
    if task_kind == "math":
        s = raw.strip().lower()
        parsed = _normalize_math(s)
        return parsed if parsed is not None else s
    s = raw.strip().upper()
    return _normalize_choice(s)


def answers_equal(a: str, b: str, task_kind: str) -> bool:
    return normalize_answer(a, task_kind) == normalize_answer(b, task_kind)


def final_answer_text(raw: str) -> str:
    """The answer span of a model output before normalization ("" if none)."""
    boxed = extract_boxed(raw)
    if boxed is not None:
        return boxed
    xml = extract_xml(raw)
    return xml.answer or ""


def extract_answer(raw: str, task_kind: str) -> str:
    """Normalized final answer of a raw model output; "" when extraction fails."""
    text = final_answer_text(raw)
    return normalize_answer(text, task_kind) if text else ""


def extract_rationale(raw: str) -> str:
    """Reasoning text of an output: the XML reasoning block, else the text minus its boxed answer."""
    xml = extract_xml(raw)
    if xml.reasoning is not None:
        return xml.reasoning
    return strip_boxed(raw)


def token_count(text: str) -> int:
    """Length |y| in whitespace-separated tokens."""
    return len(text.split())
