"""Parsers that turn raw model text into canonical answers and verdicts.

Every function here is total: arbitrary input yields a ParseOutcome, never an
exception.  Invalid outputs are first-class data that downstream metrics see
and count.  The LAST marker occurrence wins everywhere, because step-by-step
reasoning routinely quotes candidate answers before settling on a final one.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

from .corpus import CanonicalAnswer, TaskKind


class FailureReason(str, Enum):
    NO_MARKER = "no_marker"
    AMBIGUOUS = "ambiguous"
    # "Marker present but no parseable value after it"; also covers a missing
    # option letter, despite the numeric-sounding name.
    BAD_NUMBER = "bad_number"


class VerdictFamily(str, Enum):
    POINTWISE = "pointwise"
    PAIRWISE_CHOICE = "pairwise_choice"
    META_JUDGE = "meta_judge"


@dataclass(frozen=True)
class ParseOutcome:
    """Result of one extraction attempt.

    valid, value, and span are present or absent together.  span is a byte
    offset pair into the UTF-8 encoding of the raw text, covering the match
    from the marker through the extracted value.
    """

    valid: bool
    value: CanonicalAnswer | bool | None = None
    span: tuple[int, int] | None = None
    failure_reason: FailureReason | None = None

    @classmethod
    def success(cls, value: CanonicalAnswer | bool, span: tuple[int, int]) -> "ParseOutcome":
        return cls(valid=True, value=value, span=span)

    @classmethod
    def failure(cls, reason: FailureReason) -> "ParseOutcome":
        return cls(valid=False, failure_reason=reason)

    def as_dict(self) -> dict:
        value: dict | None = None
        if self.valid:
            if isinstance(self.value, bool):
                value = {"kind": "bool", "value": self.value}
            else:
                value = self.value.as_dict()
        return {
            "valid": self.valid,
            "value": value,
            "span": list(self.span) if self.span else None,
            "failure_reason": self.failure_reason.value if self.failure_reason else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParseOutcome":
        if not data["valid"]:
            return cls.failure(FailureReason(data["failure_reason"]))
        raw = data["value"]
        value: CanonicalAnswer | bool
        if raw["kind"] == "bool":
            value = bool(raw["value"])
        else:
            value = CanonicalAnswer.from_dict(raw)
        span = data["span"]
        return cls.success(value, (int(span[0]), int(span[1])))


_ANSWER_MARKER = re.compile(r"the answer is", re.IGNORECASE)
_NUMBER = re.compile(r"[+-]?\d[\d,]*(?:\.\d+)?")
# A standalone letter, optionally parenthesized; lookarounds reject letters
# embedded in words so "clearly (B)" resolves to B.
_LETTER = re.compile(r"\(?(?<![A-Za-z])([A-Za-z])(?![A-Za-z])\)?")
_POINTWISE_TOKEN = re.compile(r"(?:\*\*)?\[\[(correct|incorrect)\]\](?:\*\*)?", re.IGNORECASE)
_PAIRWISE_TOKEN = re.compile(r"\[\[([abc])\]\]", re.IGNORECASE)


def _byte_span(text: str, start: int, end: int) -> tuple[int, int]:
    head = len(text[:start].encode("utf-8"))
    return (head, head + len(text[start:end].encode("utf-8")))


def extract_answer(text: str, kind: TaskKind) -> ParseOutcome:
    """Pull the final answer out of a generation transcript.

    Scans for the last occurrence of "The answer is" (case-insensitive) and
    parses the value that follows it, looking no further than the end of that
    line.  Numeric answers may carry commas, a sign, and a decimal part;
    trailing punctuation is dropped.  Choice answers are a standalone letter
    with optional parentheses, uppercased.  Pairwise transcripts carry [[A]]
    style verdicts instead and are routed to extract_verdict.
    """
    if kind is TaskKind.PAIRWISE_VERDICT:
        return extract_verdict(text, VerdictFamily.PAIRWISE_CHOICE)
    markers = list(_ANSWER_MARKER.finditer(text))
    if not markers:
        return ParseOutcome.failure(FailureReason.NO_MARKER)
    marker = markers[-1]
    newline = text.find("\n", marker.end())
    segment_end = len(text) if newline < 0 else newline
    segment = text[marker.end():segment_end]
    if kind is TaskKind.NUMERIC_QA:
        match = _NUMBER.search(segment)
        if not match:
            return ParseOutcome.failure(FailureReason.BAD_NUMBER)
        try:
            value = CanonicalAnswer.numeric(Fraction(match.group(0).replace(",", "")))
        except (ValueError, ZeroDivisionError):
            return ParseOutcome.failure(FailureReason.BAD_NUMBER)
    else:
        match = _LETTER.search(segment)
        if not match:
            return ParseOutcome.failure(FailureReason.BAD_NUMBER)
        value = CanonicalAnswer.choice(match.group(1).upper())
    span = _byte_span(text, marker.start(), marker.end() + match.end())
    return ParseOutcome.success(value, span)


def extract_verdict(text: str, family: VerdictFamily) -> ParseOutcome:
    """Pull the final verdict token out of a judgment transcript.

    Pointwise and meta-judge outputs carry [[Correct]]/[[Incorrect]] and map
    to a boolean; surrounding ** emphasis is tolerated.  Pairwise choices
    carry [[A]]/[[B]]/[[C]].  The last token in the text wins.
    """
    if family is VerdictFamily.PAIRWISE_CHOICE:
        matches = list(_PAIRWISE_TOKEN.finditer(text))
        if not matches:
            return ParseOutcome.failure(FailureReason.NO_MARKER)
        last = matches[-1]
        value: CanonicalAnswer | bool = CanonicalAnswer.verdict(last.group(1).upper())
    else:
        matches = list(_POINTWISE_TOKEN.finditer(text))
        if not matches:
            return ParseOutcome.failure(FailureReason.NO_MARKER)
        last = matches[-1]
        value = last.group(1).lower() == "correct"
    return ParseOutcome.success(value, _byte_span(text, last.start(), last.end()))
