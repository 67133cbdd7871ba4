"""Task ingestion: JSONL datasets, gold-answer canonicalization, seeded sampling.

Gold answers are normalized once at load time into exact comparable values so
that every later correctness check is a plain equality test.  Numeric golds are
kept as rationals, never floats.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path


class TaskKind(str, Enum):
    NUMERIC_QA = "numeric_qa"
    MULTIPLE_CHOICE = "multiple_choice"
    PAIRWISE_VERDICT = "pairwise_verdict"


class DatasetError(Exception):
    """Base class for ingestion failures."""


class MissingField(DatasetError):
    def __init__(self, line: int, name: str):
        super().__init__(f"line {line}: missing required field {name!r}")
        self.line = line
        self.name = name


class BadGold(DatasetError):
    def __init__(self, reason: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}cannot canonicalize gold answer: {reason}")
        self.line = line
        self.reason = reason


class EmptyDataset(DatasetError):
    pass


class SampleTooLarge(DatasetError):
    def __init__(self, n: int, available: int):
        super().__init__(f"requested a sample of {n} from {available} items")
        self.n = n
        self.available = available


# Currency symbols and digit separators that may decorate a numeric gold value.
_NUMERIC_NOISE = str.maketrans("", "", ",_$€£¥ \t")
_SINGLE_LETTER = re.compile(r"^[A-Z]$")
_VERDICT_ALIASES = {
    "a": "A",
    "b": "B",
    "c": "C",
    "model_a": "A",
    "model_b": "B",
    "tie": "C",
}


@dataclass(frozen=True)
class CanonicalAnswer:
    """A comparable final answer: exact rational, option letter, or A/B/C verdict.

    Equality is variant-wise and exact; two answers of different kinds never
    compare equal.
    """

    kind: str  # "numeric" | "choice" | "verdict"
    value: Fraction | str

    @classmethod
    def numeric(cls, value: Fraction | int | str) -> "CanonicalAnswer":
        return cls("numeric", Fraction(value))

    @classmethod
    def choice(cls, letter: str) -> "CanonicalAnswer":
        letter = letter.upper()
        if not _SINGLE_LETTER.match(letter):
            raise BadGold(f"choice must be a single letter, got {letter!r}")
        return cls("choice", letter)

    @classmethod
    def verdict(cls, letter: str) -> "CanonicalAnswer":
        letter = letter.upper()
        if letter not in ("A", "B", "C"):
            raise BadGold(f"verdict must be A, B, or C, got {letter!r}")
        return cls("verdict", letter)

    def render(self) -> str:
        """Canonical text form; feeding it back through canonicalize_gold is a no-op."""
        if self.kind == "numeric":
            return _decimal_str(self.value)
        return str(self.value)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "value": self.render()}

    @classmethod
    def from_dict(cls, data: dict) -> "CanonicalAnswer":
        kind = data["kind"]
        if kind == "numeric":
            return cls.numeric(data["value"])
        if kind == "choice":
            return cls.choice(data["value"])
        if kind == "verdict":
            return cls.verdict(data["value"])
        raise BadGold(f"unknown answer kind {kind!r}")


def _decimal_str(value: Fraction) -> str:
    """Render a rational exactly: integers bare, decimal expansion when finite."""
    num, den = value.numerator, value.denominator
    if den == 1:
        return str(num)
    twos = fives = 0
    rest = den
    while rest % 2 == 0:
        rest //= 2
        twos += 1
    while rest % 5 == 0:
        rest //= 5
        fives += 1
    if rest != 1:
        # No finite decimal expansion; keep the fraction form.
        return f"{num}/{den}"
    places = max(twos, fives)
    scaled = abs(num) * 10**places // den
    digits = str(scaled).rjust(places + 1, "0")
    sign = "-" if num < 0 else ""
    return f"{sign}{digits[:-places]}.{digits[-places:]}"


def canonicalize_gold(raw: str, kind: TaskKind, line: int | None = None) -> CanonicalAnswer:
    """Normalize a raw gold string for the given task kind.

    NumericQA strips commas, whitespace, currency symbols, and a trailing
    period, then parses an exact rational ("1,234." becomes 1234).  Multiple
    choice strips parentheses and whitespace and uppercases the letter.
    Pairwise accepts A/B/C or the aliases model_a/model_b/tie.
    """
    if raw is None or not str(raw).strip():
        raise BadGold("empty value", line)
    text = str(raw).strip()
    try:
        if kind is TaskKind.NUMERIC_QA:
            cleaned = text.translate(_NUMERIC_NOISE).rstrip(".")
            try:
                return CanonicalAnswer.numeric(Fraction(cleaned))
            except (ValueError, ZeroDivisionError):
                raise BadGold(f"not a finite rational: {text!r}", line)
        if kind is TaskKind.MULTIPLE_CHOICE:
            cleaned = re.sub(r"[()\s]", "", text).upper()
            if not _SINGLE_LETTER.match(cleaned):
                raise BadGold(f"not a single option letter: {text!r}", line)
            return CanonicalAnswer.choice(cleaned)
        key = text.lower()
        if key in _VERDICT_ALIASES:
            return CanonicalAnswer.verdict(_VERDICT_ALIASES[key])
        raise BadGold(f"not a pairwise verdict: {text!r}", line)
    except BadGold as exc:
        if exc.line is None and line is not None:
            raise BadGold(exc.reason, line) from None
        raise


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: TaskKind
    display_name: str = ""
    sample_size: int = 100

    def __post_init__(self):
        if self.sample_size < 1:
            raise ValueError("sample_size must be at least 1")


@dataclass(frozen=True, eq=True)
class Item:
    item_id: str
    task_id: str
    question: str
    gold: CanonicalAnswer
    options: tuple[str, ...] = ()
    response_a: str = ""
    response_b: str = ""
    meta: dict = field(default_factory=dict)


def item_kind(item: Item) -> TaskKind:
    """Task kind implied by the item's gold variant."""
    return {
        "numeric": TaskKind.NUMERIC_QA,
        "choice": TaskKind.MULTIPLE_CHOICE,
        "verdict": TaskKind.PAIRWISE_VERDICT,
    }[item.gold.kind]


_REQUIRED_FIELDS = {
    TaskKind.NUMERIC_QA: ("id", "question", "gold"),
    TaskKind.MULTIPLE_CHOICE: ("id", "question", "options", "gold"),
    TaskKind.PAIRWISE_VERDICT: ("id", "question", "response_a", "response_b", "gold"),
}


def load_dataset(path: str | Path, spec: TaskSpec) -> list[Item]:
    """Read a JSONL dataset, validating each line against the kind's schema.

    Every line yields exactly one Item or an error naming the line number;
    input order is preserved.
    """
    items: list[Item] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise DatasetError(f"line {lineno}: expected an object")
            for name in _REQUIRED_FIELDS[spec.kind]:
                if name not in row:
                    raise MissingField(lineno, name)
            gold = canonicalize_gold(str(row["gold"]), spec.kind, line=lineno)
            options = tuple(str(option) for option in row.get("options", ()))
            if spec.kind is TaskKind.MULTIPLE_CHOICE:
                if len(options) < 2:
                    raise DatasetError(f"line {lineno}: need at least 2 options")
                index = ord(gold.value) - ord("A")
                if index >= len(options):
                    raise BadGold(
                        f"choice {gold.value} outside the {len(options)} listed options",
                        lineno,
                    )
            items.append(
                Item(
                    item_id=str(row["id"]),
                    task_id=spec.task_id,
                    question=str(row["question"]),
                    gold=gold,
                    options=options,
                    response_a=str(row.get("response_a", "")),
                    response_b=str(row.get("response_b", "")),
                    meta=dict(row.get("meta", {})),
                )
            )
    if not items:
        raise EmptyDataset(str(path))
    return items


def save_dataset(items: list[Item], path: str | Path) -> None:
    """Inverse of load_dataset; loading the written file reproduces the items."""
    with open(path, "w", encoding="utf-8") as handle:
        for item in items:
            row: dict = {"id": item.item_id, "question": item.question}
            if item.options:
                row["options"] = list(item.options)
            if item.response_a or item.response_b:
                row["response_a"] = item.response_a
                row["response_b"] = item.response_b
            row["gold"] = item.gold.render()
            if item.meta:
                row["meta"] = item.meta
            handle.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def sample_items(items: list[Item], n: int, seed: int) -> list[Item]:
    """Deterministic sample of n distinct items; same inputs, same output order."""
    if n < 1:
        raise ValueError("sample size must be positive")
    if n > len(items):
        raise SampleTooLarge(n, len(items))
    return random.Random(seed).sample(items, n)


def dataset_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sampling_manifest(spec: TaskSpec, seed: int, source_path: str | Path) -> dict:
    """Record of how a task's items were drawn, enough to redraw them exactly."""
    return {
        "task_id": spec.task_id,
        "seed": seed,
        "sample_size": spec.sample_size,
        "source_path": str(source_path),
        "source_sha256": dataset_sha256(source_path),
    }
