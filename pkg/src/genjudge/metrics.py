"""Judgment-quality metrics: accuracy, precision/recall/F1, dataset splits,
and the correlation analysis that relates generation skill to judging skill.

Everything here is a pure function over already-parsed records.  Correlations
use exact integer sums over bit vectors with a single float division at the
end, so algebraic identities (self-correlation 1, complement negation) hold to
machine precision.  Degenerate cases are reported as value 0 with a flag
rather than NaN, so downstream tables always have something to print.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence


class MetricError(Exception):
    pass


class EmptyInput(MetricError):
    pass


class LengthMismatch(MetricError):
    pass


class OutOfRangeInput(MetricError):
    def __init__(self, value: float):
        super().__init__(f"correlation input {value!r} outside [-1, 1]")
        self.value = value


class OutOfRange(MetricError):
    def __init__(self, value: float):
        super().__init__(f"correlation value {value!r} outside [-1, 1]")
        self.value = value


class MissingJudgeGeneration(MetricError):
    def __init__(self, item_id: str):
        super().__init__(f"no judge generation recorded for item {item_id!r}")
        self.item_id = item_id


class MissingCorrectnessFlag(MetricError):
    def __init__(self, agent_model_id: str, item_id: str):
        super().__init__(
            f"no agent correctness flag for ({agent_model_id!r}, {item_id!r})"
        )
        self.agent_model_id = agent_model_id
        self.item_id = item_id


class InvalidPolicy(str, Enum):
    """What to do with judgments whose verdict could not be parsed.

    EXCLUDE drops them from every count; COUNT_AS_INCORRECT treats each one as
    a misclassification of the true label (a miss on positives, a false alarm
    on negatives).  Neither policy can create a true positive.
    """

    EXCLUDE = "exclude"
    COUNT_AS_INCORRECT = "count-incorrect"


class Strength(str, Enum):
    WEAK = "weak"
    MODERATE = "moderate"
    STRONG = "strong"


@dataclass(frozen=True)
class TripletSeries:
    """Aligned bit vectors for one analysis cell.

    g: the judge answered this item correctly itself.
    j: the judge's verdict on the agent answer was right.
    a: the agent answer was actually correct.
    """

    g: tuple[int, ...]
    j: tuple[int, ...]
    a: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.g) == len(self.j) == len(self.a)):
            raise LengthMismatch("triplet vectors differ in length")
        for vector in (self.g, self.j, self.a):
            if any(bit not in (0, 1) for bit in vector):
                raise ValueError("triplet vectors must contain only 0/1")

    def __len__(self) -> int:
        return len(self.g)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int
    invalid: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn + self.invalid


@dataclass(frozen=True)
class CorrelationResult:
    value: float
    degenerate: bool = False
    n: int = 0


@dataclass(frozen=True)
class PrfResult:
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    # Names of metrics whose denominator was zero and were reported as 0.
    zero_division: frozenset = field(default_factory=frozenset)


def pearson(x: Sequence[int], y: Sequence[int]) -> CorrelationResult:
    """Pearson correlation of two equal-length bit vectors.

    Sample and population normalizations agree here because the shared factor
    cancels; sums are exact integers so only the final division rounds.
    A constant input has no variance and yields the degenerate result.
    """
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} vs {len(y)}")
    n = len(x)
    if n == 0:
        raise EmptyInput("no observations")
    sx = sum(x)
    sy = sum(y)
    sxy = sum(a * b for a, b in zip(x, y))
    sxx = sum(a * a for a in x)
    syy = sum(b * b for b in y)
    var_x = n * sxx - sx * sx
    var_y = n * syy - sy * sy
    if var_x == 0 or var_y == 0:
        return CorrelationResult(0.0, degenerate=True, n=n)
    value = (n * sxy - sx * sy) / math.sqrt(var_x * var_y)
    return CorrelationResult(value, degenerate=False, n=n)


def partial_correlation(r_gj: float, r_ga: float, r_ja: float) -> CorrelationResult:
    """First-order partial correlation of G and J controlling for A.

    (r_GJ - r_GA * r_JA) / sqrt((1 - r_GA^2) (1 - r_JA^2)); degenerate when
    either controlling correlation is exactly +-1.
    """
    for value in (r_gj, r_ga, r_ja):
        if not -1.0 <= value <= 1.0:
            raise OutOfRangeInput(value)
    if abs(r_ga) == 1.0 or abs(r_ja) == 1.0:
        return CorrelationResult(0.0, degenerate=True)
    value = (r_gj - r_ga * r_ja) / math.sqrt((1.0 - r_ga**2) * (1.0 - r_ja**2))
    return CorrelationResult(value, degenerate=False)


def _clamp_unit(value: float) -> float:
    # Floating guard: integer-exact sums keep |r| <= 1 mathematically, but the
    # final division may overshoot by one ulp.
    return max(-1.0, min(1.0, value))


def partial_correlation_from_series(series: TripletSeries) -> CorrelationResult:
    """Partial correlation computed from raw triplets.

    Any degenerate pairwise correlation makes the whole result degenerate;
    this is what a judge with 100% generation accuracy produces, since its G
    vector is constant.
    """
    r_gj = pearson(series.g, series.j)
    r_ga = pearson(series.g, series.a)
    r_ja = pearson(series.j, series.a)
    n = len(series)
    if r_gj.degenerate or r_ga.degenerate or r_ja.degenerate:
        return CorrelationResult(0.0, degenerate=True, n=n)
    result = partial_correlation(
        _clamp_unit(r_gj.value), _clamp_unit(r_ga.value), _clamp_unit(r_ja.value)
    )
    return CorrelationResult(result.value, result.degenerate, n)


def pearson_triple(series: TripletSeries) -> tuple[CorrelationResult, CorrelationResult, CorrelationResult]:
    """(r_GJ, r_GA, r_JA) for one cell."""
    return (
        pearson(series.g, series.j),
        pearson(series.g, series.a),
        pearson(series.j, series.a),
    )


def generation_accuracy(records: Sequence) -> float:
    """Fraction of generation records whose parsed answer matched gold."""
    if not records:
        raise EmptyInput("no generation records")
    return sum(1 for record in records if record.correct) / len(records)


def judge_prf1(records: Sequence, invalid_policy: InvalidPolicy = InvalidPolicy.EXCLUDE) -> PrfResult:
    """Precision, recall, and F1 of the judge's Correct verdicts.

    The positive class is "agent answer labeled correct".  True positives are
    defined only over valid records, so changing the invalid policy never
    changes tp.  Zero denominators yield 0 for that metric, flagged.
    """
    if not records:
        raise EmptyInput("no judgment records")
    tp = fp = fn = tn = invalid = 0
    for record in records:
        if record.y_pred is None:
            if invalid_policy is InvalidPolicy.EXCLUDE:
                invalid += 1
            elif record.y_star:
                fn += 1
            else:
                fp += 1
        elif record.y_pred and record.y_star:
            tp += 1
        elif record.y_pred and not record.y_star:
            fp += 1
        elif not record.y_pred and record.y_star:
            fn += 1
        else:
            tn += 1
    counts = ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn, invalid=invalid)
    flags = set()
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        flags.add("precision")
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        flags.add("recall")
    if precision + recall > 0:
        # equal to 2pr/(p+r); the integer form divides exactly once
        f1 = (2 * tp) / (2 * tp + fp + fn)
    else:
        f1 = 0.0
        flags.add("f1")
    return PrfResult(precision, recall, f1, counts, frozenset(flags))


def overconfidence(records: Sequence) -> float:
    """Fraction the judge called Correct minus the fraction actually correct.

    Invalid records are excluded from both terms.  Positive means the judge
    systematically over-credits agent answers.
    """
    if not records:
        raise EmptyInput("no judgment records")
    valid = [record for record in records if record.y_pred is not None]
    if not valid:
        raise EmptyInput("no valid judgment records")
    predicted = sum(1 for record in valid if record.y_pred)
    labeled = sum(1 for record in valid if record.y_star)
    return (predicted - labeled) / len(valid)


def weighted_mean(values: Sequence[float], weights: Sequence[int]) -> float:
    """Sample-count-weighted mean, used to average a metric across tasks."""
    if len(values) != len(weights):
        raise LengthMismatch(f"{len(values)} values vs {len(weights)} weights")
    total = sum(weights)
    if total == 0:
        raise EmptyInput("all weights zero")
    return sum(v * w for v, w in zip(values, weights)) / total


def split_two_way(records: Sequence, judge_gen: Mapping[str, bool]) -> tuple[list, list]:
    """Partition judgment records by whether the judge solved the item itself.

    Returns (judge-correct subset, judge-incorrect subset).
    """
    plus: list = []
    minus: list = []
    for record in records:
        if record.item_id not in judge_gen:
            raise MissingJudgeGeneration(record.item_id)
        (plus if judge_gen[record.item_id] else minus).append(record)
    return plus, minus


def split_four_way(
    records: Sequence,
    judge_gen: Mapping[str, bool],
    agent_correct: Mapping[tuple[str, str], bool],
) -> tuple[list, list, list, list]:
    """Refine the two-way split by the agent answer's actual correctness.

    Order: (judge+/agent-correct, judge+/agent-incorrect, judge-/agent-correct,
    judge-/agent-incorrect).
    """
    quadrants: tuple[list, list, list, list] = ([], [], [], [])
    for record in records:
        if record.item_id not in judge_gen:
            raise MissingJudgeGeneration(record.item_id)
        key = (record.agent_model_id, record.item_id)
        if key not in agent_correct:
            raise MissingCorrectnessFlag(*key)
        index = (0 if judge_gen[record.item_id] else 2) + (0 if agent_correct[key] else 1)
        quadrants[index].append(record)
    return quadrants


def classify_strength(value: float) -> Strength:
    """Bucket a correlation by magnitude: weak under 0.3, moderate through 0.5
    inclusive on both ends, strong above."""
    if not -1.0 <= value <= 1.0:
        raise OutOfRange(value)
    magnitude = abs(value)
    if magnitude < 0.3:
        return Strength.WEAK
    if magnitude <= 0.5:
        return Strength.MODERATE
    return Strength.STRONG


def build_triplet_series(
    records: Iterable,
    judge_gen: Mapping[str, bool],
    invalid_policy: InvalidPolicy = InvalidPolicy.EXCLUDE,
) -> TripletSeries:
    """Assemble (G, J, A) bit vectors from judgment records.

    Under EXCLUDE, records without a parsed verdict are skipped entirely;
    under COUNT_AS_INCORRECT they contribute J=0.
    """
    g: list[int] = []
    j: list[int] = []
    a: list[int] = []
    for record in records:
        if record.item_id not in judge_gen:
            raise MissingJudgeGeneration(record.item_id)
        if record.y_pred is None:
            if invalid_policy is InvalidPolicy.EXCLUDE:
                continue
            j_bit = 0
        else:
            j_bit = int(record.j_correct)
        g.append(int(judge_gen[record.item_id]))
        j.append(j_bit)
        a.append(int(record.y_star))
    return TripletSeries(tuple(g), tuple(j), tuple(a))
