"""Analysis over a completed run directory, and deterministic emissions.

analyze_run folds persisted records into one cell per (judge, task, strategy):
accuracy, verdict precision/recall/F1, the splits by the judge's own
generation correctness, overconfidence, and the correlation block.  The
report serializes to canonical JSON and the emitters write CSV, Markdown,
and SVG files that are byte-identical across reruns of the same run.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import TaskKind, TaskSpec, load_dataset
from .metrics import (
    EmptyInput,
    InvalidPolicy,
    classify_strength,
    build_triplet_series,
    generation_accuracy,
    judge_prf1,
    overconfidence,
    partial_correlation_from_series,
    pearson_triple,
    split_four_way,
    split_two_way,
    weighted_mean,
)
from .pipeline import (
    RunManifest,
    generation_path,
    items_path,
    judgment_path,
    load_generation_records,
    load_judgment_records,
)
from .prompts import Strategy

FOUR_WAY_LABELS = (
    "judge_correct_agent_correct",
    "judge_correct_agent_incorrect",
    "judge_incorrect_agent_correct",
    "judge_incorrect_agent_incorrect",
)


class ReportError(Exception):
    pass


class IncompleteReport(ReportError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class SubsetScore:
    """F1 over a record subset; f1 is None when the subset is empty."""

    f1: float | None
    size: int
    zero_division: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {"f1": self.f1, "size": self.size, "zero_division": list(self.zero_division)}

    @classmethod
    def from_dict(cls, data: dict) -> "SubsetScore":
        return cls(data["f1"], data["size"], tuple(data["zero_division"]))


@dataclass(frozen=True)
class CorrelationBlock:
    value: float
    degenerate: bool
    n: int

    def as_dict(self) -> dict:
        return {"value": self.value, "degenerate": self.degenerate, "n": self.n}

    @classmethod
    def from_dict(cls, data: dict) -> "CorrelationBlock":
        return cls(data["value"], data["degenerate"], data["n"])


@dataclass(frozen=True)
class CellReport:
    """All measurements for one (judge, task, strategy) combination."""

    judge_model_id: str
    task_id: str
    strategy: str
    agents: tuple[str, ...]
    n_records: int
    invalid_count: int
    judge_generation_accuracy: float
    agent_generation_accuracy: dict
    precision: float
    recall: float
    f1: float
    zero_division: tuple[str, ...]
    f1_plus: SubsetScore
    f1_minus: SubsetScore
    delta: float | None
    four_way: tuple[SubsetScore, SubsetScore, SubsetScore, SubsetScore]
    overconfidence: float
    r_gj: CorrelationBlock
    r_ga: CorrelationBlock
    r_ja: CorrelationBlock
    partial: CorrelationBlock
    strength: str

    def as_dict(self) -> dict:
        return {
            "judge_model_id": self.judge_model_id,
            "task_id": self.task_id,
            "strategy": self.strategy,
            "agents": list(self.agents),
            "n_records": self.n_records,
            "invalid_count": self.invalid_count,
            "judge_generation_accuracy": self.judge_generation_accuracy,
            "agent_generation_accuracy": dict(self.agent_generation_accuracy),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "zero_division": list(self.zero_division),
            "f1_plus": self.f1_plus.as_dict(),
            "f1_minus": self.f1_minus.as_dict(),
            "delta": self.delta,
            "four_way": {
                label: score.as_dict()
                for label, score in zip(FOUR_WAY_LABELS, self.four_way)
            },
            "overconfidence": self.overconfidence,
            "r_gj": self.r_gj.as_dict(),
            "r_ga": self.r_ga.as_dict(),
            "r_ja": self.r_ja.as_dict(),
            "partial": self.partial.as_dict(),
            "strength": self.strength,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CellReport":
        return cls(
            judge_model_id=data["judge_model_id"],
            task_id=data["task_id"],
            strategy=data["strategy"],
            agents=tuple(data["agents"]),
            n_records=data["n_records"],
            invalid_count=data["invalid_count"],
            judge_generation_accuracy=data["judge_generation_accuracy"],
            agent_generation_accuracy=dict(data["agent_generation_accuracy"]),
            precision=data["precision"],
            recall=data["recall"],
            f1=data["f1"],
            zero_division=tuple(data["zero_division"]),
            f1_plus=SubsetScore.from_dict(data["f1_plus"]),
            f1_minus=SubsetScore.from_dict(data["f1_minus"]),
            delta=data["delta"],
            four_way=tuple(
                SubsetScore.from_dict(data["four_way"][label]) for label in FOUR_WAY_LABELS
            ),
            overconfidence=data["overconfidence"],
            r_gj=CorrelationBlock.from_dict(data["r_gj"]),
            r_ga=CorrelationBlock.from_dict(data["r_ga"]),
            r_ja=CorrelationBlock.from_dict(data["r_ja"]),
            partial=CorrelationBlock.from_dict(data["partial"]),
            strength=data["strength"],
        )


@dataclass
class AnalysisReport:
    run_id: str
    invalid_policy: str
    include_ties: bool
    judges: list[str]
    agents: list[str]
    tasks: list[str]
    strategies: list[str]
    cells: list[CellReport] = field(default_factory=list)

    def cell(self, judge: str, task: str, strategy: str) -> CellReport:
        for candidate in self.cells:
            if (candidate.judge_model_id, candidate.task_id, candidate.strategy) == (
                judge, task, strategy,
            ):
                return candidate
        raise KeyError((judge, task, strategy))

    def as_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "invalid_policy": self.invalid_policy,
            "include_ties": self.include_ties,
            "judges": self.judges,
            "agents": self.agents,
            "tasks": self.tasks,
            "strategies": self.strategies,
            "cells": [cell.as_dict() for cell in self.cells],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnalysisReport":
        return cls(
            run_id=data["run_id"],
            invalid_policy=data["invalid_policy"],
            include_ties=data["include_ties"],
            judges=list(data["judges"]),
            agents=list(data["agents"]),
            tasks=list(data["tasks"]),
            strategies=list(data["strategies"]),
            cells=[CellReport.from_dict(cell) for cell in data["cells"]],
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(
            json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "AnalysisReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _subset_score(records: Sequence, invalid_policy: InvalidPolicy) -> SubsetScore:
    if not records:
        return SubsetScore(f1=None, size=0)
    result = judge_prf1(records, invalid_policy)
    return SubsetScore(
        f1=result.f1, size=len(records), zero_division=tuple(sorted(result.zero_division))
    )


def _tie_item_ids(run_dir: Path, task: dict) -> frozenset[str]:
    kind = TaskKind(task["kind"])
    if kind is not TaskKind.PAIRWISE_VERDICT:
        return frozenset()
    path = items_path(run_dir, task["task_id"])
    if not path.exists():
        raise IncompleteReport(f"missing items file {path}")
    spec = TaskSpec(task_id=task["task_id"], kind=kind)
    items = load_dataset(path, spec)
    return frozenset(item.item_id for item in items if item.gold.value == "C")


def analyze_cell(
    judgments: Sequence,
    judge_records: Sequence,
    agent_records_by_model: dict,
    invalid_policy: InvalidPolicy,
) -> dict:
    """Fold one cell's records into measurement values; keys mirror CellReport."""
    judge_flags = {r.item_id: r.correct for r in judge_records}
    agent_correct = {
        (model_id, r.item_id): r.correct
        for model_id, records in agent_records_by_model.items()
        for r in records
    }
    prf = judge_prf1(judgments, invalid_policy)
    plus, minus = split_two_way(judgments, judge_flags)
    score_plus = _subset_score(plus, invalid_policy)
    score_minus = _subset_score(minus, invalid_policy)
    delta = None
    if score_plus.f1 is not None and score_minus.f1 is not None:
        delta = score_plus.f1 - score_minus.f1
    quadrants = split_four_way(judgments, judge_flags, agent_correct)
    series = build_triplet_series(judgments, judge_flags, invalid_policy)
    r_gj, r_ga, r_ja = pearson_triple(series)
    partial = partial_correlation_from_series(series)
    return {
        "n_records": len(judgments),
        "invalid_count": sum(1 for r in judgments if r.y_pred is None),
        "judge_generation_accuracy": generation_accuracy(judge_records),
        "agent_generation_accuracy": {
            model_id: generation_accuracy(records)
            for model_id, records in agent_records_by_model.items()
        },
        "precision": prf.precision,
        "recall": prf.recall,
        "f1": prf.f1,
        "zero_division": tuple(sorted(prf.zero_division)),
        "f1_plus": score_plus,
        "f1_minus": score_minus,
        "delta": delta,
        "four_way": tuple(_subset_score(q, invalid_policy) for q in quadrants),
        "overconfidence": overconfidence(judgments),
        "r_gj": CorrelationBlock(r_gj.value, r_gj.degenerate, r_gj.n),
        "r_ga": CorrelationBlock(r_ga.value, r_ga.degenerate, r_ga.n),
        "r_ja": CorrelationBlock(r_ja.value, r_ja.degenerate, r_ja.n),
        "partial": CorrelationBlock(partial.value, partial.degenerate, partial.n),
        "strength": classify_strength(partial.value).value,
    }


def analyze_run(
    run_dir: str | Path,
    invalid_policy: InvalidPolicy = InvalidPolicy.EXCLUDE,
    include_ties: bool = True,
) -> AnalysisReport:
    """Build the full report for a run directory.

    Every (judge, task, strategy) cell named by the run manifest must have
    complete persisted records; a missing file or an unresolved provider
    failure raises IncompleteReport rather than producing partial numbers.
    """
    run_dir = Path(run_dir)
    manifest_file = run_dir / RunManifest.PATH_NAME
    if not manifest_file.exists():
        raise IncompleteReport(f"missing run manifest {manifest_file}")
    manifest = RunManifest.load(run_dir)
    if not manifest.tasks:
        raise IncompleteReport("run manifest lists no tasks")
    if not manifest.judges:
        raise IncompleteReport("run manifest lists no judges")
    if not manifest.strategies:
        raise IncompleteReport("run manifest lists no judgment strategies")

    report = AnalysisReport(
        run_id=manifest.run_id,
        invalid_policy=invalid_policy.value,
        include_ties=include_ties,
        judges=list(manifest.judges),
        agents=list(manifest.agents),
        tasks=[task["task_id"] for task in manifest.tasks],
        strategies=list(manifest.strategies),
    )

    def load_records(path: Path, loader):
        if not path.exists():
            raise IncompleteReport(f"missing records file {path}")
        records = loader(path)
        failed = [r for r in records if r.error is not None]
        if failed:
            raise IncompleteReport(
                f"{path} holds {len(failed)} failed request(s); resume the run first"
            )
        return records

    for strategy in manifest.strategies:
        for task in manifest.tasks:
            task_id = task["task_id"]
            drop = frozenset() if include_ties else _tie_item_ids(run_dir, task)
            agent_records_by_model = {}
            for agent_id in manifest.agents:
                records = load_records(
                    generation_path(run_dir, agent_id, task_id), load_generation_records
                )
                agent_records_by_model[agent_id] = [
                    r for r in records if r.item_id not in drop
                ]
            for judge_id in manifest.judges:
                judge_records = load_records(
                    generation_path(run_dir, judge_id, task_id), load_generation_records
                )
                judge_records = [r for r in judge_records if r.item_id not in drop]
                judgments = load_records(
                    judgment_path(run_dir, judge_id, task_id, Strategy(strategy)),
                    load_judgment_records,
                )
                judgments = [r for r in judgments if r.item_id not in drop]
                if not judgments:
                    raise IncompleteReport(
                        f"no judgment records left for judge {judge_id} on task "
                        f"{task_id} under strategy {strategy}"
                    )
                try:
                    values = analyze_cell(
                        judgments, judge_records, agent_records_by_model, invalid_policy
                    )
                except EmptyInput as exc:
                    raise IncompleteReport(
                        f"judge {judge_id}, task {task_id}, strategy {strategy}: {exc}"
                    )
                report.cells.append(
                    CellReport(
                        judge_model_id=judge_id,
                        task_id=task_id,
                        strategy=strategy,
                        agents=tuple(manifest.agents),
                        **values,
                    )
                )
    return report


# --- emission ----------------------------------------------------------------

def _pct(value: float | None) -> str:
    return "NA" if value is None else f"{value * 100:.2f}"


def _corr(block: CorrelationBlock) -> str:
    return f"{block.value:.4f}"


def _strength_tag(block: CorrelationBlock) -> str:
    if block.degenerate:
        return "degenerate"
    return classify_strength(round(block.value, 4)).value


def _delta_display(plus: SubsetScore, minus: SubsetScore) -> str:
    # recomputed from the two displayed percentages so the printed triple
    # is internally consistent digit for digit
    if plus.f1 is None or minus.f1 is None:
        return "NA"
    return f"{round(plus.f1 * 100, 2) - round(minus.f1 * 100, 2):.2f}"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def _write_md(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(" --- " for _ in header) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(row) + " |")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _write_table(out_dir: Path, name: str, fmt: str, header, rows) -> Path:
    path = out_dir / f"{name}.{fmt}"
    if fmt == "csv":
        _write_csv(path, header, rows)
    elif fmt == "md":
        _write_md(path, header, rows)
    else:
        raise ReportError(f"unknown table format {fmt!r}")
    return path


def emit_judge_table(report: AnalysisReport, out_dir: str | Path, fmt: str = "csv") -> list[Path]:
    """Per strategy: one row per judge; per task a triple of columns holding
    F1 on the judge-correct subset, on the judge-incorrect subset, and the
    gap between the two displayed percentages."""
    out_dir = Path(out_dir)
    written = []
    for strategy in report.strategies:
        header = ["judge"]
        for task_id in report.tasks:
            header += [f"{task_id} ✓", f"{task_id} ✗", f"{task_id} Δ"]
        rows = []
        for judge_id in report.judges:
            row = [judge_id]
            for task_id in report.tasks:
                cell = report.cell(judge_id, task_id, strategy)
                row += [
                    _pct(cell.f1_plus.f1),
                    _pct(cell.f1_minus.f1),
                    _delta_display(cell.f1_plus, cell.f1_minus),
                ]
            rows.append(row)
        written.append(_write_table(out_dir, f"judge_table__{strategy}", fmt, header, rows))
    return written


def emit_heatmap_matrix(
    report: AnalysisReport, out_dir: str | Path, fmt: str = "csv"
) -> list[Path]:
    """Per (task, strategy): judges down the rows, the four judge-state by
    agent-state subsets across the columns, F1 as cell value."""
    out_dir = Path(out_dir)
    header = ["judge", *FOUR_WAY_LABELS]
    written = []
    for strategy in report.strategies:
        for task_id in report.tasks:
            rows = []
            for judge_id in report.judges:
                cell = report.cell(judge_id, task_id, strategy)
                rows.append([judge_id] + [_pct(score.f1) for score in cell.four_way])
            written.append(
                _write_table(out_dir, f"heatmap__{task_id}__{strategy}", fmt, header, rows)
            )
    return written


def emit_overconfidence_table(
    report: AnalysisReport, out_dir: str | Path, fmt: str = "csv"
) -> list[Path]:
    """Per strategy: signed overconfidence per task plus a weighted average,
    weights being each cell's valid-record count."""
    out_dir = Path(out_dir)
    header = ["judge", *report.tasks, "Avg"]
    written = []
    for strategy in report.strategies:
        rows = []
        for judge_id in report.judges:
            values, weights, row = [], [], [judge_id]
            for task_id in report.tasks:
                cell = report.cell(judge_id, task_id, strategy)
                values.append(cell.overconfidence)
                weights.append(cell.n_records - cell.invalid_count)
                row.append(f"{cell.overconfidence * 100:+.2f}")
            row.append(f"{weighted_mean(values, weights) * 100:+.2f}")
            rows.append(row)
        written.append(
            _write_table(out_dir, f"overconfidence__{strategy}", fmt, header, rows)
        )
    return written


def emit_correlation_table(
    report: AnalysisReport, out_dir: str | Path, fmt: str = "csv"
) -> list[Path]:
    """Per strategy: the three pairwise coefficients, the generation ability
    against judgment ability value with agent difficulty held fixed, and its
    strength bucket recomputed from the displayed 4-decimal value."""
    out_dir = Path(out_dir)
    header = ["judge", "task", "r_gj", "r_ga", "r_ja", "partial_gj_given_a", "strength", "n"]
    written = []
    for strategy in report.strategies:
        rows = []
        for judge_id in report.judges:
            for task_id in report.tasks:
                cell = report.cell(judge_id, task_id, strategy)
                rows.append(
                    [
                        judge_id,
                        task_id,
                        _corr(cell.r_gj),
                        _corr(cell.r_ga),
                        _corr(cell.r_ja),
                        _corr(cell.partial),
                        _strength_tag(cell.partial),
                        str(cell.partial.n),
                    ]
                )
        written.append(_write_table(out_dir, f"correlation__{strategy}", fmt, header, rows))
    return written


SVG_WIDTH = 640
SVG_HEIGHT = 480
SVG_MARGIN = 60


def _svg_x(value: float) -> float:
    return SVG_MARGIN + value * (SVG_WIDTH - 2 * SVG_MARGIN) / 100.0


def _svg_y(value: float) -> float:
    return SVG_HEIGHT - SVG_MARGIN - value * (SVG_HEIGHT - 2 * SVG_MARGIN) / 100.0


def emit_scatter(report: AnalysisReport, out_dir: str | Path) -> list[Path]:
    """Per (task, strategy): a CSV of (judge, generation accuracy, verdict F1)
    points plus a self-contained SVG rendering of the same points."""
    out_dir = Path(out_dir)
    written = []
    for strategy in report.strategies:
        for task_id in report.tasks:
            points = []
            for judge_id in report.judges:
                cell = report.cell(judge_id, task_id, strategy)
                points.append(
                    (judge_id, cell.judge_generation_accuracy * 100, cell.f1 * 100)
                )
            csv_path = out_dir / f"scatter__{task_id}__{strategy}.csv"
            _write_csv(
                csv_path,
                ["judge", "generation_accuracy", "judgment_f1"],
                [[judge, f"{acc:.2f}", f"{f1:.2f}"] for judge, acc, f1 in points],
            )
            written.append(csv_path)

            parts = [
                f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" '
                f'height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">',
                f'<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
                f'<line x1="{SVG_MARGIN}" y1="{SVG_HEIGHT - SVG_MARGIN}" '
                f'x2="{SVG_WIDTH - SVG_MARGIN}" y2="{SVG_HEIGHT - SVG_MARGIN}" stroke="black"/>',
                f'<line x1="{SVG_MARGIN}" y1="{SVG_MARGIN}" '
                f'x2="{SVG_MARGIN}" y2="{SVG_HEIGHT - SVG_MARGIN}" stroke="black"/>',
            ]
            for tick in range(0, 101, 20):
                x = _svg_x(tick)
                y = _svg_y(tick)
                parts.append(
                    f'<line x1="{x:.1f}" y1="{SVG_HEIGHT - SVG_MARGIN}" x2="{x:.1f}" '
                    f'y2="{SVG_HEIGHT - SVG_MARGIN + 5}" stroke="black"/>'
                )
                parts.append(
                    f'<text x="{x:.1f}" y="{SVG_HEIGHT - SVG_MARGIN + 18}" '
                    f'font-size="10" text-anchor="middle">{tick}</text>'
                )
                parts.append(
                    f'<line x1="{SVG_MARGIN - 5}" y1="{y:.1f}" x2="{SVG_MARGIN}" '
                    f'y2="{y:.1f}" stroke="black"/>'
                )
                parts.append(
                    f'<text x="{SVG_MARGIN - 8}" y="{y + 3:.1f}" font-size="10" '
                    f'text-anchor="end">{tick}</text>'
                )
            parts.append(
                f'<text x="{SVG_WIDTH / 2:.1f}" y="{SVG_HEIGHT - 15}" font-size="12" '
                f'text-anchor="middle">Generation accuracy (%)</text>'
            )
            parts.append(
                f'<text x="18" y="{SVG_HEIGHT / 2:.1f}" font-size="12" text-anchor="middle" '
                f'transform="rotate(-90 18 {SVG_HEIGHT / 2:.1f})">Judgment F1 (%)</text>'
            )
            parts.append(
                f'<text x="{SVG_WIDTH / 2:.1f}" y="25" font-size="13" text-anchor="middle">'
                f"{task_id} / {strategy}</text>"
            )
            for judge, acc, f1 in points:
                x = _svg_x(acc)
                y = _svg_y(f1)
                parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="steelblue"/>')
                parts.append(
                    f'<text x="{x + 6:.2f}" y="{y - 6:.2f}" font-size="10">{judge}</text>'
                )
            parts.append("</svg>")
            svg_path = out_dir / f"scatter__{task_id}__{strategy}.svg"
            svg_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = svg_path.with_name(svg_path.name + ".tmp")
            tmp.write_text("\n".join(parts) + "\n", encoding="utf-8")
            os.replace(tmp, svg_path)
            written.append(svg_path)
    return written


def emit_all(
    report: AnalysisReport, out_dir: str | Path, formats: Sequence[str] = ("csv", "md")
) -> list[Path]:
    written = []
    for fmt in formats:
        written += emit_judge_table(report, out_dir, fmt)
        written += emit_heatmap_matrix(report, out_dir, fmt)
        written += emit_overconfidence_table(report, out_dir, fmt)
        written += emit_correlation_table(report, out_dir, fmt)
    written += emit_scatter(report, out_dir)
    return written
