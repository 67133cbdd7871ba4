"""Two-stage orchestration: every model answers the task, then a judge scores
each agent answer pointwise against its own knowledge.

Records are persisted as JSONL, one file per (stage, model, task, strategy),
written in (model, item) order regardless of completion order so a warm-cache
rerun reproduces files byte for byte.  Provider failures become failure
records carrying the error string; a resume pass retries only those.
"""

from __future__ import annotations

import json
import os
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import Item, TaskKind, item_kind
from .extraction import ParseOutcome, VerdictFamily, extract_answer, extract_verdict
from .prompts import (
    RenderedPrompt,
    Strategy,
    TemplateRegistry,
    default_registry,
    render_generation_prompt,
    render_judgment_prompt,
)
from .providers import CompletionClient, ModelEndpoint, ProviderError


class PipelineError(Exception):
    pass


class MissingItem(PipelineError):
    def __init__(self, item_id: str):
        super().__init__(f"judgment references unknown item {item_id!r}")
        self.item_id = item_id


class MissingSelfReference(PipelineError):
    def __init__(self, item_id: str):
        super().__init__(
            f"self-reference judging needs the judge's own generation for item {item_id!r}"
        )
        self.item_id = item_id


@dataclass(frozen=True)
class GenerationRecord:
    model_id: str
    item_id: str
    raw_text: str
    parsed: ParseOutcome
    correct: bool
    error: str | None = None

    def as_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "item_id": self.item_id,
            "raw_text": self.raw_text,
            "parsed": self.parsed.as_dict(),
            "correct": self.correct,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationRecord":
        return cls(
            model_id=data["model_id"],
            item_id=data["item_id"],
            raw_text=data["raw_text"],
            parsed=ParseOutcome.from_dict(data["parsed"]),
            correct=bool(data["correct"]),
            error=data.get("error"),
        )


@dataclass(frozen=True)
class JudgmentItem:
    item_id: str
    question: str
    agent_model_id: str
    agent_answer_text: str
    y_star: bool


@dataclass(frozen=True)
class JudgmentRecord:
    judge_model_id: str
    agent_model_id: str
    item_id: str
    strategy: Strategy
    raw_text: str
    parsed: ParseOutcome
    y_pred: bool | None
    y_star: bool
    j_correct: bool | None
    error: str | None = None

    def as_dict(self) -> dict:
        return {
            "judge_model_id": self.judge_model_id,
            "agent_model_id": self.agent_model_id,
            "item_id": self.item_id,
            "strategy": self.strategy.value,
            "raw_text": self.raw_text,
            "parsed": self.parsed.as_dict(),
            "y_pred": self.y_pred,
            "y_star": self.y_star,
            "j_correct": self.j_correct,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "JudgmentRecord":
        return cls(
            judge_model_id=data["judge_model_id"],
            agent_model_id=data["agent_model_id"],
            item_id=data["item_id"],
            strategy=Strategy(data["strategy"]),
            raw_text=data["raw_text"],
            parsed=ParseOutcome.from_dict(data["parsed"]),
            y_pred=data["y_pred"],
            y_star=bool(data["y_star"]),
            j_correct=data["j_correct"],
            error=data.get("error"),
        )


# --- run directory layout ----------------------------------------------------

def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in name) or "_"


def generation_path(run_dir: str | Path, model_id: str, task_id: str) -> Path:
    return Path(run_dir) / "generation" / f"{_slug(model_id)}__{_slug(task_id)}.jsonl"


def judgment_path(run_dir: str | Path, judge_id: str, task_id: str, strategy: Strategy) -> Path:
    name = f"{_slug(judge_id)}__{_slug(task_id)}__{strategy.value}.jsonl"
    return Path(run_dir) / "judgment" / name


def generation_prompts_path(run_dir: str | Path, model_id: str, task_id: str) -> Path:
    return Path(run_dir) / "prompts" / f"generation__{_slug(model_id)}__{_slug(task_id)}.jsonl"


def judgment_prompts_path(
    run_dir: str | Path, judge_id: str, task_id: str, strategy: Strategy
) -> Path:
    name = f"judgment__{_slug(judge_id)}__{_slug(task_id)}__{strategy.value}.jsonl"
    return Path(run_dir) / "prompts" / name


def items_path(run_dir: str | Path, task_id: str) -> Path:
    return Path(run_dir) / "items" / f"{_slug(task_id)}.jsonl"


def write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    """Atomic, deterministic JSONL write: sorted keys, \\n line ends."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def load_generation_records(path: Path) -> list[GenerationRecord]:
    return [GenerationRecord.from_dict(row) for row in read_jsonl(path)]


def load_judgment_records(path: Path) -> list[JudgmentRecord]:
    return [JudgmentRecord.from_dict(row) for row in read_jsonl(path)]


# --- stages ------------------------------------------------------------------

def _dedup_endpoints(models: Sequence[ModelEndpoint]) -> list[ModelEndpoint]:
    # A model on both the agent and judge rosters generates once per item.
    seen: dict[str, ModelEndpoint] = {}
    for endpoint in models:
        seen.setdefault(endpoint.model_id, endpoint)
    return list(seen.values())


def _single_task_id(items: Sequence[Item]) -> str:
    task_ids = {item.task_id for item in items}
    if len(task_ids) != 1:
        raise PipelineError(f"items span tasks {sorted(task_ids)}; one task per stage call")
    return task_ids.pop()


def run_generation_stage(
    client: CompletionClient,
    models: Sequence[ModelEndpoint],
    items: Sequence[Item],
    run_dir: str | Path | None = None,
    resume: bool = False,
    registry: TemplateRegistry | None = None,
    max_workers: int = 8,
) -> list[GenerationRecord]:
    """Ask every model to answer every item; parse and score each reply.

    Returns records ordered by (model roster order, item order).  Provider
    errors never abort the stage; they become failure records.  With resume,
    previously persisted successful records are kept and only failures and
    gaps are re-requested.
    """
    if not models:
        raise PipelineError("no models given")
    if not items:
        raise PipelineError("no items given")
    endpoints = _dedup_endpoints(models)
    task_id = _single_task_id(items)
    registry = registry or default_registry()
    prompts = [render_generation_prompt(item, registry) for item in items]

    kept: dict[tuple[str, str], GenerationRecord] = {}
    if resume and run_dir is not None:
        for endpoint in endpoints:
            path = generation_path(run_dir, endpoint.model_id, task_id)
            if path.exists():
                for record in load_generation_records(path):
                    if record.error is None:
                        kept[(record.model_id, record.item_id)] = record

    def fetch(endpoint: ModelEndpoint, item: Item, prompt: RenderedPrompt) -> GenerationRecord:
        existing = kept.get((endpoint.model_id, item.item_id))
        if existing is not None:
            return existing
        try:
            completion = client.complete(endpoint, prompt)
        except ProviderError as exc:
            parsed = extract_answer("", item_kind(item))
            return GenerationRecord(
                model_id=endpoint.model_id,
                item_id=item.item_id,
                raw_text="",
                parsed=parsed,
                correct=False,
                error=f"{type(exc).__name__}: {exc}",
            )
        parsed = extract_answer(completion.text, item_kind(item))
        correct = bool(parsed.valid and parsed.value == item.gold)
        return GenerationRecord(
            model_id=endpoint.model_id,
            item_id=item.item_id,
            raw_text=completion.text,
            parsed=parsed,
            correct=correct,
        )

    jobs = [(endpoint, item, prompt) for endpoint in endpoints for item, prompt in zip(items, prompts)]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        records = list(pool.map(lambda job: fetch(*job), jobs))

    if run_dir is not None:
        per_model: dict[str, list[GenerationRecord]] = {}
        for record in records:
            per_model.setdefault(record.model_id, []).append(record)
        for endpoint in endpoints:
            model_records = per_model[endpoint.model_id]
            write_jsonl(
                generation_path(run_dir, endpoint.model_id, task_id),
                [record.as_dict() for record in model_records],
            )
            write_jsonl(
                generation_prompts_path(run_dir, endpoint.model_id, task_id),
                [
                    {
                        "item_id": item.item_id,
                        "template_id": prompt.template_id,
                        "bindings_digest": prompt.bindings_digest,
                        "text": prompt.text,
                    }
                    for item, prompt in zip(items, prompts)
                ],
            )
    return records


def build_judgment_dataset(
    agent_records: Sequence[GenerationRecord], items: Sequence[Item]
) -> list[JudgmentItem]:
    """One judgment item per agent record, labeled by that record's correctness."""
    by_id = {item.item_id: item for item in items}
    dataset = []
    for record in agent_records:
        if record.item_id not in by_id:
            raise MissingItem(record.item_id)
        item = by_id[record.item_id]
        dataset.append(
            JudgmentItem(
                item_id=record.item_id,
                question=item.question,
                agent_model_id=record.model_id,
                agent_answer_text=record.raw_text,
                y_star=record.correct,
            )
        )
    return dataset


def run_judgment_stage(
    client: CompletionClient,
    judge: ModelEndpoint,
    judgment_items: Sequence[JudgmentItem],
    strategy: Strategy,
    judge_generation: Mapping[str, GenerationRecord],
    items: Sequence[Item],
    run_dir: str | Path | None = None,
    resume: bool = False,
    registry: TemplateRegistry | None = None,
    max_workers: int = 8,
) -> list[JudgmentRecord]:
    """Collect one pointwise verdict per (agent, item) from the judge.

    Under the self-reference strategy the judge's own stage-one output for the
    item is embedded in the prompt; completeness of judge_generation is
    checked up front, before any provider call.
    """
    if not judgment_items:
        raise PipelineError("no judgment items given")
    items_by_id = {item.item_id: item for item in items}
    for judgment_item in judgment_items:
        if judgment_item.item_id not in items_by_id:
            raise MissingItem(judgment_item.item_id)
    if strategy is Strategy.SELF_REFERENCE:
        for judgment_item in judgment_items:
            record = judge_generation.get(judgment_item.item_id)
            if record is None or not record.raw_text:
                raise MissingSelfReference(judgment_item.item_id)
    registry = registry or default_registry()
    task_id = _single_task_id([items_by_id[ji.item_id] for ji in judgment_items])

    rendered: list[RenderedPrompt] = []
    for judgment_item in judgment_items:
        item = items_by_id[judgment_item.item_id]
        reference = None
        if strategy is Strategy.SELF_REFERENCE:
            reference = judge_generation[judgment_item.item_id].raw_text
        rendered.append(
            render_judgment_prompt(
                item, judgment_item.agent_answer_text, strategy, reference, registry
            )
        )

    kept: dict[tuple[str, str], JudgmentRecord] = {}
    if resume and run_dir is not None:
        path = judgment_path(run_dir, judge.model_id, task_id, strategy)
        if path.exists():
            for record in load_judgment_records(path):
                if record.error is None:
                    kept[(record.agent_model_id, record.item_id)] = record

    def fetch(judgment_item: JudgmentItem, prompt: RenderedPrompt) -> JudgmentRecord:
        existing = kept.get((judgment_item.agent_model_id, judgment_item.item_id))
        if existing is not None:
            return existing
        kind = item_kind(items_by_id[judgment_item.item_id])
        family = (
            VerdictFamily.META_JUDGE
            if kind is TaskKind.PAIRWISE_VERDICT
            else VerdictFamily.POINTWISE
        )
        try:
            completion = client.complete(judge, prompt)
        except ProviderError as exc:
            return JudgmentRecord(
                judge_model_id=judge.model_id,
                agent_model_id=judgment_item.agent_model_id,
                item_id=judgment_item.item_id,
                strategy=strategy,
                raw_text="",
                parsed=extract_verdict("", family),
                y_pred=None,
                y_star=judgment_item.y_star,
                j_correct=None,
                error=f"{type(exc).__name__}: {exc}",
            )
        parsed = extract_verdict(completion.text, family)
        y_pred = bool(parsed.value) if parsed.valid else None
        return JudgmentRecord(
            judge_model_id=judge.model_id,
            agent_model_id=judgment_item.agent_model_id,
            item_id=judgment_item.item_id,
            strategy=strategy,
            raw_text=completion.text,
            parsed=parsed,
            y_pred=y_pred,
            y_star=judgment_item.y_star,
            j_correct=None if y_pred is None else (y_pred == judgment_item.y_star),
        )

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        records = list(pool.map(lambda pair: fetch(*pair), zip(judgment_items, rendered)))

    if run_dir is not None:
        write_jsonl(
            judgment_path(run_dir, judge.model_id, task_id, strategy),
            [record.as_dict() for record in records],
        )
        write_jsonl(
            judgment_prompts_path(run_dir, judge.model_id, task_id, strategy),
            [
                {
                    "item_id": judgment_item.item_id,
                    "agent_model_id": judgment_item.agent_model_id,
                    "template_id": prompt.template_id,
                    "bindings_digest": prompt.bindings_digest,
                    "text": prompt.text,
                }
                for judgment_item, prompt in zip(judgment_items, rendered)
            ],
        )
    return records


# --- run manifest ------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Everything needed to re-execute a run deterministically against the
    cache: rosters, task sampling records, template digests, and settings."""

    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    seed: int | None = None
    tasks: list[dict] = field(default_factory=list)
    agents: list[str] = field(default_factory=list)
    judges: list[str] = field(default_factory=list)
    strategies: list[str] = field(default_factory=list)
    template_digests: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict)
    message_mode: str = "single_user_message"
    notes: list[str] = field(default_factory=list)
    created_at: str = field(default_factory=_now)
    updated_at: str = field(default_factory=_now)

    PATH_NAME = "manifest.json"

    def add_task(self, sampling: dict) -> None:
        existing = [t for t in self.tasks if t["task_id"] == sampling["task_id"]]
        if existing:
            existing[0].update(sampling)
        else:
            self.tasks.append(sampling)

    def add_models(self, agents: Sequence[str] = (), judges: Sequence[str] = ()) -> None:
        for model_id in agents:
            if model_id not in self.agents:
                self.agents.append(model_id)
        for model_id in judges:
            if model_id not in self.judges:
                self.judges.append(model_id)

    def add_strategy(self, strategy: Strategy) -> None:
        if strategy.value not in self.strategies:
            self.strategies.append(strategy.value)

    def note(self, text: str) -> None:
        if text not in self.notes:
            self.notes.append(text)

    def note_endpoint(self, endpoint: ModelEndpoint) -> None:
        if endpoint.temperature != 0.0:
            self.note(
                f"model {endpoint.model_id} sampled at temperature "
                f"{endpoint.temperature}: outputs are non-reproducible"
            )

    def save(self, run_dir: str | Path) -> None:
        self.updated_at = _now()
        path = Path(run_dir) / self.PATH_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        data = {
            "run_id": self.run_id,
            "seed": self.seed,
            "tasks": self.tasks,
            "agents": self.agents,
            "judges": self.judges,
            "strategies": self.strategies,
            "template_digests": self.template_digests,
            "cache": self.cache,
            "message_mode": self.message_mode,
            "notes": self.notes,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / cls.PATH_NAME
        data = json.loads(path.read_text(encoding="utf-8"))
        return cls(**data)

    @classmethod
    def load_or_create(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / cls.PATH_NAME
        if path.exists():
            return cls.load(run_dir)
        return cls()
