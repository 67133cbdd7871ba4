"""Command-line front end: generate, judge, analyze, report.

A run is a directory the subcommands build up in order: `generate` samples
each task and collects every model's answers, `judge` collects one verdict
per agent answer, `analyze` folds the records into report.json, and
`report` renders tables and plots from it.  All state lives in files, so
any step can be re-run or resumed later.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .corpus import (
    DatasetError,
    TaskKind,
    TaskSpec,
    load_dataset,
    sample_items,
    sampling_manifest,
    save_dataset,
)
from .metrics import InvalidPolicy, MetricError
from .pipeline import (
    PipelineError,
    RunManifest,
    build_judgment_dataset,
    generation_path,
    items_path,
    load_generation_records,
    run_generation_stage,
    run_judgment_stage,
)
from .prompts import PromptError, Strategy, TemplateRegistry, default_registry
from .providers import CompletionClient, ModelEndpoint, ProviderError
from .report import (
    AnalysisReport,
    IncompleteReport,
    ReportError,
    analyze_run,
    emit_correlation_table,
    emit_heatmap_matrix,
    emit_judge_table,
    emit_overconfidence_table,
    emit_scatter,
)


class ConfigError(Exception):
    pass


@dataclass
class TaskConfig:
    spec: TaskSpec
    source: Path


@dataclass
class RunConfig:
    seed: int
    cache_dir: Path | None
    templates_dir: Path | None
    endpoints: dict[str, ModelEndpoint]
    tasks: dict[str, TaskConfig]


_ENDPOINT_KEYS = {
    "model_id",
    "base_url",
    "api_key_env",
    "temperature",
    "max_tokens",
    "timeout",
    "reply_path",
    "max_in_flight",
    "script",
}


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    base = path.parent

    endpoints: dict[str, ModelEndpoint] = {}
    for entry in data.get("models", []):
        if "model_id" not in entry:
            raise ConfigError("every models entry needs a model_id")
        unknown = set(entry) - _ENDPOINT_KEYS
        if unknown:
            raise ConfigError(
                f"model {entry['model_id']}: unknown key(s) {sorted(unknown)}"
            )
        kwargs = {k: v for k, v in entry.items() if k != "script"}
        if "script" in entry:
            kwargs["script_path"] = str(_resolve(base, entry["script"]))
        endpoint = ModelEndpoint(**kwargs)
        if endpoint.model_id in endpoints:
            raise ConfigError(f"model {endpoint.model_id} listed twice")
        endpoints[endpoint.model_id] = endpoint
    if not endpoints:
        raise ConfigError("config lists no models")

    tasks: dict[str, TaskConfig] = {}
    for entry in data.get("tasks", []):
        for name in ("task_id", "kind", "path"):
            if name not in entry:
                raise ConfigError(f"every tasks entry needs {name!r}")
        try:
            kind = TaskKind(entry["kind"])
        except ValueError:
            raise ConfigError(f"task {entry['task_id']}: unknown kind {entry['kind']!r}")
        source = _resolve(base, entry["path"])
        if not source.exists():
            raise ConfigError(f"task {entry['task_id']}: dataset {source} not found")
        sample_size = entry.get("sample_size")
        if sample_size is None:
            with open(source, encoding="utf-8") as handle:
                sample_size = sum(1 for line in handle if line.strip())
        spec = TaskSpec(
            task_id=entry["task_id"],
            kind=kind,
            display_name=entry.get("display_name", ""),
            sample_size=int(sample_size),
        )
        if spec.task_id in tasks:
            raise ConfigError(f"task {spec.task_id} listed twice")
        tasks[spec.task_id] = TaskConfig(spec=spec, source=source)
    if not tasks:
        raise ConfigError("config lists no tasks")

    cache_dir = data.get("cache_dir")
    templates_dir = data.get("templates")
    return RunConfig(
        seed=int(data.get("seed", 0)),
        cache_dir=_resolve(base, cache_dir) if cache_dir else None,
        templates_dir=_resolve(base, templates_dir) if templates_dir else None,
        endpoints=endpoints,
        tasks=tasks,
    )


def _registry(config: RunConfig) -> TemplateRegistry:
    if config.templates_dir is not None:
        return TemplateRegistry.from_dir(config.templates_dir)
    return default_registry()


def _client(config: RunConfig, args) -> CompletionClient:
    cache = getattr(args, "cache", None)
    cache_dir = Path(cache) if cache else config.cache_dir
    return CompletionClient(cache_dir=cache_dir)


def _pick(mapping: dict, wanted: str, what: str):
    if wanted not in mapping:
        raise ConfigError(f"{what} {wanted!r} not in config ({', '.join(sorted(mapping))})")
    return mapping[wanted]


def _split_ids(raw: str | None) -> list[str]:
    if not raw:
        return []
    return [piece.strip() for piece in raw.split(",") if piece.strip()]


def cmd_generate(args) -> int:
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    registry = _registry(config)
    client = _client(config, args)
    run_dir = Path(args.out)

    task_ids = _split_ids(args.task) or list(config.tasks)
    model_ids = _split_ids(args.models) or list(config.endpoints)
    models = [_pick(config.endpoints, model_id, "model") for model_id in model_ids]

    manifest = RunManifest.load_or_create(run_dir)
    manifest.seed = seed
    manifest.template_digests = registry.digests()
    failures = 0
    for task_id in task_ids:
        task = _pick(config.tasks, task_id, "task")
        items = load_dataset(task.source, task.spec)
        sampled = sample_items(items, task.spec.sample_size, seed)
        target = items_path(run_dir, task_id)
        target.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(sampled, target)
        entry = sampling_manifest(task.spec, seed, task.source)
        entry["kind"] = task.spec.kind.value
        if task.spec.display_name:
            entry["display_name"] = task.spec.display_name
        manifest.add_task(entry)
        records = run_generation_stage(
            client, models, sampled, run_dir=run_dir, resume=args.resume, registry=registry
        )
        for model_id in model_ids:
            model_records = [r for r in records if r.model_id == model_id]
            failed = sum(1 for r in model_records if r.error is not None)
            failures += failed
            correct = sum(1 for r in model_records if r.correct)
            line = (
                f"generate {task_id} {model_id}: {len(model_records)} answers, "
                f"{correct} correct"
            )
            if failed:
                line += f", {failed} failed"
            print(line)
    for endpoint in models:
        manifest.note_endpoint(endpoint)
    manifest.cache = client.stats.snapshot()
    manifest.save(run_dir)
    if failures:
        print(f"{failures} request(s) failed; rerun with --resume", file=sys.stderr)
        return 1
    return 0


def cmd_judge(args) -> int:
    config = load_config(args.config)
    registry = _registry(config)
    client = _client(config, args)
    run_dir = Path(args.out)
    strategy = Strategy(args.strategy)

    judge = _pick(config.endpoints, args.judge, "model")
    agent_ids = _split_ids(args.agents) or [
        model_id for model_id in config.endpoints if model_id != judge.model_id
    ]
    for agent_id in agent_ids:
        _pick(config.endpoints, agent_id, "model")

    manifest = RunManifest.load_or_create(run_dir)
    if not manifest.tasks:
        raise ConfigError(f"run directory {run_dir} has no generated tasks; run generate first")
    task_entries = manifest.tasks
    if args.task:
        wanted = set(_split_ids(args.task))
        task_entries = [t for t in task_entries if t["task_id"] in wanted]
        missing = wanted - {t["task_id"] for t in task_entries}
        if missing:
            raise ConfigError(f"task(s) {sorted(missing)} not generated in {run_dir}")

    failures = 0
    for entry in task_entries:
        task_id = entry["task_id"]
        spec = TaskSpec(
            task_id=task_id,
            kind=TaskKind(entry["kind"]),
            sample_size=entry["sample_size"],
        )
        items = load_dataset(items_path(run_dir, task_id), spec)
        judge_file = generation_path(run_dir, judge.model_id, task_id)
        if not judge_file.exists():
            raise ConfigError(
                f"judge {judge.model_id} has no answers for task {task_id}; "
                f"include it in generate --models"
            )
        judge_gen = {r.item_id: r for r in load_generation_records(judge_file)}
        agent_records = []
        for agent_id in agent_ids:
            agent_file = generation_path(run_dir, agent_id, task_id)
            if not agent_file.exists():
                raise ConfigError(
                    f"agent {agent_id} has no answers for task {task_id}; "
                    f"include it in generate --models"
                )
            agent_records.extend(load_generation_records(agent_file))
        dataset = build_judgment_dataset(agent_records, items)
        records = run_judgment_stage(
            client,
            judge,
            dataset,
            strategy,
            judge_gen,
            items,
            run_dir=run_dir,
            resume=args.resume,
            registry=registry,
        )
        failed = sum(1 for r in records if r.error is not None)
        invalid = sum(1 for r in records if r.error is None and r.y_pred is None)
        failures += failed
        line = (
            f"judge {task_id} {judge.model_id} [{strategy.value}]: "
            f"{len(records)} verdicts, {invalid} invalid"
        )
        if failed:
            line += f", {failed} failed"
        print(line)

    manifest.add_models(agents=agent_ids, judges=[judge.model_id])
    manifest.add_strategy(strategy)
    manifest.note_endpoint(judge)
    manifest.cache = client.stats.snapshot()
    manifest.save(run_dir)
    if failures:
        print(f"{failures} request(s) failed; rerun with --resume", file=sys.stderr)
        return 1
    return 0


def cmd_analyze(args) -> int:
    policy = InvalidPolicy(args.invalid_policy)
    report = analyze_run(args.run, policy, include_ties=not args.exclude_ties)
    out = Path(args.out)
    report.save(out)
    for cell in report.cells:
        print(
            f"cell {cell.judge_model_id}/{cell.task_id}/{cell.strategy}: "
            f"f1={cell.f1:.4f} partial={cell.partial.value:.4f} ({cell.strength})"
        )
    print(f"wrote {out}")
    return 0


_EMITTERS = {
    "tables": (emit_judge_table, emit_overconfidence_table, emit_correlation_table),
    "heatmaps": (emit_heatmap_matrix,),
    "scatter": (emit_scatter,),
}


def cmd_report(args) -> int:
    report = AnalysisReport.load(args.report)
    out_dir = Path(args.out)
    formats = ("csv", "md") if args.format == "both" else (args.format,)
    wanted = _split_ids(args.emit) or ["tables", "heatmaps", "scatter"]
    written = []
    for name in wanted:
        if name not in _EMITTERS:
            raise ConfigError(
                f"unknown emit target {name!r} (choose from {', '.join(_EMITTERS)})"
            )
        for emitter in _EMITTERS[name]:
            if emitter is emit_scatter:
                written += emitter(report, out_dir)
            else:
                for fmt in formats:
                    written += emitter(report, out_dir, fmt)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genjudge",
        description="Measure how a model's answer quality relates to its quality as a judge.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="collect every model's answers to a task")
    generate.add_argument("--config", required=True, help="run configuration JSON")
    generate.add_argument("--task", help="comma-separated task ids (default: all in config)")
    generate.add_argument("--models", help="comma-separated model ids (default: all in config)")
    generate.add_argument("--out", required=True, help="run directory")
    generate.add_argument("--resume", action="store_true", help="retry only failed requests")
    generate.add_argument("--cache", help="response cache directory (overrides config)")
    generate.add_argument("--seed", type=int, help="sampling seed (overrides config)")
    generate.set_defaults(func=cmd_generate)

    judge = sub.add_parser("judge", help="collect one verdict per agent answer")
    judge.add_argument("--config", required=True, help="run configuration JSON")
    judge.add_argument("--judge", required=True, help="model id acting as judge")
    judge.add_argument("--agents", help="comma-separated agent ids (default: all others)")
    judge.add_argument(
        "--strategy",
        choices=[s.value for s in Strategy],
        default=Strategy.COT.value,
        help="judgment prompting strategy",
    )
    judge.add_argument("--task", help="comma-separated task ids (default: all generated)")
    judge.add_argument("--out", required=True, help="run directory")
    judge.add_argument("--resume", action="store_true", help="retry only failed requests")
    judge.add_argument("--cache", help="response cache directory (overrides config)")
    judge.set_defaults(func=cmd_judge)

    analyze = sub.add_parser("analyze", help="fold run records into report.json")
    analyze.add_argument("--run", required=True, help="run directory")
    analyze.add_argument(
        "--invalid-policy",
        choices=[p.value for p in InvalidPolicy],
        default=InvalidPolicy.EXCLUDE.value,
        help="how unparseable verdicts enter the metrics",
    )
    ties = analyze.add_mutually_exclusive_group()
    ties.add_argument(
        "--include-ties",
        dest="exclude_ties",
        action="store_false",
        help="keep items whose gold verdict is a tie (default)",
    )
    ties.add_argument(
        "--exclude-ties",
        dest="exclude_ties",
        action="store_true",
        help="drop items whose gold verdict is a tie",
    )
    analyze.set_defaults(exclude_ties=False)
    analyze.add_argument("--out", required=True, help="where to write report.json")
    analyze.set_defaults(func=cmd_analyze)

    report = sub.add_parser("report", help="render tables and plots from report.json")
    report.add_argument("--report", required=True, help="report.json from analyze")
    report.add_argument(
        "--format", choices=["csv", "md", "both"], default="csv", help="table format"
    )
    report.add_argument(
        "--emit", help="comma-separated subset of: tables, heatmaps, scatter (default: all)"
    )
    report.add_argument("--out", required=True, help="output directory")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        DatasetError,
        PromptError,
        PipelineError,
        ProviderError,
        MetricError,
        ReportError,
        IncompleteReport,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
