"""End-to-end acceptance checks, one per shipped guarantee.

Run with `pytest tests/test_acceptance.py -s` to see one line per criterion.
Nine checks: correlation math against an independent oracle (1), algebraic
exactness (2), degenerate-input handling (3), strength buckets (4), answer
and verdict extraction (5), the full mock pipeline's numbers (6), the
self-reference guarantee (7), byte determinism and cache reuse (8), and the
split-table rendering contract (9).
"""

import json
import random
import time

import pytest

from genjudge.cli import main
from genjudge.corpus import CanonicalAnswer, TaskKind
from genjudge.extraction import VerdictFamily, extract_answer, extract_verdict
from genjudge.metrics import (
    InvalidPolicy,
    Strength,
    TripletSeries,
    classify_strength,
    partial_correlation,
    partial_correlation_from_series,
    pearson,
    pearson_triple,
)
from genjudge.pipeline import (
    MissingSelfReference,
    RunManifest,
    build_judgment_dataset,
    generation_path,
    judgment_prompts_path,
    load_generation_records,
    run_generation_stage,
    run_judgment_stage,
)
from genjudge.prompts import Strategy
from genjudge.providers import CompletionClient
from genjudge.report import AnalysisReport, analyze_run, emit_all, emit_judge_table
from .fixture_runs import NUMERIC20, numeric20_endpoints, numeric20_items
from .oracles import partial_corr_oracle, pearson_oracle
from .sample_texts import APPLE_ASSISTANT, APPLE_REFERENCE
from .test_extraction import expected_value, load_cases, run_case
from .test_report import synthetic_cell, synthetic_report

CONFIG = str(NUMERIC20 / "config.json")


def _pass(n: int) -> None:
    print(f"[acceptance] criterion {n}: PASS")


def _random_series(rng, n=50) -> TripletSeries:
    return TripletSeries(
        tuple(rng.randint(0, 1) for _ in range(n)),
        tuple(rng.randint(0, 1) for _ in range(n)),
        tuple(rng.randint(0, 1) for _ in range(n)),
    )


def test_criterion_1_partial_correlation_matches_oracle_on_1000_series():
    rng = random.Random(20240517)
    started = time.monotonic()
    checked = 0
    while checked < 1000:
        series = _random_series(rng)
        result = partial_correlation_from_series(series)
        if result.degenerate:
            continue
        oracle = partial_corr_oracle(series.g, series.j, series.a)
        assert abs(result.value - oracle) <= 1e-12
        for ours, (x, y) in zip(
            pearson_triple(series),
            ((series.g, series.j), (series.g, series.a), (series.j, series.a)),
        ):
            assert abs(ours.value - pearson_oracle(x, y)) <= 1e-12
        checked += 1
    elapsed = time.monotonic() - started
    assert checked == 1000
    assert elapsed < 5.0, f"took {elapsed:.2f}s"
    _pass(1)


def test_criterion_2_algebraic_identities_hold_exactly():
    rng = random.Random(907)
    for _ in range(100):
        x = tuple(rng.randint(0, 1) for _ in range(50))
        y = tuple(rng.randint(0, 1) for _ in range(50))
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert pearson(x, x).value == 1.0
        complement = tuple(1 - bit for bit in x)
        assert abs(pearson(complement, y).value + pearson(x, y).value) <= 1e-12
    for _ in range(100):
        r = rng.uniform(-1.0, 1.0)
        assert abs(partial_correlation(r, 0.0, 0.0).value - r) <= 1e-12
        a = rng.uniform(-1.0, 1.0)
        b = rng.uniform(-1.0, 1.0)
        assert abs(partial_correlation(a * b, a, b).value) <= 1e-12
    _pass(2)


def test_criterion_3_constant_vector_reports_degenerate_zero():
    rng = random.Random(11)
    series = TripletSeries(
        (1,) * 50,
        tuple(rng.randint(0, 1) for _ in range(50)),
        tuple(rng.randint(0, 1) for _ in range(50)),
    )
    result = partial_correlation_from_series(series)
    assert result.degenerate is True
    assert result.value == 0.0
    direct = pearson((1,) * 50, series.j)
    assert direct.degenerate is True and direct.value == 0.0
    _pass(3)


def test_criterion_4_strength_reference_points():
    assert classify_strength(0.1869) is Strength.WEAK
    assert classify_strength(0.3950) is Strength.MODERATE
    assert classify_strength(0.5931) is Strength.STRONG
    assert classify_strength(0.3) is Strength.MODERATE
    assert classify_strength(0.5) is Strength.MODERATE
    assert classify_strength(-0.5931) is Strength.STRONG
    _pass(4)


def test_criterion_5_extraction_on_worked_texts_and_adversarial_corpus():
    reference = extract_answer(APPLE_REFERENCE, TaskKind.NUMERIC_QA)
    assert reference.valid and reference.value == CanonicalAnswer.numeric(17)
    assistant = extract_answer(APPLE_ASSISTANT, TaskKind.NUMERIC_QA)
    assert assistant.valid and assistant.value == CanonicalAnswer.numeric(11)

    assert extract_verdict("verdict: [[Correct]]", VerdictFamily.POINTWISE).value is True
    assert extract_verdict("**[[Incorrect]]**", VerdictFamily.META_JUDGE).value is False
    picked = extract_verdict("I choose [[B]]", VerdictFamily.PAIRWISE_CHOICE)
    assert picked.value == CanonicalAnswer.verdict("B")
    routed = extract_answer("overall [[C]]", TaskKind.PAIRWISE_VERDICT)
    assert routed.value == CanonicalAnswer.verdict("C")

    cases = load_cases()
    assert len(cases) == 50
    agreed = 0
    for case in cases:
        outcome = run_case(case)
        if case["expected"] is None:
            assert not outcome.valid
        else:
            assert outcome.valid and outcome.value == expected_value(case)
        agreed += 1
    assert agreed == 50
    _pass(5)


@pytest.fixture()
def cli_run(tmp_path):
    run_dir = tmp_path / "run"
    cache = str(tmp_path / "cache")
    assert main(["generate", "--config", CONFIG, "--out", str(run_dir),
                 "--cache", cache]) == 0
    assert main(["judge", "--config", CONFIG, "--judge", "mock-judge",
                 "--out", str(run_dir), "--cache", cache]) == 0
    return run_dir, cache


def test_criterion_6_mock_run_reproduces_hand_computed_numbers(tmp_path):
    started = time.monotonic()
    run_dir = tmp_path / "run"
    assert main(["generate", "--config", CONFIG, "--out", str(run_dir)]) == 0
    generate_stats = RunManifest.load(run_dir).cache
    assert main(["judge", "--config", CONFIG, "--judge", "mock-judge",
                 "--out", str(run_dir)]) == 0
    judge_stats = RunManifest.load(run_dir).cache
    assert generate_stats["network_requests"] == 0
    assert judge_stats["network_requests"] == 0

    report_path = tmp_path / "report.json"
    assert main(["analyze", "--run", str(run_dir), "--out", str(report_path)]) == 0
    cell = AnalysisReport.load(report_path).cell("mock-judge", "sum20", "cot")

    assert cell.judge_generation_accuracy == 0.70
    assert cell.agent_generation_accuracy == {
        "mock-agent-a": 0.55,
        "mock-agent-b": 0.50,
    }
    assert cell.n_records == 40
    assert cell.invalid_count == 2
    assert cell.precision == 15 / 20
    assert cell.recall == 15 / 19
    assert cell.f1 == 30 / 39
    assert (cell.f1_plus.size, cell.f1_minus.size) == (28, 12)
    assert cell.f1_plus.f1 == 24 / 29
    assert cell.f1_minus.f1 == 3 / 5
    assert cell.delta == 24 / 29 - 3 / 5
    assert [score.size for score in cell.four_way] == [16, 12, 5, 7]
    assert cell.overconfidence == 1 / 38

    assert main(["analyze", "--run", str(run_dir), "--invalid-policy",
                 "count-incorrect", "--out", str(report_path)]) == 0
    counted = AnalysisReport.load(report_path).cell("mock-judge", "sum20", "cot")
    assert counted.precision == 15 / 20
    assert counted.recall == 15 / 21
    assert counted.f1 == 30 / 41
    elapsed = time.monotonic() - started
    assert elapsed < 10.0, f"took {elapsed:.2f}s"
    _pass(6)


def test_criterion_7_reference_block_carries_judge_generation(tmp_path):
    run_dir = tmp_path / "run"
    assert main(["generate", "--config", CONFIG, "--out", str(run_dir)]) == 0
    assert main(["judge", "--config", CONFIG, "--judge", "mock-judge",
                 "--strategy", "self-ref", "--out", str(run_dir)]) == 0
    judge_gen = {
        r.item_id: r
        for r in load_generation_records(generation_path(run_dir, "mock-judge", "sum20"))
    }
    prompt_file = judgment_prompts_path(
        run_dir, "mock-judge", "sum20", Strategy.SELF_REFERENCE
    )
    rows = [json.loads(line) for line in prompt_file.read_text().splitlines()]
    assert len(rows) == 40
    for row in rows:
        reference = judge_gen[row["item_id"]].raw_text
        text = row["text"]
        assert reference in text
        block = text.split("[The Start of Reference Answer]")[1].split(
            "[The End of Reference Answer]"
        )[0]
        assert reference in block

    # with one of the judge's own answers missing, judging refuses up front
    judge, agent_a, agent_b = numeric20_endpoints()
    _, items = numeric20_items()
    client = CompletionClient()
    gen = run_generation_stage(client, [judge, agent_a, agent_b], items)
    partial_gen = {r.item_id: r for r in gen if r.model_id == "mock-judge"}
    dropped = items[0].item_id
    del partial_gen[dropped]
    dataset = build_judgment_dataset(
        [r for r in gen if r.model_id == "mock-agent-a"], items
    )
    with pytest.raises(MissingSelfReference) as err:
        run_judgment_stage(
            client, judge, dataset, Strategy.SELF_REFERENCE, partial_gen, items
        )
    assert err.value.item_id == dropped
    _pass(7)


def test_criterion_8_reruns_are_byte_identical_and_cache_backed(tmp_path, cli_run):
    run_dir, cache = cli_run
    outputs = []
    for label in ("one", "two"):
        report_path = tmp_path / f"report_{label}.json"
        assert main(["analyze", "--run", str(run_dir), "--out", str(report_path)]) == 0
        out_dir = tmp_path / f"emit_{label}"
        written = emit_all(AnalysisReport.load(report_path), out_dir)
        outputs.append((report_path.read_bytes(), {p.name: p.read_bytes() for p in written}))
    assert outputs[0][0] == outputs[1][0]
    assert outputs[0][1].keys() == outputs[1][1].keys()
    for name in outputs[0][1]:
        assert outputs[0][1][name] == outputs[1][1][name], name

    # the same judging pass again, warm cache: nothing reaches a provider
    assert main(["judge", "--config", CONFIG, "--judge", "mock-judge",
                 "--out", str(run_dir), "--cache", cache]) == 0
    stats = RunManifest.load(run_dir).cache
    assert stats["provider_calls"] == 0
    assert stats["network_requests"] == 0
    assert stats["cache_hits"] == 40
    _pass(8)


def test_criterion_9_split_table_renders_fixed_point_values(tmp_path):
    report = synthetic_report([synthetic_cell()])
    (csv_file,) = emit_judge_table(report, tmp_path, "csv")
    lines = csv_file.read_text(encoding="utf-8").splitlines()
    assert lines[0].split(",")[1:] == ["t ✓", "t ✗", "t Δ"]
    assert lines[1].split(",") == ["j", "96.85", "0.00", "96.85"]
    _pass(9)
