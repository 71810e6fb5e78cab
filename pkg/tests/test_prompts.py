from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptgrid.inference import parse_category
from promptgrid.prompts import (
    ALL_STRATEGIES,
    NO_SHOTS,
    DuplicateExampleId,
    InsufficientExamples,
    MissingDefinitions,
    ShotContext,
    ShotCountMismatch,
    Strategy,
    UnknownExampleId,
    UnknownLabel,
    fill,
    load_templates,
    render_prompt,
    render_sft_target,
    sample_shots,
    select_fixed_shots,
)
from promptgrid.types import Dataset, Example, LabelSchema

from .conftest import EC_LABELS, GOLDEN


def _train(n: int) -> Dataset:
    return Dataset(
        "t", "train", tuple(Example(f"e{i:03d}", {"text": f"t{i}"}, "joy") for i in range(n)), ""
    )


# golden renders: (golden file, strategy, case id, shot ids, phase)
GOLDEN_CASES = [
    ("zero_shot", "zero_shot", "ec-case-1", [], "infer"),
    ("three_shot", "3_shot", "ec-case-1", ["ec-shot-1", "ec-shot-2", "ec-shot-3"], "infer"),
    ("definition", "definition", "ec-case-2", [], "infer"),
    ("definition_1_shot", "definition_1_shot", "ec-case-2", ["ec-shot-4"], "infer"),
    ("numerical", "numerical", "ec-case-3", [], "infer"),
    ("uncertainty", "uncertainty", "ec-case-4", [], "train"),
]


def render_golden(name, strategy, case, shots, phase, schema, examples, templates):
    ctx = ShotContext.of([examples[i] for i in shots], "fixed" if shots else "none")
    return render_prompt(strategy, schema, examples[case], ctx, templates, phase=phase)


@pytest.mark.parametrize("case", GOLDEN_CASES, ids=[c[0] for c in GOLDEN_CASES])
def test_golden_prompt_bytes(case, ec_schema, ec_examples, ec_templates):
    rec = render_golden(*case, ec_schema, ec_examples, ec_templates)
    expected = (GOLDEN / f"{case[0]}.txt").read_bytes()
    assert rec.text.encode("utf-8") == expected


def test_numerical_lists_index_pairs(ec_schema, ec_examples, ec_templates):
    rec = render_prompt("numerical", ec_schema, ec_examples["ec-case-3"], NO_SHOTS, ec_templates)
    assert "sadness: 0, joy: 1, love: 2, anger: 3, fear: 4, surprise: 5" in rec.text
    assert rec.expected_parse_mode == "category_numeric"


def test_definition_lines(ec_schema, ec_examples, ec_templates):
    rec = render_prompt("definition", ec_schema, ec_examples["ec-case-2"], NO_SHOTS, ec_templates)
    assert "anger: contains strong negative feelings like anger" in rec.text


def test_uncertainty_inference_lists_original_classes_only(ec_schema, ec_examples, ec_templates):
    rec = render_prompt("uncertainty", ec_schema, ec_examples["ec-case-4"], NO_SHOTS, ec_templates)
    assert "uncertain" not in rec.text


def test_reasoning_and_direct_variants(ec_schema, ec_examples, ec_templates):
    ex = ec_examples["ec-case-1"]
    rec = render_prompt("zero_shot", ec_schema, ex, NO_SHOTS, ec_templates, output_style="reasoning")
    assert (
        "<reason> reasoning process here </reason> <answer> answer here </answer>" in rec.text
    )
    assert rec.expected_parse_mode == "tagged_reasoning"
    rec = render_prompt("zero_shot", ec_schema, ex, NO_SHOTS, ec_templates, output_style="direct")
    assert "Please output your answer." in rec.text
    assert rec.expected_parse_mode == "direct"


def test_eic_pair_template():
    templates = load_templates("eic")
    schema = LabelSchema(("fluency", "clarity"))
    ex = Example("p1", {"before": "a b", "after": "a, b"}, "fluency")
    text = render_prompt("zero_shot", schema, ex, NO_SHOTS, templates).text
    assert "a b" in text and "a, b" in text


def test_render_errors(ec_schema, ec_examples, ec_templates):
    ex = ec_examples["ec-case-1"]
    with pytest.raises(ShotCountMismatch):
        render_prompt("3_shot", ec_schema, ex, NO_SHOTS, ec_templates)
    with pytest.raises(MissingDefinitions):
        render_prompt("definition", LabelSchema(EC_LABELS), ex, NO_SHOTS, ec_templates)


def test_strategy_parsing():
    assert Strategy.parse("n_shot(3)") == Strategy("n_shot", 3) == Strategy.parse("3-shot")
    assert str(Strategy.parse("5_shot")) == "5_shot"
    assert not Strategy.parse("ppl").trainable
    assert len(ALL_STRATEGIES) == 11
    for bad in ("4_shot", "few_shot"):
        with pytest.raises(ValueError):
            Strategy.parse(bad)


def test_fill_requires_every_placeholder():
    assert fill("{{a}}-{{ b }}", a=1, b="x") == "1-x"
    with pytest.raises(KeyError):
        fill("{{a}}")
    # values are not re-scanned for markers
    assert fill("{{a}}", a="{{b}}") == "{{b}}"


# -- shots --------------------------------------------------------------------


def test_sample_shots_deterministic():
    train = _train(10)
    assert sample_shots(train, 3, 7).ids == sample_shots(train, 3, 7).ids


def test_sample_shots_boundary():
    with pytest.raises(InsufficientExamples):
        sample_shots(_train(3), 3, 0, exclude_id="e000")
    assert len(sample_shots(_train(3), 3, 0).ids) == 3


@settings(max_examples=200)
@given(st.integers(min_value=0, max_value=2**32), st.integers(min_value=0, max_value=99))
def test_sample_shots_excludes_and_is_distinct(seed, excluded):
    train = _train(100)
    ex_id = f"e{excluded:03d}"
    ids = sample_shots(train, 5, seed, exclude_id=ex_id).ids
    assert len(set(ids)) == 5 and ex_id not in ids


def test_fixed_shots():
    train = _train(5)
    assert select_fixed_shots(train, ["e002", "e000", "e004"]).ids == ["e002", "e000", "e004"]
    with pytest.raises(DuplicateExampleId):
        select_fixed_shots(train, ["e000", "e000", "e001"])
    with pytest.raises(UnknownExampleId):
        select_fixed_shots(train, ["e000", "e001", "zzz"])


# -- SFT targets --------------------------------------------------------------


def test_sft_targets(ec_schema):
    love = Example("x", {"text": "t"}, "love")
    anger = Example("x", {"text": "t"}, "anger")
    unsure = Example("x", {"text": "t"}, "uncertain")
    assert render_sft_target(love, ec_schema, "zero_shot") == "Category: love"
    assert render_sft_target(anger, ec_schema, "numerical") == "Category: 3"
    assert render_sft_target(unsure, ec_schema, "uncertainty") == "Category: uncertain"
    with pytest.raises(UnknownLabel):
        render_sft_target(unsure, ec_schema, "zero_shot")
    with pytest.raises(ValueError):
        render_sft_target(love, ec_schema, "ppl")


@pytest.mark.parametrize("strategy", [s for s in ALL_STRATEGIES if s.trainable], ids=str)
@pytest.mark.parametrize("label", EC_LABELS)
def test_sft_target_round_trip(strategy, label, ec_schema):
    ex = Example("x", {"text": "t"}, label)
    mode = "category_numeric" if strategy.kind == "numerical" else "category_text"
    assert parse_category(render_sft_target(ex, ec_schema, strategy), ec_schema, mode) == label
