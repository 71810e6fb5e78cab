from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptgrid.backends import MockBackend, TransportError
from promptgrid.inference import (
    candidate_split,
    classify_all,
    classify_generate,
    classify_ppl,
    compute_ppl,
    parse_category,
    parse_direct,
    parse_output,
    parse_tagged,
    score_candidates,
)
from promptgrid.prompts import NO_SHOTS, PromptRecord, Strategy, render_prompt
from promptgrid.types import LabelSchema

from .conftest import EC_LABELS


def test_parse_category_examples(ec_schema):
    assert parse_category("Category: love", ec_schema) == "love"
    assert parse_category("Category: 3", ec_schema, "category_numeric") == "anger"
    assert parse_category("The answer is love", ec_schema) is None


def test_parse_category_edges(ec_schema):
    assert parse_category("  Category:   joy  ", ec_schema) == "joy"
    assert parse_category("chatter\nCategory: fear\nCategory: joy", ec_schema) == "fear"
    assert parse_category("Category: bliss\nCategory: joy", ec_schema) is None
    assert parse_category("Category: 6", ec_schema, "category_numeric") is None
    assert parse_category("Category: -1", ec_schema, "category_numeric") is None
    assert parse_category("Category: joy", ec_schema, "category_numeric") is None
    assert parse_category("Category: Joy", ec_schema) is None
    assert parse_category("Category: Joy", ec_schema, case_fold=True) == "joy"


def test_uncertain_is_a_format_failure_at_inference(ec_schema):
    assert parse_category("Category: uncertain", ec_schema) is None
    assert parse_category("Category: uncertain", ec_schema, allow_uncertain=True) == "uncertain"


@given(st.text())
def test_parsers_are_total(text):
    schema_labels = ("a", "b")
    schema = LabelSchema(schema_labels)
    for mode in ("category_text", "category_numeric", "tagged_reasoning", "direct"):
        label, _ = parse_output(text, schema, mode)
        assert label is None or label in schema_labels
    parse_tagged(text)


def test_parse_tagged_examples():
    out = parse_tagged("<reason>edit adds detail</reason> <answer>elaboration</answer>")
    assert (out.reason, out.answer) == ("edit adds detail", "elaboration")
    assert parse_tagged("<answer>x</answer><reason>y</reason>") is None
    assert parse_tagged("<reason>a</reason><answer>b") is None


@pytest.mark.parametrize(
    "text",
    [
        "note <reason>a</reason><answer>b</answer>",
        "<reason>a</reason><answer>b</answer> trailing",
        "<reason>a</reason><reason>a</reason><answer>b</answer>",
        "<reason>a <answer>b</answer></reason><answer>b</answer>",
        "<reason>a</reason><answer>b</answer><answer>c</answer>",
    ],
)
def test_parse_tagged_rejects(text):
    assert parse_tagged(text) is None


def test_parse_tagged_orders():
    assert parse_tagged("<answer>x</answer> <reason>y</reason>", "class_then_reason").answer == "x"
    out = parse_tagged("<think>t</think><reason>r</reason><answer>a</answer>", "think_reason_class")
    assert (out.think, out.reason, out.answer) == ("t", "r", "a")


def test_parse_direct(ec_schema):
    assert parse_direct(" joy\n", ec_schema) == "joy"
    assert parse_direct("Category: joy", ec_schema) == "joy"
    assert parse_direct("it is joy", ec_schema) is None


def test_compute_ppl():
    assert compute_ppl([math.log(0.5)]) == pytest.approx(2.0, abs=1e-12)
    assert compute_ppl([-1.0, -3.0]) == pytest.approx(math.e**2, abs=1e-9)
    assert compute_ppl([0.0, 0.0]) == 1.0
    with pytest.raises(ValueError):
        compute_ppl([])


def _ppl_backend(table: dict[str, list[float]]) -> MockBackend:
    return MockBackend.from_dict({"rules": [{"if_contains": "", "logprobs": table}]})


def test_classify_ppl_argmin_and_tie(ec_schema):
    table = {label: [-3.0] for label in EC_LABELS}
    table["joy"] = [math.log(0.5)]
    assert classify_ppl(_ppl_backend(table), "base", ec_schema).parsed_label == "joy"
    flat = {label: [-1.0] for label in EC_LABELS}
    pred = classify_ppl(_ppl_backend(flat), "base", ec_schema, "e1")
    assert pred.parsed_label == "sadness" and pred.format_ok and pred.example_id == "e1"


def test_candidate_split_scopes():
    assert candidate_split("P", "joy") == ("P\nCategory:", " joy")
    assert candidate_split("P", "joy", "line") == ("P\n", "Category: joy")
    with pytest.raises(ValueError):
        candidate_split("P", "joy", "token")


@settings(max_examples=100)
@given(
    st.dictionaries(
        st.sampled_from(EC_LABELS),
        st.lists(st.floats(min_value=-10, max_value=0), min_size=1, max_size=4),
        min_size=6,
    ),
    st.sampled_from(EC_LABELS),
    st.floats(min_value=-5, max_value=-1e-3),
)
def test_ppl_monotone_in_one_candidate(table, label, delta):
    schema = LabelSchema(EC_LABELS)
    before = {s.label: s.ppl for s in score_candidates(_ppl_backend(table), "b", schema)}
    shifted = dict(table)
    shifted[label] = [x + delta for x in table[label]]
    after = {s.label: s.ppl for s in score_candidates(_ppl_backend(shifted), "b", schema)}
    assert after[label] > before[label]
    assert all(after[c] == before[c] for c in EC_LABELS if c != label)


def test_ppl_argmin_invariant_to_repeating_tokens(ec_schema):
    rng = random.Random(3)
    for _ in range(100):
        table = {c: [rng.uniform(-5, 0)] for c in EC_LABELS}
        stretched = {c: v * rng.randint(1, 5) for c, v in table.items()}
        a = classify_ppl(_ppl_backend(table), "b", ec_schema).parsed_label
        b = classify_ppl(_ppl_backend(stretched), "b", ec_schema).parsed_label
        assert a == b


def _record(ec_schema, ec_examples, ec_templates, strategy="zero_shot", style="category"):
    return render_prompt(
        strategy, ec_schema, ec_examples["ec-case-2"], NO_SHOTS, ec_templates, output_style=style
    )


def test_classify_generate(ec_schema, ec_examples, ec_templates):
    rec = _record(ec_schema, ec_examples, ec_templates)
    ok = MockBackend.from_dict(
        {"rules": [{"if_contains": "grouchy", "reply": "Category: anger", "logprobs": {"anger": [-0.3]}}]}
    )
    pred = classify_generate(ok, rec, ec_schema)
    assert pred.format_ok and pred.parsed_label == "anger"
    assert pred.confidence == pytest.approx(-0.3)
    junk = MockBackend.from_dict({"default_reply": "it feels angry"})
    pred = classify_generate(junk, rec, ec_schema)
    assert not pred.format_ok and pred.parsed_label is None


def test_classify_generate_tagged(ec_schema, ec_examples, ec_templates):
    rec = _record(ec_schema, ec_examples, ec_templates, style="reasoning")
    mock = MockBackend.from_dict(
        {"default_reply": "<reason>grouchy means irritated</reason> <answer>anger</answer>"}
    )
    assert classify_generate(mock, rec, ec_schema).parsed_label == "anger"


def test_classify_generate_rejects_ppl(ec_schema):
    rec = PromptRecord(Strategy.parse("ppl"), "p", "category_text", "x")
    with pytest.raises(ValueError):
        classify_generate(MockBackend(), rec, ec_schema)


def test_classify_all_preserves_order_and_propagates(ec_schema, ec_examples, ec_templates):
    recs = [
        render_prompt("zero_shot", ec_schema, ex, NO_SHOTS, ec_templates)
        for ex in ec_examples.values()
    ]
    mock = MockBackend.from_dict({"default_reply": "Category: joy"})
    preds = classify_all(mock, recs, ec_schema, parallelism=4)
    assert [p.example_id for p in preds] == [r.target_example_id for r in recs]
    failing = MockBackend.from_dict({"rules": [{"if_contains": "grouchy", "raise": "transport"}]})
    with pytest.raises(TransportError):
        classify_all(failing, recs, ec_schema, parallelism=2)
