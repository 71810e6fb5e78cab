"""Output parsers and the two decoding routes: generate-and-parse, perplexity argmin."""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .backends import Backend, DecodeParams, GenerationResult, default_params
from .prompts import CATEGORY_PREFIX, ORDER_BLOCKS, PromptRecord
from .types import LabelSchema, Prediction

_CATEGORY_LINE_RE = re.compile(r"^[ \t]*Category:[ \t]*(.*?)[ \t\r]*$", re.MULTILINE)
_NUMERIC_RE = re.compile(r"\d+")
_ALL_TAGS = tuple(f"<{t}>" for t in ("think", "reason", "answer")) + tuple(
    f"</{t}>" for t in ("think", "reason", "answer")
)


def _category_payload(text: str) -> tuple[str, int, int] | None:
    # only the first Category: line counts
    m = _CATEGORY_LINE_RE.search(text)
    if m is None:
        return None
    return m.group(1), m.start(1), m.end(1)


def parse_category(
    text: str,
    schema: LabelSchema,
    mode: str = "category_text",
    *,
    allow_uncertain: bool = False,
    case_fold: bool = False,
) -> str | None:
    """Return the schema label named on the first ``Category:`` line, else None.

    ``allow_uncertain`` admits the schema's uncertain label; it is meant for
    checking training targets, never for scoring inference output.
    """
    found = _category_payload(text)
    if found is None:
        return None
    return _resolve(found[0], schema, mode, allow_uncertain, case_fold)


def _resolve(
    payload: str, schema: LabelSchema, mode: str, allow_uncertain: bool, case_fold: bool
) -> str | None:
    payload = payload.strip()
    if mode == "category_numeric":
        if not _NUMERIC_RE.fullmatch(payload):
            return None
        index = int(payload)
        return schema.label_at(index) if index < len(schema.labels) else None
    if mode not in ("category_text", "direct", "tagged_reasoning"):
        raise ValueError(f"unknown parse mode {mode!r}")
    label = schema.lookup(payload, case_fold)
    if label is None and allow_uncertain and schema.is_uncertain(payload, case_fold):
        return schema.uncertain_label
    return label


@dataclass(frozen=True)
class TaggedOutput:
    reason: str
    answer: str
    think: str | None = None


def _tagged_regex(order: str) -> re.Pattern[str]:
    blocks = ORDER_BLOCKS[order]
    body = r"\s*".join(rf"<{b}>(?P<{b}>.*?)</{b}>" for b in blocks)
    return re.compile(rf"\s*{body}\s*", re.DOTALL)


_TAGGED = {order: _tagged_regex(order) for order in ORDER_BLOCKS}


def _tagged_match(text: str, order: str) -> re.Match[str] | None:
    m = _TAGGED[order].fullmatch(text)
    if m is None:
        return None
    for block in ORDER_BLOCKS[order]:
        if any(tag in m.group(block) for tag in _ALL_TAGS):
            return None
    return m


def parse_tagged(text: str, order: str = "reason_then_class") -> TaggedOutput | None:
    """Parse ``<reason>..</reason> <answer>..</answer>``-style output.

    Succeeds only when every block of ``order`` appears exactly once, in that
    order, closed, with nothing but whitespace around them.
    """
    m = _tagged_match(text, order)
    if m is None:
        return None
    groups = m.groupdict()
    return TaggedOutput(
        reason=groups["reason"].strip(),
        answer=groups["answer"].strip(),
        think=groups["think"].strip() if "think" in groups else None,
    )


def parse_direct(text: str, schema: LabelSchema, *, case_fold: bool = False) -> str | None:
    """A direct answer is the bare label, or a single canonical ``Category:`` line."""
    return _direct_span(text, schema, case_fold)[0]


def _direct_span(
    text: str, schema: LabelSchema, case_fold: bool
) -> tuple[str | None, tuple[int, int] | None]:
    stripped = text.strip()
    if stripped.startswith(CATEGORY_PREFIX):
        payload = stripped[len(CATEGORY_PREFIX):].strip()
    else:
        payload = stripped
    label = schema.lookup(payload, case_fold)
    if label is None or not payload:
        return None, None
    start = text.rfind(payload)
    return label, (start, start + len(payload))


def parse_output(
    text: str,
    schema: LabelSchema,
    mode: str,
    *,
    order: str = "reason_then_class",
    case_fold: bool = False,
) -> tuple[str | None, tuple[int, int] | None]:
    """Dispatch on parse mode; returns the label and the character span it came from."""
    if mode in ("category_text", "category_numeric"):
        found = _category_payload(text)
        if found is None:
            return None, None
        label = _resolve(found[0], schema, mode, False, case_fold)
        return label, (found[1], found[2]) if label else None
    if mode == "tagged_reasoning":
        m = _tagged_match(text, order)
        if m is None:
            return None, None
        label = schema.lookup(m.group("answer"), case_fold)
        return label, m.span("answer") if label else None
    if mode == "direct":
        return _direct_span(text, schema, case_fold)
    raise ValueError(f"unknown parse mode {mode!r}")


def span_confidence(result: GenerationResult, span: tuple[int, int]) -> float | None:
    """Mean log-probability of the tokens overlapping ``span`` of the output text."""
    if not result.token_logprobs:
        return None
    lps = [lp for _, lp in result.token_logprobs]
    if "".join(tok for tok, _ in result.token_logprobs) != result.text:
        # tokens do not reassemble the text; fall back to the whole output
        return math.fsum(lps) / len(lps)
    picked, offset = [], 0
    start, end = span
    for tok, lp in result.token_logprobs:
        if offset < end and offset + len(tok) > start:
            picked.append(lp)
        offset += len(tok)
    if not picked:
        return None
    return math.fsum(picked) / len(picked)


def classify_generate(
    backend: Backend,
    prompt: PromptRecord,
    schema: LabelSchema,
    params: DecodeParams | None = None,
    *,
    order: str = "reason_then_class",
    case_fold: bool = False,
) -> Prediction:
    if prompt.strategy.kind == "ppl":
        raise ValueError("ppl prompts are decoded with classify_ppl")
    mode = prompt.expected_parse_mode
    result = backend.generate(prompt.text, params or default_params(mode))
    label, span = parse_output(result.text, schema, mode, order=order, case_fold=case_fold)
    confidence = span_confidence(result, span) if label is not None else None
    return Prediction(
        example_id=prompt.target_example_id,
        raw_output=result.text,
        format_ok=label is not None,
        parsed_label=label,
        confidence=confidence,
    )


# -- perplexity ---------------------------------------------------------------


@dataclass(frozen=True)
class PplScore:
    label: str
    nll_mean: float
    ppl: float


def compute_ppl(token_logprobs: Sequence[float]) -> float:
    if len(token_logprobs) == 0:
        raise ValueError("perplexity of an empty token sequence is undefined")
    return math.exp(-math.fsum(token_logprobs) / len(token_logprobs))


PPL_SCOPES = ("label", "line")


def candidate_split(base_prompt: str, label: str, scope: str = "label") -> tuple[str, str]:
    """Split the scored text into (context, continuation) for one candidate.

    ``label`` scores only the label tokens after a fixed ``Category:`` prefix;
    ``line`` scores the whole ``Category: <label>`` line.
    """
    if scope == "label":
        return f"{base_prompt}\n{CATEGORY_PREFIX}", f" {label}"
    if scope == "line":
        return f"{base_prompt}\n", f"{CATEGORY_PREFIX} {label}"
    raise ValueError(f"unknown ppl scope {scope!r}")


def score_candidates(
    backend: Backend, base_prompt: str, schema: LabelSchema, scope: str = "label"
) -> list[PplScore]:
    scores = []
    for label in schema.labels:
        context, continuation = candidate_split(base_prompt, label, scope)
        lps = backend.score_continuation(context, continuation)
        nll = -math.fsum(lps) / len(lps)
        scores.append(PplScore(label, nll, compute_ppl(lps)))
    return scores


def classify_ppl(
    backend: Backend,
    base_prompt: str,
    schema: LabelSchema,
    example_id: str = "",
    scope: str = "label",
) -> Prediction:
    """Pick the label whose rendering has the lowest perplexity (ties: schema order)."""
    scores = score_candidates(backend, base_prompt, schema, scope)
    best = min(range(len(scores)), key=lambda i: (scores[i].ppl, i))
    chosen = scores[best]
    return Prediction(
        example_id=example_id,
        raw_output=f"{CATEGORY_PREFIX} {chosen.label}",
        format_ok=True,
        parsed_label=chosen.label,
        confidence=-chosen.nll_mean,
    )


def classify_all(
    backend: Backend,
    prompts: Sequence[PromptRecord],
    schema: LabelSchema,
    *,
    params: DecodeParams | None = None,
    parallelism: int = 1,
    order: str = "reason_then_class",
    ppl_scope: str = "label",
    case_fold: bool = False,
) -> list[Prediction]:
    """Classify every prompt, preserving input order. Backend errors propagate."""

    def one(record: PromptRecord) -> Prediction:
        if record.strategy.kind == "ppl":
            return classify_ppl(backend, record.text, schema, record.target_example_id, ppl_scope)
        return classify_generate(backend, record, schema, params, order=order, case_fold=case_fold)

    if parallelism <= 1:
        return [one(r) for r in prompts]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, prompts))
