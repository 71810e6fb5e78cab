"""Prompt strategies, template rendering and SFT targets."""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .types import Dataset, Example, LabelSchema

CATEGORY_PREFIX = "Category:"

PARSE_MODES = ("category_text", "category_numeric", "tagged_reasoning", "direct")
OUTPUT_STYLES = ("category", "reasoning", "direct")
REASONING_ORDERS = ("class_then_reason", "reason_then_class", "think_reason_class")

_TAG_PLACEHOLDERS = {
    "think": "<think> thinking process here </think>",
    "reason": "<reason> reasoning process here </reason>",
    "answer": "<answer> answer here </answer>",
}
ORDER_BLOCKS = {
    "class_then_reason": ("answer", "reason"),
    "reason_then_class": ("reason", "answer"),
    "think_reason_class": ("think", "reason", "answer"),
}


class PromptError(ValueError):
    pass


class InsufficientExamples(PromptError):
    pass


class UnknownExampleId(PromptError):
    pass


class DuplicateExampleId(PromptError):
    pass


class MissingDefinitions(PromptError):
    pass


class ShotCountMismatch(PromptError):
    pass


class UnknownLabel(PromptError):
    pass


# -- strategies ---------------------------------------------------------------

_SIMPLE_KINDS = (
    "zero_shot",
    "fixed_3_shot",
    "similar_3_shot",
    "definition",
    "definition_1_shot",
    "numerical",
    "uncertainty",
    "ppl",
)
_N_SHOT_RE = re.compile(r"^(?:n_shot\((\d+)\)|(\d+)[_-]shot)$")


@dataclass(frozen=True, order=True)
class Strategy:
    kind: str
    n: int = 0

    def __post_init__(self) -> None:
        if self.kind == "n_shot":
            if self.n not in (1, 3, 5):
                raise ValueError(f"n_shot needs N in {{1, 3, 5}}, got {self.n}")
        elif self.kind not in _SIMPLE_KINDS:
            raise ValueError(f"unknown strategy: {self.kind!r}")

    @classmethod
    def parse(cls, name: "str | Strategy") -> "Strategy":
        if isinstance(name, Strategy):
            return name
        key = name.strip().lower().replace("-", "_")
        if key in _SIMPLE_KINDS:
            return cls(key)
        m = _N_SHOT_RE.match(key)
        if m:
            return cls("n_shot", int(m.group(1) or m.group(2)))
        raise ValueError(f"unknown strategy: {name!r}")

    @property
    def name(self) -> str:
        return f"{self.n}_shot" if self.kind == "n_shot" else self.kind

    def __str__(self) -> str:
        return self.name

    @property
    def shots_required(self) -> int:
        if self.kind == "n_shot":
            return self.n
        if self.kind in ("fixed_3_shot", "similar_3_shot"):
            return 3
        if self.kind == "definition_1_shot":
            return 1
        return 0

    @property
    def uses_definitions(self) -> bool:
        return self.kind in ("definition", "definition_1_shot")

    @property
    def trainable(self) -> bool:
        # perplexity decoding only exists at inference time
        return self.kind != "ppl"


ALL_STRATEGIES = tuple(
    Strategy.parse(s)
    for s in (
        "zero_shot",
        "1_shot",
        "3_shot",
        "5_shot",
        "fixed_3_shot",
        "similar_3_shot",
        "definition",
        "definition_1_shot",
        "numerical",
        "uncertainty",
        "ppl",
    )
)


# -- templates ----------------------------------------------------------------

_PLACEHOLDER_RE = re.compile(r"\{\{\s*(\w+)\s*\}\}")


def fill(template: str, **values: object) -> str:
    """Substitute ``{{name}}`` markers; every marker must have a value."""

    def sub(m: re.Match[str]) -> str:
        key = m.group(1)
        if key not in values:
            raise KeyError(f"template placeholder {{{{{key}}}}} has no value")
        return str(values[key])

    return _PLACEHOLDER_RE.sub(sub, template)


@dataclass(frozen=True)
class PromptTemplate:
    task_header: str
    example_block: str
    current_case_block: str
    format_instruction: str
    definitions_header: str = ""
    definition_block: str = "{{label}}: {{definition}}"
    format_category: str = "Please output in the format Category: xxx."
    format_numeric: str = "Please output in the format Category: xxx."
    format_uncertain: str = (
        'Please output in the format Category: xxx (if unsure, please reply '
        '"Category: {{uncertain_label}}").'
    )
    format_reasoning: str = "Please output your answer in the format: {{tag_format}}."
    format_direct: str = "Please output your answer."

    @classmethod
    def from_dir(cls, path: str | Path) -> "PromptTemplate":
        path = Path(path)
        blocks: dict[str, str] = {}
        for name in cls.__dataclass_fields__:
            f = path / f"{name}.txt"
            if f.is_file():
                blocks[name] = _strip_final_newline(f.read_text(encoding="utf-8"))
        missing = [
            n
            for n in ("task_header", "example_block", "current_case_block", "format_instruction")
            if n not in blocks
        ]
        if missing:
            raise FileNotFoundError(f"template dir {path} lacks: {', '.join(missing)}")
        return cls(**blocks)


def _strip_final_newline(text: str) -> str:
    return text[:-1] if text.endswith("\n") else text


def builtin_template_dir(name: str) -> Path:
    return Path(str(resources.files("promptgrid") / "templates" / name))


def load_templates(ref: str | Path) -> PromptTemplate:
    """Load templates from a directory, or from a built-in set such as ``"ec"``."""
    path = Path(ref)
    if not path.is_dir():
        path = builtin_template_dir(str(ref))
    return PromptTemplate.from_dir(path)


# -- shots --------------------------------------------------------------------


@dataclass(frozen=True)
class ShotContext:
    shots: tuple[tuple[Example, str], ...] = ()
    source: str = "none"

    @classmethod
    def of(cls, examples: Sequence[Example], source: str) -> "ShotContext":
        return cls(tuple((ex, ex.gold) for ex in examples), source)

    @property
    def ids(self) -> list[str]:
        return [ex.id for ex, _ in self.shots]


NO_SHOTS = ShotContext()


def derive_seed(seed: int, key: str) -> int:
    """Stable per-key seed, independent of PYTHONHASHSEED."""
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def sample_shots(
    train: Dataset, n: int, seed: int, exclude_id: str | None = None
) -> ShotContext:
    pool = [ex for ex in train.examples if ex.id != exclude_id]
    if n > len(pool):
        raise InsufficientExamples(
            f"need {n} shots but only {len(pool)} eligible training examples"
        )
    picks = random.Random(seed).sample(pool, n)
    return ShotContext.of(picks, "random")


def select_fixed_shots(train: Dataset, ids: Sequence[str]) -> ShotContext:
    if len(set(ids)) != len(ids):
        raise DuplicateExampleId(f"fixed shot ids repeat: {list(ids)}")
    index = train.by_id()
    missing = [i for i in ids if i not in index]
    if missing:
        raise UnknownExampleId(f"fixed shot ids not in training set: {missing}")
    return ShotContext.of([index[i] for i in ids], "fixed")


# -- rendering ----------------------------------------------------------------


@dataclass(frozen=True)
class PromptRecord:
    strategy: Strategy
    text: str
    expected_parse_mode: str
    target_example_id: str
    shot_ids: tuple[str, ...] = field(default=())


def tag_format(order: str = "reason_then_class") -> str:
    return " ".join(_TAG_PLACEHOLDERS[b] for b in ORDER_BLOCKS[order])


def parse_mode_for(strategy: Strategy, output_style: str = "category") -> str:
    if strategy.kind == "numerical":
        return "category_numeric"
    return {"category": "category_text", "reasoning": "tagged_reasoning", "direct": "direct"}[
        output_style
    ]


def _categories(schema: LabelSchema, numeric: bool) -> str:
    if numeric:
        return ", ".join(f"{label}: {schema.index_of(label)}" for label in schema.labels)
    return "[" + ", ".join(schema.labels) + "]"


def render_prompt(
    strategy: Strategy | str,
    schema: LabelSchema,
    example: Example,
    context: ShotContext,
    templates: PromptTemplate,
    *,
    phase: str = "infer",
    output_style: str = "category",
    reasoning_order: str = "reason_then_class",
) -> PromptRecord:
    """Render the prompt for ``example`` under ``strategy``.

    ``phase`` only matters for the uncertainty strategy: training prompts offer
    the uncertain fallback, inference prompts list the original classes only.
    ``output_style`` swaps the format requirement for the tagged-reasoning or
    direct-answer variants.
    """
    strategy = Strategy.parse(strategy)
    if phase not in ("train", "infer"):
        raise ValueError(f"phase must be 'train' or 'infer', got {phase!r}")
    if output_style not in OUTPUT_STYLES:
        raise ValueError(f"unknown output style: {output_style!r}")
    if strategy.kind == "numerical" and output_style != "category":
        raise ValueError("numerical strategy only supports the category output style")
    if len(context.shots) != strategy.shots_required:
        raise ShotCountMismatch(
            f"{strategy} needs {strategy.shots_required} shots, got {len(context.shots)}"
        )
    if strategy.uses_definitions:
        defs = schema.definitions or {}
        absent = [label for label in schema.labels if label not in defs]
        if absent:
            raise MissingDefinitions(f"{strategy} needs definitions for: {absent}")

    numeric = strategy.kind == "numerical"
    if numeric:
        requirement = templates.format_numeric
    elif output_style == "reasoning":
        requirement = fill(templates.format_reasoning, tag_format=tag_format(reasoning_order))
    elif output_style == "direct":
        requirement = templates.format_direct
    elif strategy.kind == "uncertainty" and phase == "train":
        if schema.uncertain_label is None:
            raise ValueError("uncertainty training prompts need schema.uncertain_label")
        requirement = fill(templates.format_uncertain, uncertain_label=schema.uncertain_label)
    else:
        requirement = templates.format_category

    sections = [
        fill(
            templates.task_header,
            categories=_categories(schema, numeric),
            format_requirement=requirement,
        )
    ]
    if strategy.uses_definitions:
        lines = [
            fill(templates.definition_block, label=label, definition=schema.definitions[label])
            for label in schema.labels
        ]
        if templates.definitions_header:
            lines.insert(0, templates.definitions_header)
        sections.append("\n".join(lines))
    for i, (shot, label) in enumerate(context.shots, 1):
        shown = str(schema.index_of(label)) if numeric else label
        sections.append(fill(templates.example_block, index=i, label=shown, **shot.slots))
    sections.append(fill(templates.current_case_block, **example.slots))
    sections.append(templates.format_instruction)

    return PromptRecord(
        strategy=strategy,
        text="\n\n".join(sections),
        expected_parse_mode=parse_mode_for(strategy, output_style),
        target_example_id=example.id,
        shot_ids=tuple(context.ids),
    )


def render_sft_target(example: Example, schema: LabelSchema, strategy: Strategy | str) -> str:
    strategy = Strategy.parse(strategy)
    if not strategy.trainable:
        raise ValueError(f"{strategy} is inference-only and has no training target")
    if strategy.kind == "uncertainty" and schema.is_uncertain(example.gold):
        return f"{CATEGORY_PREFIX} {schema.uncertain_label}"
    label = schema.lookup(example.gold)
    if label is None:
        raise UnknownLabel(f"example {example.id!r}: gold {example.gold!r} not in schema")
    if strategy.kind == "numerical":
        return f"{CATEGORY_PREFIX} {schema.index_of(label)}"
    return f"{CATEGORY_PREFIX} {label}"
