"""Training-data construction: SFT corpora, uncertainty relabeling, reasoning targets, packing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .inference import parse_category, parse_tagged
from .prompts import (
    NO_SHOTS,
    ORDER_BLOCKS,
    PromptTemplate,
    ShotContext,
    Strategy,
    derive_seed,
    parse_mode_for,
    render_prompt,
    render_sft_target,
    sample_shots,
    select_fixed_shots,
)
from .retrieval import EmbeddingStore
from .types import Dataset, Example, LabelSchema, Prediction, read_jsonl, write_jsonl

TokenCounter = Callable[[str], int]

PACK_MODES = ("standard", "neat")


def whitespace_tokens(text: str) -> int:
    """Crude default token counter; swap in a model tokenizer for real runs."""
    return len(text.split())


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingRecord:
    prompt: str
    target: str
    example_id: str
    strategy: Strategy
    token_length: int | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "example_id": self.example_id,
            "strategy": self.strategy.name,
            "prompt": self.prompt,
            "target": self.target,
        }
        if self.token_length is not None:
            out["token_length"] = self.token_length
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainingRecord":
        return cls(
            prompt=data["prompt"],
            target=data["target"],
            example_id=data["example_id"],
            strategy=Strategy.parse(data["strategy"]),
            token_length=data.get("token_length"),
        )


def save_records(path: str | Path, records: Iterable[TrainingRecord]) -> None:
    write_jsonl(path, (r.to_dict() for r in records))


def load_records(path: str | Path) -> list[TrainingRecord]:
    return [TrainingRecord.from_dict(row) for row in read_jsonl(path)]


# -- shot planning ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ShotPlanner:
    """Chooses the shot context for one example under one strategy.

    Random shots are drawn per example from ``derive_seed(seed, example.id)``.
    Fixed shots default to a seeded draw of three training examples. Similar
    shots query ``embeddings`` with the example's own vector and only return
    training ids.
    """

    train: Dataset
    seed: int = 0
    fixed_ids: tuple[str, ...] | None = None
    embeddings: EmbeddingStore | None = None
    exclude_self: bool = True
    _pool: dict[str, Any] = field(default_factory=dict, init=False, repr=False)

    def fixed_context(self) -> ShotContext:
        if "fixed" not in self._pool:
            if self.fixed_ids is not None:
                ctx = select_fixed_shots(self.train, self.fixed_ids)
            else:
                drawn = sample_shots(self.train, 3, derive_seed(self.seed, "fixed_3_shot"))
                ctx = ShotContext(drawn.shots, "fixed")
            self._pool["fixed"] = ctx
        return self._pool["fixed"]

    def _candidates(self) -> EmbeddingStore:
        if self.embeddings is None:
            raise CorpusError("similar_3_shot needs an embedding store")
        if "store" not in self._pool:
            ids = [ex.id for ex in self.train.examples if ex.id in self.embeddings]
            missing = len(self.train) - len(ids)
            if missing:
                raise CorpusError(f"{missing} training examples have no embedding")
            self._pool["store"] = self.embeddings.subset(ids)
        return self._pool["store"]

    def context(self, strategy: Strategy | str, example: Example) -> ShotContext:
        strategy = Strategy.parse(strategy)
        n = strategy.shots_required
        if n == 0:
            return NO_SHOTS
        exclude = example.id if self.exclude_self else None
        if strategy.kind == "fixed_3_shot":
            # identical for every record, the target included
            return self.fixed_context()
        if strategy.kind == "similar_3_shot":
            if self.embeddings is None or example.id not in self.embeddings:
                raise CorpusError(f"no embedding for example {example.id!r}")
            hits = self._candidates().top_k(self.embeddings.vector(example.id), n, exclude)
            index = self.train.by_id()
            return ShotContext.of([index[i] for i, _ in hits], "retrieved")
        return sample_shots(self.train, n, derive_seed(self.seed, example.id), exclude)


def build_sft_corpus(
    train: Dataset,
    schema: LabelSchema,
    strategy: Strategy | str,
    seed: int,
    templates: PromptTemplate,
    *,
    fixed_ids: Sequence[str] | None = None,
    store: EmbeddingStore | None = None,
    token_counter: TokenCounter | None = whitespace_tokens,
) -> list[TrainingRecord]:
    """One (prompt, target) record per training example, in dataset order."""
    strategy = Strategy.parse(strategy)
    if not strategy.trainable:
        raise CorpusError(f"{strategy} is inference-only")
    planner = ShotPlanner(
        train, seed, tuple(fixed_ids) if fixed_ids is not None else None, store
    )
    mode = parse_mode_for(strategy)
    records = []
    for ex in train.examples:
        context = planner.context(strategy, ex)
        prompt = render_prompt(strategy, schema, ex, context, templates, phase="train")
        target = render_sft_target(ex, schema, strategy)
        if parse_category(target, schema, mode, allow_uncertain=True) is None:
            raise CorpusError(f"target for {ex.id!r} does not parse: {target!r}")
        length = token_counter(prompt.text + "\n" + target) if token_counter else None
        records.append(TrainingRecord(prompt.text, target, ex.id, strategy, length))
    return records


# -- uncertainty relabeling ---------------------------------------------------


class MissingPrediction(CorpusError):
    pass


class MissingConfidence(CorpusError):
    pass


@dataclass(frozen=True)
class RelabelReport:
    n_qualified: int
    n_relabeled: int
    relabeled_ids: tuple[str, ...]
    cap_fraction: float
    cap: int
    qualified_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_qualified": self.n_qualified,
            "n_relabeled": self.n_relabeled,
            "relabeled_ids": list(self.relabeled_ids),
            "cap_fraction": self.cap_fraction,
            "cap": self.cap,
            "qualified_ids": list(self.qualified_ids),
        }


def relabel_cap(n_train: int, cap_fraction: float) -> int:
    # Fraction(str(x)) keeps 0.1 * 100 at exactly 10
    return math.floor(Fraction(str(cap_fraction)) * n_train)


def relabel_uncertain(
    train: Dataset,
    preds_m1: Sequence[Prediction],
    preds_m2: Sequence[Prediction],
    schema: LabelSchema,
    cap_fraction: float = 0.10,
    *,
    case_fold: bool = False,
) -> tuple[Dataset, RelabelReport]:
    """Relabel examples both reference models get wrong, up to a cap.

    A format failure counts as a wrong prediction. Over the cap, the examples
    with the lowest mean confidence win, ties broken by ascending id.
    """
    if schema.uncertain_label is None:
        raise CorpusError("schema has no uncertain_label")
    if not 0 <= cap_fraction <= 1:
        raise ValueError("cap_fraction must lie in [0, 1]")
    m1 = {p.example_id: p for p in preds_m1}
    m2 = {p.example_id: p for p in preds_m2}

    def wrong(p: Prediction, gold: str) -> bool:
        return not p.format_ok or schema.lookup(p.parsed_label, case_fold) != gold

    qualified = []
    for ex in train.examples:
        if ex.id not in m1 or ex.id not in m2:
            which = "m1" if ex.id not in m1 else "m2"
            raise MissingPrediction(f"no {which} prediction for {ex.id!r}")
        gold = schema.lookup(ex.gold, case_fold)
        if wrong(m1[ex.id], gold) and wrong(m2[ex.id], gold):
            qualified.append(ex.id)

    cap = relabel_cap(len(train), cap_fraction)
    if len(qualified) <= cap:
        chosen = list(qualified)
    else:
        keyed = []
        for i in qualified:
            c1, c2 = m1[i].confidence, m2[i].confidence
            if c1 is None or c2 is None:
                raise MissingConfidence(f"prediction for {i!r} lacks a confidence")
            keyed.append(((c1 + c2) / 2, i))
        chosen = [i for _, i in sorted(keyed)[:cap]]

    picked = set(chosen)
    relabeled = train.replace_examples(
        Example(ex.id, ex.slots, schema.uncertain_label) if ex.id in picked else ex
        for ex in train.examples
    )
    order = [ex.id for ex in train.examples if ex.id in picked]
    report = RelabelReport(
        n_qualified=len(qualified),
        n_relabeled=len(order),
        relabeled_ids=tuple(order),
        cap_fraction=cap_fraction,
        cap=cap,
        qualified_ids=tuple(qualified),
    )
    return relabeled, report


# -- reasoning targets --------------------------------------------------------


@dataclass(frozen=True)
class ReasonTriple:
    example_id: str
    reason: str
    class_label: str
    think: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out = {"example_id": self.example_id, "reason": self.reason, "class": self.class_label}
        if self.think is not None:
            out["think"] = self.think
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReasonTriple":
        return cls(data["example_id"], data["reason"], data["class"], data.get("think"))


def load_triples(path: str | Path) -> list[ReasonTriple]:
    return [ReasonTriple.from_dict(row) for row in read_jsonl(path)]


def save_triples(path: str | Path, triples: Iterable[ReasonTriple]) -> None:
    write_jsonl(path, (t.to_dict() for t in triples))


def reasoning_target(triple: ReasonTriple, order: str, schema: LabelSchema) -> str:
    if order not in ORDER_BLOCKS:
        raise ValueError(f"unknown reasoning order {order!r}")
    label = schema.lookup(triple.class_label)
    if label is None:
        raise CorpusError(f"{triple.example_id!r}: class {triple.class_label!r} not in schema")
    parts = {"answer": label, "reason": triple.reason, "think": triple.think}
    blocks = []
    for name in ORDER_BLOCKS[order]:
        text = parts[name]
        if text is None or not text.strip():
            raise CorpusError(f"{triple.example_id!r}: missing {name} for order {order}")
        blocks.append(f"<{name}>{text.strip()}</{name}>")
    target = " ".join(blocks)
    parsed = parse_tagged(target, order)
    if parsed is None or parsed.answer != label:
        # tag-like text inside a component would make the target unparseable
        raise CorpusError(f"{triple.example_id!r}: target does not round-trip")
    return target


def build_reasoning_corpus(
    triples: Sequence[ReasonTriple],
    order: str,
    schema: LabelSchema,
    train: Dataset,
    templates: PromptTemplate,
    *,
    strategy: Strategy | str = "zero_shot",
    seed: int = 0,
    token_counter: TokenCounter | None = whitespace_tokens,
) -> list[TrainingRecord]:
    strategy = Strategy.parse(strategy)
    if strategy.kind in ("numerical", "ppl"):
        raise CorpusError(f"{strategy} has no reasoning variant")
    planner = ShotPlanner(train, seed)
    index = train.by_id()
    records = []
    for t in triples:
        if t.example_id not in index:
            raise CorpusError(f"triple for unknown example {t.example_id!r}")
        ex = index[t.example_id]
        target = reasoning_target(t, order, schema)
        prompt = render_prompt(
            strategy,
            schema,
            ex,
            planner.context(strategy, ex),
            templates,
            phase="train",
            output_style="reasoning",
            reasoning_order=order,
        )
        length = token_counter(prompt.text + "\n" + target) if token_counter else None
        records.append(TrainingRecord(prompt.text, target, ex.id, strategy, length))
    return records


# -- packing ------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    example_id: str
    offset: int
    length: int

    def to_dict(self) -> dict[str, Any]:
        return {"example_id": self.example_id, "offset": self.offset, "length": self.length}


@dataclass(frozen=True)
class Pack:
    mode: str
    max_len: int
    segments: tuple[Segment, ...]

    @property
    def total_length(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def segment_lengths(self) -> list[int]:
        return [s.length for s in self.segments]

    @property
    def cross_attending(self) -> bool:
        return self.mode == "standard"

    def attention_mask(self) -> np.ndarray:
        """Boolean [total, total] mask; block-diagonal for neat packs.

        Causality is left to the trainer, which combines this with its own
        lower-triangular mask.
        """
        n = self.total_length
        if self.cross_attending:
            return np.ones((n, n), dtype=bool)
        mask = np.zeros((n, n), dtype=bool)
        for s in self.segments:
            mask[s.offset : s.offset + s.length, s.offset : s.offset + s.length] = True
        return mask

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "max_len": self.max_len,
            "segments": [s.to_dict() for s in self.segments],
            "total_length": self.total_length,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Pack":
        segments = tuple(
            Segment(s["example_id"], int(s["offset"]), int(s["length"])) for s in data["segments"]
        )
        p = cls(data["mode"], int(data["max_len"]), segments)
        if "total_length" in data and data["total_length"] != p.total_length:
            raise ValueError("pack total_length disagrees with its segments")
        return p


class RecordTooLong(CorpusError):
    pass


def pack(records: Sequence[TrainingRecord], max_len: int, mode: str = "neat") -> list[Pack]:
    """Order-preserving next-fit packing; records are never split or reordered."""
    if mode not in PACK_MODES:
        raise ValueError(f"pack mode must be one of {PACK_MODES}, got {mode!r}")
    if max_len <= 0:
        raise ValueError("max_len must be positive")
    packs: list[Pack] = []
    current: list[Segment] = []
    used = 0
    for r in records:
        if r.token_length is None:
            raise CorpusError(f"record {r.example_id!r} has no token_length")
        if r.token_length > max_len:
            raise RecordTooLong(f"record {r.example_id!r} has {r.token_length} > {max_len} tokens")
        if current and used + r.token_length > max_len:
            packs.append(Pack(mode, max_len, tuple(current)))
            current, used = [], 0
        current.append(Segment(r.example_id, used, r.token_length))
        used += r.token_length
    if current:
        packs.append(Pack(mode, max_len, tuple(current)))
    return packs


def save_packs(path: str | Path, packs: Iterable[Pack]) -> None:
    write_jsonl(path, (p.to_dict() for p in packs))


def load_packs(path: str | Path) -> list[Pack]:
    return [Pack.from_dict(row) for row in read_jsonl(path)]
