"""Shared data model: label schemas, examples, predictions and metric reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

SPLITS = ("train", "test")


def normalize_label(label: str, case_fold: bool = False) -> str:
    label = label.strip()
    return label.casefold() if case_fold else label


@dataclass(frozen=True)
class ValidationReport:
    problems: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.problems

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class LabelSchema:
    """Ordered class labels plus optional definitions and an uncertainty label.

    ``numeric_map`` is derived from label order when not given explicitly. It is
    only ever passed by hand to exercise validation.
    """

    labels: tuple[str, ...]
    definitions: Mapping[str, str] | None = None
    uncertain_label: str | None = None
    numeric_map: Mapping[str, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.numeric_map is None:
            object.__setattr__(
                self, "numeric_map", {label: i for i, label in enumerate(self.labels)}
            )

    def index_of(self, label: str) -> int:
        return self.numeric_map[label]

    def label_at(self, index: int) -> str:
        return self.labels[index]

    def lookup(self, text: str, case_fold: bool = False) -> str | None:
        """Map free text onto a schema label, or None if it is not one."""
        key = normalize_label(text, case_fold)
        for label in self.labels:
            if normalize_label(label, case_fold) == key:
                return label
        return None

    def is_uncertain(self, text: str, case_fold: bool = False) -> bool:
        if self.uncertain_label is None:
            return False
        return normalize_label(text, case_fold) == normalize_label(
            self.uncertain_label, case_fold
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"labels": list(self.labels)}
        if self.definitions is not None:
            out["definitions"] = dict(self.definitions)
        if self.uncertain_label is not None:
            out["uncertain_label"] = self.uncertain_label
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LabelSchema":
        return cls(
            labels=tuple(data["labels"]),
            definitions=dict(data["definitions"]) if data.get("definitions") else None,
            uncertain_label=data.get("uncertain_label"),
        )


@dataclass(frozen=True)
class Example:
    id: str
    slots: Mapping[str, str]
    gold: str

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "slots": dict(self.slots), "gold": self.gold}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Example":
        return cls(id=data["id"], slots=dict(data["slots"]), gold=data["gold"])


@dataclass(frozen=True)
class Dataset:
    name: str
    split: str
    examples: tuple[Example, ...]
    schema_ref: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "examples", tuple(self.examples))

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def by_id(self) -> dict[str, Example]:
        return {ex.id: ex for ex in self.examples}

    def replace_examples(self, examples: Iterable[Example]) -> "Dataset":
        return Dataset(self.name, self.split, tuple(examples), self.schema_ref)


@dataclass(frozen=True)
class Prediction:
    """Outcome of one classification call.

    ``confidence`` is the mean token log-probability of the emitted label
    tokens, when the backend reports log-probabilities.
    """

    example_id: str
    raw_output: str
    format_ok: bool
    parsed_label: str | None = None
    confidence: float | None = None

    def __post_init__(self) -> None:
        if self.format_ok != (self.parsed_label is not None):
            raise ValueError(
                f"prediction {self.example_id!r}: parsed_label must be present "
                "exactly when format_ok is true"
            )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "example_id": self.example_id,
            "raw_output": self.raw_output,
            "format_ok": self.format_ok,
        }
        if self.parsed_label is not None:
            out["parsed_label"] = self.parsed_label
        if self.confidence is not None:
            out["confidence"] = self.confidence
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Prediction":
        return cls(
            example_id=data["example_id"],
            raw_output=data["raw_output"],
            format_ok=bool(data["format_ok"]),
            parsed_label=data.get("parsed_label"),
            confidence=data.get("confidence"),
        )


@dataclass(frozen=True)
class MetricsReport:
    n_total: int
    n_format_ok: int
    n_correct: int
    fmt_suc_ratio: float
    fmt_suc_acc: float
    fmt_suc_macro_f1: float
    overall_acc: float
    overall_macro_f1: float
    empty_format_subset: bool = False

    METRIC_NAMES = (
        "fmt_suc_ratio",
        "fmt_suc_acc",
        "fmt_suc_macro_f1",
        "overall_acc",
        "overall_macro_f1",
    )

    def metrics(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.METRIC_NAMES}

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricsReport":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


def validate_schema(schema: LabelSchema) -> ValidationReport:
    problems: list[str] = []
    trimmed = [label.strip() for label in schema.labels]
    if not trimmed:
        problems.append("schema has no labels")
    for label in trimmed:
        if not label:
            problems.append("empty label")
    seen: set[str] = set()
    for label in trimmed:
        if label in seen:
            problems.append(f"duplicate label: {label!r}")
        seen.add(label)

    expected = {label: i for i, label in enumerate(schema.labels)}
    if dict(schema.numeric_map) != expected:
        problems.append("numeric_map is not the 0-based index of labels in order")

    if schema.uncertain_label is not None:
        if not schema.uncertain_label.strip():
            problems.append("uncertain_label is empty")
        elif schema.uncertain_label.strip() in seen:
            problems.append(
                f"uncertain_label {schema.uncertain_label!r} collides with a class label"
            )

    if schema.definitions is not None:
        for key in schema.definitions:
            if key.strip() not in seen:
                problems.append(f"definition for unknown label: {key!r}")
    return ValidationReport(tuple(problems))


def validate_dataset(dataset: Dataset, schema: LabelSchema) -> ValidationReport:
    problems: list[str] = []
    if dataset.split not in SPLITS:
        problems.append(f"unknown split: {dataset.split!r}")
    allowed = {label.strip() for label in schema.labels}
    if schema.uncertain_label is not None:
        allowed.add(schema.uncertain_label.strip())
    seen: set[str] = set()
    for ex in dataset.examples:
        if not ex.id:
            problems.append("example with empty id")
        elif ex.id in seen:
            problems.append(f"duplicate example id: {ex.id!r}")
        seen.add(ex.id)
        if not ex.slots:
            problems.append(f"example {ex.id!r} has no text slots")
        if ex.gold.strip() not in allowed:
            problems.append(f"example {ex.id!r} has unknown gold label {ex.gold!r}")
    return ValidationReport(tuple(problems))


# -- file I/O -----------------------------------------------------------------


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
    return rows


def write_jsonl(path: str | Path, rows: Iterable[Mapping[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def load_schema(path: str | Path) -> LabelSchema:
    with open(path, encoding="utf-8") as fh:
        return LabelSchema.from_dict(json.load(fh))


def save_schema(path: str | Path, schema: LabelSchema) -> None:
    Path(path).write_text(
        json.dumps(schema.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )


def load_dataset(
    path: str | Path, name: str | None = None, split: str = "train", schema_ref: str = ""
) -> Dataset:
    examples = tuple(Example.from_dict(row) for row in read_jsonl(path))
    return Dataset(name or Path(path).stem, split, examples, schema_ref)


def save_dataset(path: str | Path, dataset: Dataset) -> None:
    write_jsonl(path, (ex.to_dict() for ex in dataset.examples))


def load_predictions(path: str | Path) -> list[Prediction]:
    return [Prediction.from_dict(row) for row in read_jsonl(path)]


def save_predictions(path: str | Path, predictions: Sequence[Prediction]) -> None:
    write_jsonl(path, (p.to_dict() for p in predictions))
