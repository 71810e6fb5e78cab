"""Run configuration, the train x infer strategy matrix, and report emission."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import __version__
from .backends import Backend, build_backend
from .corpus import ShotPlanner
from .inference import PPL_SCOPES, classify_all
from .metrics import evaluate, pct
from .prompts import (
    NO_SHOTS,
    OUTPUT_STYLES,
    REASONING_ORDERS,
    PromptRecord,
    PromptTemplate,
    Strategy,
    load_templates,
    render_prompt,
)
from .retrieval import EmbeddingStore, load_embeddings
from .types import (
    Dataset,
    LabelSchema,
    MetricsReport,
    Prediction,
    load_dataset,
    load_schema,
    save_predictions,
    validate_dataset,
    validate_schema,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_TOTAL = 4

TABLE_COLUMNS = (
    "fmt-suc ratio",
    "fmt-suc acc",
    "fmt-suc macro-f1",
    "overall acc",
    "overall macro-f1",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything a matrix run depends on. Paths are resolved against ``base_dir``.

    ``backends`` maps a train-strategy name (or ``"default"``) to a backend
    spec; each trained model is just an endpoint here.
    """

    schema: Path
    train: Path
    test: Path
    templates: str
    train_strategies: tuple[str, ...]
    infer_strategies: tuple[str, ...]
    backends: Mapping[str, Mapping[str, Any]]
    base_dir: Path = Path(".")
    embeddings: Path | None = None
    fixed_shot_ids: tuple[str, ...] | None = None
    seed: int = 0
    parallelism: int = 1
    cell_parallelism: int = 1
    output_dir: Path = Path("out")
    output_style: str = "category"
    reasoning_order: str = "reason_then_class"
    ppl_scope: str = "label"
    case_fold: bool = False
    extra: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: str | Path = ".") -> "RunConfig":
        base = Path(base_dir)

        def path(key: str, required: bool = True) -> Path | None:
            if key not in data or data[key] is None:
                if required:
                    raise ConfigError(f"config is missing {key!r}")
                return None
            return base / data[key]

        try:
            cfg = cls(
                schema=path("schema"),
                train=path("train"),
                test=path("test"),
                templates=str(data.get("templates", "ec")),
                train_strategies=tuple(data.get("train_strategies", ())),
                infer_strategies=tuple(data.get("infer_strategies", ())),
                backends=dict(data.get("backends", {})),
                base_dir=base,
                embeddings=path("embeddings", required=False),
                fixed_shot_ids=(
                    tuple(data["fixed_shot_ids"]) if data.get("fixed_shot_ids") else None
                ),
                seed=int(data.get("seed", 0)),
                parallelism=int(data.get("parallelism", 1)),
                cell_parallelism=int(data.get("cell_parallelism", 1)),
                output_dir=base / data.get("output_dir", "out"),
                output_style=data.get("output_style", "category"),
                reasoning_order=data.get("reasoning_order", "reason_then_class"),
                ppl_scope=data.get("ppl_scope", "label"),
                case_fold=bool(data.get("case_fold", False)),
                extra={k: v for k, v in data.items() if k not in _KNOWN_KEYS},
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config value: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data, path.parent)

    def with_overrides(self, **changes: Any) -> "RunConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        for key in ("train_strategies", "infer_strategies"):
            if key in changes:
                changes[key] = tuple(changes[key])
        return dataclasses.replace(self, **changes)

    def validate(self) -> "RunConfig":
        problems = []
        for label, p in (("schema", self.schema), ("train", self.train), ("test", self.test)):
            if not p.is_file():
                problems.append(f"{label} file not found: {p}")
        if self.embeddings is not None and not self.embeddings.is_file():
            problems.append(f"embeddings file not found: {self.embeddings}")
        if not self.train_strategies:
            problems.append("train_strategies is empty")
        if not self.infer_strategies:
            problems.append("infer_strategies is empty")
        for name in self.train_strategies + self.infer_strategies:
            try:
                Strategy.parse(name)
            except ValueError as exc:
                problems.append(str(exc))
        for name in self.train_strategies:
            try:
                if not Strategy.parse(name).trainable:
                    problems.append(f"{name} may only appear in infer_strategies")
            except ValueError:
                pass
            if self.backend_spec(name) is None:
                problems.append(f"no backend configured for train strategy {name!r}")
        if self.parallelism < 1 or self.cell_parallelism < 1:
            problems.append("parallelism limits must be >= 1")
        if self.output_style not in OUTPUT_STYLES:
            problems.append(f"unknown output_style {self.output_style!r}")
        if self.reasoning_order not in REASONING_ORDERS:
            problems.append(f"unknown reasoning_order {self.reasoning_order!r}")
        if self.ppl_scope not in PPL_SCOPES:
            problems.append(f"unknown ppl_scope {self.ppl_scope!r}")
        try:
            self.load_templates()
        except (OSError, ValueError) as exc:
            problems.append(f"templates {self.templates!r}: {exc}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def backend_spec(self, train_strategy: str) -> Mapping[str, Any] | None:
        name = Strategy.parse(train_strategy).name if _parses(train_strategy) else train_strategy
        return self.backends.get(name, self.backends.get(train_strategy, self.backends.get("default")))

    def load_templates(self) -> PromptTemplate:
        local = self.base_dir / self.templates
        return load_templates(local if local.is_dir() else self.templates)

    def to_dict(self) -> dict[str, Any]:
        """Manifest form: enough to rerun any cell."""
        return {
            "schema": str(self.schema),
            "train": str(self.train),
            "test": str(self.test),
            "templates": self.templates,
            "embeddings": str(self.embeddings) if self.embeddings else None,
            "fixed_shot_ids": list(self.fixed_shot_ids) if self.fixed_shot_ids else None,
            "train_strategies": list(self.train_strategies),
            "infer_strategies": list(self.infer_strategies),
            "backends": {k: dict(v) for k, v in self.backends.items()},
            "seed": self.seed,
            "parallelism": self.parallelism,
            "cell_parallelism": self.cell_parallelism,
            "output_style": self.output_style,
            "reasoning_order": self.reasoning_order,
            "ppl_scope": self.ppl_scope,
            "case_fold": self.case_fold,
        }


_KNOWN_KEYS = {f.name for f in dataclasses.fields(RunConfig)} | {"output_dir"}


def _parses(name: str) -> bool:
    try:
        Strategy.parse(name)
    except ValueError:
        return False
    return True


# -- loaded inputs ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Inputs:
    schema: LabelSchema
    train: Dataset
    test: Dataset
    templates: PromptTemplate
    embeddings: EmbeddingStore | None


def load_inputs(config: RunConfig) -> Inputs:
    try:
        schema = load_schema(config.schema)
        train = load_dataset(config.train, split="train")
        test = load_dataset(config.test, split="test")
        templates = config.load_templates()
        embeddings = load_embeddings(config.embeddings) if config.embeddings else None
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load inputs: {exc}") from exc
    problems = list(validate_schema(schema).problems)
    problems += validate_dataset(train, schema).problems
    problems += validate_dataset(test, schema).problems
    if problems:
        raise ConfigError("invalid inputs: " + "; ".join(problems[:10]))
    return Inputs(schema, train, test, templates, embeddings)


def build_infer_prompts(
    config: RunConfig, inputs: Inputs, infer_strategy: str | Strategy
) -> list[PromptRecord]:
    """Inference prompts for every test example, in test order."""
    strategy = Strategy.parse(infer_strategy)
    planner = ShotPlanner(
        inputs.train, config.seed, config.fixed_shot_ids, inputs.embeddings, exclude_self=False
    )
    prompts = []
    for ex in inputs.test.examples:
        if strategy.kind == "ppl":
            # base prompt for perplexity scoring is the zero-shot rendering
            base = render_prompt("zero_shot", inputs.schema, ex, NO_SHOTS, inputs.templates)
            prompts.append(dataclasses.replace(base, strategy=strategy))
            continue
        prompts.append(
            render_prompt(
                strategy,
                inputs.schema,
                ex,
                planner.context(strategy, ex),
                inputs.templates,
                phase="infer",
                output_style=config.output_style,
                reasoning_order=config.reasoning_order,
            )
        )
    return prompts


def run_inference(
    config: RunConfig, inputs: Inputs, backend: Backend, infer_strategy: str | Strategy
) -> list[Prediction]:
    prompts = build_infer_prompts(config, inputs, infer_strategy)
    return classify_all(
        backend,
        prompts,
        inputs.schema,
        parallelism=config.parallelism,
        order=config.reasoning_order,
        ppl_scope=config.ppl_scope,
        case_fold=config.case_fold,
    )


# -- matrix -------------------------------------------------------------------


@dataclass(frozen=True)
class CellResult:
    train: str
    infer: str
    backend: str
    report: MetricsReport | None = None
    error: str | None = None
    predictions: tuple[Prediction, ...] = field(default=(), repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "train": self.train,
            "infer": self.infer,
            "backend": self.backend,
            "metrics": self.report.to_dict() if self.report else None,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CellResult":
        report = MetricsReport.from_dict(data["metrics"]) if data.get("metrics") else None
        return cls(data["train"], data["infer"], data["backend"], report, data.get("error"))


@dataclass(frozen=True)
class MatrixResult:
    train_strategies: tuple[str, ...]
    infer_strategies: tuple[str, ...]
    cells: Mapping[tuple[str, str], CellResult]
    manifest: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def cell(self, train: str, infer: str) -> CellResult:
        return self.cells[(train, infer)]

    @property
    def n_failed(self) -> int:
        return sum(1 for c in self.cells.values() if not c.ok)

    @property
    def n_populated(self) -> int:
        return sum(1 for c in self.cells.values() if c.ok)

    def exit_code(self) -> int:
        if self.n_failed == 0:
            return EXIT_OK
        return EXIT_TOTAL if self.n_populated == 0 else EXIT_PARTIAL

    def best_infer(self, train: str) -> str | None:
        """Infer strategy with the highest overall accuracy; ties go to the earlier column."""
        best, best_acc = None, -1.0
        for infer in self.infer_strategies:
            c = self.cells[(train, infer)]
            if c.report is not None and c.report.overall_acc > best_acc:
                best, best_acc = infer, c.report.overall_acc
        return best

    def to_dict(self) -> dict[str, Any]:
        return {
            "train_strategies": list(self.train_strategies),
            "infer_strategies": list(self.infer_strategies),
            "cells": [
                self.cells[(t, i)].to_dict()
                for t in self.train_strategies
                for i in self.infer_strategies
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MatrixResult":
        cells = {}
        for row in data["cells"]:
            c = CellResult.from_dict(row)
            cells[(c.train, c.infer)] = c
        return cls(tuple(data["train_strategies"]), tuple(data["infer_strategies"]), cells)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _config_digest(config: RunConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def run_matrix(config: RunConfig, inputs: Inputs | None = None) -> MatrixResult:
    """Evaluate every (train, infer) cell. Cell failures are recorded, not raised."""
    config.validate()
    inputs = inputs or load_inputs(config)
    train_names = tuple(Strategy.parse(s).name for s in config.train_strategies)
    infer_names = tuple(Strategy.parse(s).name for s in config.infer_strategies)

    backends: dict[str, Backend | Exception] = {}
    for t in train_names:
        try:
            backends[t] = build_backend(config.backend_spec(t), config.base_dir)
        except (OSError, KeyError, ValueError) as exc:
            backends[t] = exc

    timings: dict[str, dict[str, str]] = {}

    def run_cell(key: tuple[str, str]) -> CellResult:
        t, i = key
        started = _now()
        backend = backends[t]
        if isinstance(backend, Exception):
            cell = CellResult(t, i, "unavailable", error=f"{type(backend).__name__}: {backend}")
        else:
            try:
                preds = run_inference(config, inputs, backend, i)
                report = evaluate(preds, inputs.test, inputs.schema, case_fold=config.case_fold)
                cell = CellResult(t, i, backend.name, report, predictions=tuple(preds))
            except Exception as exc:  # contained per cell by design
                log.warning("cell %s x %s failed: %s", t, i, exc)
                cell = CellResult(t, i, backend.name, error=f"{type(exc).__name__}: {exc}")
        timings[f"{t}|{i}"] = {"started": started, "finished": _now()}
        return cell

    keys = [(t, i) for t in train_names for i in infer_names]
    if config.cell_parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.cell_parallelism) as pool:
            results = list(pool.map(run_cell, keys))
    else:
        results = [run_cell(k) for k in keys]

    manifest = {
        "version": __version__,
        "config": config.to_dict(),
        "config_sha256": _config_digest(config),
        "seed": config.seed,
        "backends": {
            t: (b.name if not isinstance(b, Exception) else None) for t, b in backends.items()
        },
        "cells": timings,
        "n_test": len(inputs.test),
    }
    return MatrixResult(train_names, infer_names, dict(zip(keys, results)), manifest)


# -- reports ------------------------------------------------------------------


def render_table(result: MatrixResult, delimiter: str = "\t") -> str:
    """Rows are train strategies; each infer strategy owns five metric columns."""
    if not result.cells:
        raise ValueError("empty matrix result")
    top = ["train \\ infer"]
    sub = ["train"]
    for infer in result.infer_strategies:
        top += [infer] + [""] * (len(TABLE_COLUMNS) - 1)
        sub += list(TABLE_COLUMNS)
    top.append("best_infer")
    sub.append("")
    lines = [delimiter.join(top), delimiter.join(sub)]
    for train in result.train_strategies:
        row = [train]
        for infer in result.infer_strategies:
            c = result.cells[(train, infer)]
            if c.report is None:
                row += ["ERR"] * len(TABLE_COLUMNS)
            else:
                row += [pct(v) for v in c.report.metrics().values()]
        row.append(result.best_infer(train) or "")
        lines.append(delimiter.join(row))
    return "\n".join(lines) + "\n"


def report_json(result: MatrixResult) -> str:
    return json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"


def emit_report(
    result: MatrixResult,
    out_dir: str | Path,
    formats: Sequence[str] = ("json", "table"),
    *,
    predictions: bool = True,
) -> list[Path]:
    """Write report.json / report.tsv, the run manifest and per-cell predictions.

    Reports carry no timestamps, so identical runs give identical bytes; those
    live in manifest.json.
    """
    if not result.cells:
        raise ValueError("empty matrix result")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "json":
            p = out / "report.json"
            p.write_text(report_json(result), encoding="utf-8")
        elif fmt == "table":
            p = out / "report.tsv"
            p.write_text(render_table(result), encoding="utf-8")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(p)
    m = out / "manifest.json"
    m.write_text(json.dumps(result.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(m)
    if predictions:
        for (t, i), cell in result.cells.items():
            if cell.ok:
                p = out / "predictions" / f"{t}__{i}.jsonl"
                save_predictions(p, cell.predictions)
                written.append(p)
    return written
