"""Command-line entry point: ``promptgrid <subcommand> --config run.json [overrides]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .backends import BackendError, build_backend
from .corpus import (
    build_reasoning_corpus,
    build_sft_corpus,
    load_records,
    load_triples,
    pack,
    relabel_uncertain,
    save_packs,
    save_records,
)
from .harness import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_PARTIAL,
    EXIT_TOTAL,
    ConfigError,
    RunConfig,
    emit_report,
    load_inputs,
    render_table,
    run_inference,
    run_matrix,
)
from .metrics import evaluate, pct
from .prompts import REASONING_ORDERS
from .rewards import MatchConfig
from .types import load_predictions, save_dataset, save_predictions

log = logging.getLogger("promptgrid")


def _csv(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config)
    return cfg.with_overrides(
        train_strategies=getattr(args, "train_strategies", None),
        infer_strategies=getattr(args, "infer_strategies", None),
        seed=getattr(args, "seed", None),
        parallelism=getattr(args, "parallelism", None),
        output_dir=Path(args.out) if getattr(args, "out", None) else None,
    )


def _write_json(path: Path, data: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_build_data(args: argparse.Namespace) -> int:
    cfg = _config(args)
    inputs = load_inputs(cfg)
    out = cfg.output_dir / "sft"
    for name in cfg.train_strategies:
        records = build_sft_corpus(
            inputs.train,
            inputs.schema,
            name,
            cfg.seed,
            inputs.templates,
            fixed_ids=cfg.fixed_shot_ids,
            store=inputs.embeddings,
        )
        path = out / f"{records[0].strategy.name if records else name}.jsonl"
        save_records(path, records)
        print(f"{name}: {len(records)} records -> {path}")
    triples_path = cfg.extra.get("reason_triples")
    if triples_path:
        triples = load_triples(cfg.base_dir / triples_path)
        for order in cfg.extra.get("reasoning_orders", REASONING_ORDERS):
            records = build_reasoning_corpus(
                triples, order, inputs.schema, inputs.train, inputs.templates, seed=cfg.seed
            )
            path = cfg.output_dir / "reasoning" / f"{order}.jsonl"
            save_records(path, records)
            print(f"{order}: {len(records)} records -> {path}")
    return EXIT_OK


def cmd_relabel(args: argparse.Namespace) -> int:
    cfg = _config(args)
    inputs = load_inputs(cfg)
    spec = cfg.extra.get("relabel") or {}
    try:
        m1 = load_predictions(cfg.base_dir / spec["m1_predictions"])
        m2 = load_predictions(cfg.base_dir / spec["m2_predictions"])
    except KeyError as exc:
        raise ConfigError(f"relabel section needs {exc}") from exc
    cap = float(spec.get("cap_fraction", 0.10))
    relabeled, report = relabel_uncertain(
        inputs.train, m1, m2, inputs.schema, cap, case_fold=cfg.case_fold
    )
    save_dataset(cfg.output_dir / "train_relabeled.jsonl", relabeled)
    _write_json(cfg.output_dir / "relabel_report.json", report.to_dict())
    print(f"qualified {report.n_qualified}, relabeled {report.n_relabeled} (cap {report.cap})")
    return EXIT_OK


def cmd_pack(args: argparse.Namespace) -> int:
    cfg = _config(args)
    spec = cfg.extra.get("pack") or {}
    max_len = args.max_len or spec.get("max_len")
    if not max_len:
        raise ConfigError("pack needs max_len (config 'pack.max_len' or --max-len)")
    mode = args.mode or spec.get("mode", "neat")
    records = load_records(args.input)
    packs = pack(records, int(max_len), mode)
    path = cfg.output_dir / f"{Path(args.input).stem}.packs.jsonl"
    save_packs(path, packs)
    print(f"{len(records)} records -> {len(packs)} packs ({mode}, max_len {max_len}) -> {path}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _config(args).validate()
    inputs = load_inputs(cfg)
    failures = 0
    for train in cfg.train_strategies:
        backend = build_backend(cfg.backend_spec(train), cfg.base_dir)
        for infer in cfg.infer_strategies:
            try:
                preds = run_inference(cfg, inputs, backend, infer)
            except BackendError as exc:
                failures += 1
                print(f"{train} x {infer}: FAILED {exc}", file=sys.stderr)
                continue
            path = cfg.output_dir / "predictions" / f"{train}__{infer}.jsonl"
            save_predictions(path, preds)
            print(f"{train} x {infer}: {len(preds)} predictions -> {path}")
    total = len(cfg.train_strategies) * len(cfg.infer_strategies)
    if failures:
        return EXIT_TOTAL if failures == total else EXIT_PARTIAL
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    inputs = load_inputs(cfg)
    preds = load_predictions(args.predictions)
    report = evaluate(preds, inputs.test, inputs.schema, case_fold=cfg.case_fold)
    data = report.to_dict()
    if args.out:
        _write_json(Path(args.out) / "metrics.json", data)
    if args.format == "table":
        for name, value in report.metrics().items():
            print(f"{name}\t{pct(value)}")
    else:
        print(json.dumps(data, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_matrix(args: argparse.Namespace) -> int:
    cfg = _config(args)
    result = run_matrix(cfg)
    formats = ["json", "table"] if args.format == "both" else [args.format]
    emit_report(result, cfg.output_dir, formats)
    print(render_table(result), end="")
    print(
        f"{result.n_populated} populated, {result.n_failed} failed -> {cfg.output_dir}",
        file=sys.stderr,
    )
    return result.exit_code()


def cmd_reward_serve(args: argparse.Namespace) -> int:
    from .reward_server import serve  # keeps uvicorn off the import path of other commands
    from .types import load_schema

    spec: dict = {}
    schema = None
    if args.config:
        # reward-only configs need not carry dataset paths, so read the raw JSON
        path = Path(args.config)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        spec = dict(data.get("reward_server") or {})
        if data.get("schema"):
            schema = load_schema(path.parent / data["schema"])
    match = MatchConfig(
        case_fold=bool(spec.get("case_fold", False)),
        accept_category_prefix=bool(spec.get("accept_category_prefix", True)),
    )
    host = args.host or spec.get("host", "127.0.0.1")
    port = args.port if args.port is not None else int(spec.get("port", 8000))
    serve(host, port, schema, match)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptgrid", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="run config (JSON)")
        p.add_argument("--train-strategies", type=_csv, help="comma-separated override")
        p.add_argument("--infer-strategies", type=_csv, help="comma-separated override")
        p.add_argument("--seed", type=int)
        p.add_argument("--parallelism", type=int)
        p.add_argument("--out", help="output directory override")

    p = sub.add_parser("build-data", help="emit SFT corpora per train strategy")
    common(p)
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("relabel-uncertain", help="relabel examples both models miss")
    common(p)
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("pack", help="pack an SFT corpus into fixed-length sequences")
    common(p)
    p.add_argument("--input", required=True, help="SFT corpus JSONL")
    p.add_argument("--max-len", type=int)
    p.add_argument("--mode", choices=("standard", "neat"))
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("infer", help="write predictions for each train x infer pair")
    common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score a prediction log against the test split")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("matrix", help="run the full strategy grid and write reports")
    common(p)
    p.add_argument("--format", choices=("json", "table", "both"), default="both")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("reward-serve", help="serve the reward functions over HTTP")
    common(p, config_required=False)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_reward_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
