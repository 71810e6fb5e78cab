from __future__ import annotations

import json
import shutil
import subprocess
import sys

import pytest

from promptgrid.cli import build_parser, main
from promptgrid.corpus import load_packs, load_records
from promptgrid.synthetic import write_synthetic
from promptgrid.types import load_dataset, load_predictions


@pytest.fixture
def synth(tmp_path):
    return write_synthetic(tmp_path, n_train=30, n_test=20)


def test_build_data_and_pack(synth, capsys):
    assert main(["build-data", "--config", str(synth), "--train-strategies", "zero_shot,3_shot"]) == 0
    sft = synth.parent / "out" / "sft"
    assert sorted(p.name for p in sft.iterdir()) == ["3_shot.jsonl", "zero_shot.jsonl"]
    records = load_records(sft / "zero_shot.jsonl")
    assert len(records) == 30
    assert main(["pack", "--config", str(synth), "--input", str(sft / "zero_shot.jsonl")]) == 0
    packs = load_packs(synth.parent / "out" / "zero_shot.packs.jsonl")
    assert sum(len(p.segments) for p in packs) == 30
    assert "records ->" in capsys.readouterr().out


def test_reasoning_corpora_from_config(synth):
    triples = synth.parent / "triples.jsonl"
    triples.write_text(json.dumps({"example_id": "r000", "reason": "sad words", "class": "sadness", "think": "t"}) + "\n")
    data = json.loads(synth.read_text()) | {"reason_triples": "triples.jsonl"}
    synth.write_text(json.dumps(data))
    assert main(["build-data", "--config", str(synth), "--train-strategies", "zero_shot"]) == 0
    names = sorted(p.name for p in (synth.parent / "out" / "reasoning").iterdir())
    assert names == ["class_then_reason.jsonl", "reason_then_class.jsonl", "think_reason_class.jsonl"]


def test_infer_then_evaluate(synth, capsys):
    out = synth.parent / "run"
    args = ["--config", str(synth), "--train-strategies", "zero_shot", "--infer-strategies", "ppl"]
    assert main(["infer", *args, "--out", str(out)]) == 0
    preds = out / "predictions" / "zero_shot__ppl.jsonl"
    assert len(load_predictions(preds)) == 20
    capsys.readouterr()
    assert main(["evaluate", "--config", str(synth), "--predictions", str(preds), "--format", "table"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split("\t")[0] for ln in lines][0] == "fmt_suc_ratio"
    assert lines[0].split("\t")[1] == "100.00"


def test_matrix_exit_codes(tmp_path, capsys):
    ok = write_synthetic(tmp_path / "ok", n_train=20, n_test=10)
    assert main(["matrix", "--config", str(ok)]) == 0
    assert (ok.parent / "out" / "report.tsv").is_file()
    partial = write_synthetic(
        tmp_path / "partial", n_train=20, n_test=10, fail_on={"definition": "Sentiment category definitions:"}
    )
    assert main(["matrix", "--config", str(partial), "--format", "json"]) == 3
    total = write_synthetic(tmp_path / "total", n_train=20, n_test=10, fail_on={"zero_shot": "Text:"})
    code = main(["matrix", "--config", str(total), "--train-strategies", "zero_shot", "--infer-strategies", "zero_shot"])
    assert code == 4
    assert "populated" in capsys.readouterr().err


def test_relabel_command(synth, tmp_path):
    train = load_dataset(synth.parent / "train.jsonl", split="train")
    rows = [
        {"example_id": ex.id, "raw_output": "??", "format_ok": False, "parsed_label": None, "confidence": -float(k)}
        for k, ex in enumerate(train.examples)
    ]
    for name in ("m1.jsonl", "m2.jsonl"):
        (synth.parent / name).write_text("".join(json.dumps(r) + "\n" for r in rows))
    data = json.loads(synth.read_text()) | {"relabel": {"m1_predictions": "m1.jsonl", "m2_predictions": "m2.jsonl"}}
    synth.write_text(json.dumps(data))
    assert main(["relabel-uncertain", "--config", str(synth)]) == 0
    report = json.loads((synth.parent / "out" / "relabel_report.json").read_text())
    assert report["n_qualified"] == 30 and report["n_relabeled"] == 3
    # lowest confidence first: the last three examples
    assert report["relabeled_ids"] == ["r027", "r028", "r029"]


@pytest.mark.parametrize(
    "patch",
    [{"train": "absent.jsonl"}, {"infer_strategies": ["bogus"]}, {"backends": {}}],
)
def test_config_errors_exit_2(synth, patch):
    data = json.loads(synth.read_text()) | patch
    synth.write_text(json.dumps(data))
    assert main(["matrix", "--config", str(synth)]) == 2


def test_missing_config_exits_2(tmp_path):
    assert main(["matrix", "--config", str(tmp_path / "none.json")]) == 2
    assert main(["build-data", "--config", str(tmp_path / "none.json")]) == 2


def test_pack_needs_max_len(synth):
    data = json.loads(synth.read_text())
    del data["pack"]
    synth.write_text(json.dumps(data))
    assert main(["pack", "--config", str(synth), "--input", "x.jsonl"]) == 2


def test_parser_lists_every_subcommand():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {
        "build-data", "relabel-uncertain", "pack", "infer", "evaluate", "matrix", "reward-serve"
    }


@pytest.mark.skipif(shutil.which("promptgrid") is None, reason="console script not installed")
def test_console_script_help():
    out = subprocess.run(["promptgrid", "--help"], capture_output=True, text=True, check=True)
    assert "matrix" in out.stdout


def test_module_entry_point(synth):
    proc = subprocess.run(
        [sys.executable, "-m", "promptgrid.cli", "matrix", "--config", str(synth), "--format", "table"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("train \\ infer")
