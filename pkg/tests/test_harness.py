from __future__ import annotations

import json

import pytest

from promptgrid.backends import MockBackend
from promptgrid.harness import (
    EXIT_OK,
    EXIT_PARTIAL,
    EXIT_TOTAL,
    TABLE_COLUMNS,
    CellResult,
    ConfigError,
    MatrixResult,
    RunConfig,
    emit_report,
    load_inputs,
    render_table,
    report_json,
    run_inference,
    run_matrix,
)
from promptgrid.synthetic import write_synthetic
from promptgrid.types import MetricsReport


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    return write_synthetic(tmp_path_factory.mktemp("synth"), n_train=30, n_test=20)


@pytest.fixture(scope="module")
def config(synth) -> RunConfig:
    return RunConfig.load(synth)


@pytest.fixture(scope="module")
def result(config) -> MatrixResult:
    return run_matrix(config)


def test_grid_shape_and_success(result):
    assert result.train_strategies == ("zero_shot", "fixed_3_shot", "definition")
    assert result.infer_strategies == ("zero_shot", "3_shot", "definition", "ppl")
    assert len(result.cells) == 12 and result.n_populated == 12
    assert result.exit_code() == EXIT_OK
    for cell in result.cells.values():
        assert len(cell.predictions) == 20
        r = cell.report
        assert abs(r.overall_acc - r.fmt_suc_ratio * r.fmt_suc_acc) <= 1e-12


def test_ppl_cells_never_fail_format(result):
    for t in result.train_strategies:
        assert result.cell(t, "ppl").report.fmt_suc_ratio == 1.0


def test_rerun_is_byte_identical(config, result, tmp_path):
    again = run_matrix(config)
    assert report_json(again) == report_json(result)
    assert render_table(again) == render_table(result)
    emit_report(result, tmp_path / "a")
    emit_report(again, tmp_path / "b")
    for name in ("report.json", "report.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["n_test"] == 20 and len(manifest["config_sha256"]) == 64
    assert set(manifest["cells"]) == {f"{t}|{i}" for t, i in result.cells}


def test_report_files(result, tmp_path):
    written = emit_report(result, tmp_path, ["json", "table"])
    names = {p.name for p in written}
    assert {"report.json", "report.tsv", "manifest.json", "zero_shot__ppl.jsonl"} <= names
    assert "started" not in (tmp_path / "report.json").read_text()
    with pytest.raises(ValueError):
        emit_report(result, tmp_path, ["xml"])


def test_table_layout(result):
    lines = render_table(result).splitlines()
    top, sub = lines[0].split("\t"), lines[1].split("\t")
    assert top[0] == "train \\ infer" and top[-1] == "best_infer"
    assert len(top) == len(sub) == 1 + 4 * len(TABLE_COLUMNS) + 1
    assert sub[1 : 1 + len(TABLE_COLUMNS)] == list(TABLE_COLUMNS)
    assert [ln.split("\t")[0] for ln in lines[2:]] == list(result.train_strategies)
    for ln in lines[2:]:
        assert ln.split("\t")[-1] in result.infer_strategies


def test_json_round_trip(result):
    back = MatrixResult.from_dict(json.loads(report_json(result)))
    assert back == result
    assert render_table(back) == render_table(result)


def _report(acc: float) -> MetricsReport:
    return MetricsReport(2, 2, round(2 * acc), 1.0, acc, acc, acc, acc)


def test_best_infer_ties_go_to_earlier_column():
    cells = {
        ("t", "a"): CellResult("t", "a", "m", _report(0.5)),
        ("t", "b"): CellResult("t", "b", "m", _report(0.5)),
        ("t", "c"): CellResult("t", "c", "m", error="boom"),
    }
    res = MatrixResult(("t",), ("a", "b", "c"), cells)
    assert res.best_infer("t") == "a"
    assert res.exit_code() == EXIT_PARTIAL
    assert "ERR" in render_table(res)
    failed = MatrixResult(("t",), ("c",), {("t", "c"): cells[("t", "c")]})
    assert failed.exit_code() == EXIT_TOTAL and failed.best_infer("t") is None


def test_failing_cell_is_contained(synth, tmp_path):
    cfg_path = write_synthetic(
        tmp_path, n_train=30, n_test=20, fail_on={"definition": "Sentiment category definitions:"}
    )
    res = run_matrix(RunConfig.load(cfg_path))
    failed = [k for k, c in res.cells.items() if not c.ok]
    assert failed == [("definition", "definition")]
    assert "TransportError" in res.cell("definition", "definition").error
    assert res.n_populated == 11 and res.exit_code() == EXIT_PARTIAL


def test_unreachable_http_row(config):
    spec = {"kind": "http", "base_url": "http://127.0.0.1:9", "model": "m", "max_retries": 0, "timeout": 2}
    cfg = config.with_overrides(backends={**config.backends, "definition": spec})
    res = run_matrix(cfg)
    assert res.n_populated == 8 and res.exit_code() == EXIT_PARTIAL
    assert all(not res.cell("definition", i).ok for i in res.infer_strategies)


def test_cell_parallelism_matches_serial(config, result):
    parallel = run_matrix(config.with_overrides(cell_parallelism=4))
    assert report_json(parallel) == report_json(result)


def test_run_inference_direct(config):
    inputs = load_inputs(config)
    mock = MockBackend.from_dict({"default_reply": "Category: joy"})
    preds = run_inference(config, inputs, mock, "numerical")
    assert len(preds) == 20 and not any(p.format_ok for p in preds)


@pytest.mark.parametrize(
    "patch",
    [
        {"train": "missing.jsonl"},
        {"train_strategies": []},
        {"train_strategies": ["bogus"]},
        {"train_strategies": ["ppl"]},
        {"infer_strategies": ["7_shot"]},
        {"templates": "nope"},
        {"parallelism": 0},
        {"backends": {}},
    ],
)
def test_config_errors(synth, patch):
    data = json.loads(synth.read_text()) | patch
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data, synth.parent).validate()


def test_config_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "list.json")


def test_unknown_keys_are_kept_as_extra(config):
    assert config.extra["pack"] == {"max_len": 512, "mode": "neat"}
    assert config.backend_spec("zero_shot")["kind"] == "mock"
