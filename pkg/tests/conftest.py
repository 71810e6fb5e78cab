from __future__ import annotations

from pathlib import Path

import pytest

from promptgrid.prompts import load_templates
from promptgrid.types import LabelSchema, load_dataset, load_schema

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
GOLDEN = HERE / "golden" / "ec"

EC_LABELS = ("sadness", "joy", "love", "anger", "fear", "surprise")


@pytest.fixture(scope="session")
def ec_schema() -> LabelSchema:
    return load_schema(FIXTURES / "ec_schema.json")


@pytest.fixture(scope="session")
def ec_examples():
    return load_dataset(FIXTURES / "ec_cases.jsonl", split="train").by_id()


@pytest.fixture(scope="session")
def ec_templates():
    return load_templates("ec")


@pytest.fixture(scope="session")
def ab_schema() -> LabelSchema:
    return LabelSchema(("A", "B"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
