"""Seeded synthetic datasets and scripted mock backends for demos and tests."""

from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Any, Sequence

from .types import Dataset, Example, LabelSchema, save_dataset, save_schema

EMOTIONS = ("sadness", "joy", "love", "anger", "fear", "surprise")

# short hand-written glosses; real runs ingest definitions as data
_GLOSSES = {
    "sadness": "low mood, loss or disappointment",
    "joy": "happiness, delight or contentment",
    "love": "affection, warmth or attachment to someone",
    "anger": "irritation, hostility or outrage",
    "fear": "worry, anxiety or a sense of threat",
    "surprise": "astonishment at something unexpected",
}
_FILLER = ("today", "honestly", "after work", "this morning", "again", "for a while")


def emotion_schema() -> LabelSchema:
    return LabelSchema(EMOTIONS, dict(_GLOSSES), "uncertain")


def make_dataset(name: str, split: str, n: int, seed: int, prefix: str) -> Dataset:
    rng = random.Random(seed)
    examples = []
    for i in range(n):
        gold = EMOTIONS[i % len(EMOTIONS)] if i < len(EMOTIONS) else rng.choice(EMOTIONS)
        text = f"{prefix}{i:03d}: i feel {gold} {rng.choice(_FILLER)}"
        examples.append(Example(f"{prefix}{i:03d}", {"text": text}, gold))
    return Dataset(name, split, tuple(examples), "emotion")


def make_embeddings(datasets: Sequence[Dataset], dim: int, seed: int) -> list[dict[str, Any]]:
    """Label centroid plus gaussian noise, so retrieval favours same-label shots."""
    rng = random.Random(seed)
    centroids = {label: [rng.gauss(0, 1) for _ in range(dim)] for label in EMOTIONS}
    rows = []
    for ds in datasets:
        for ex in ds.examples:
            base = centroids[ex.gold]
            rows.append({"id": ex.id, "vector": [x + rng.gauss(0, 0.5) for x in base]})
    return rows


def mock_script(
    test: Dataset, seed: int, accuracy: float, format_fail: float, fail_on: str | None = None
) -> dict[str, Any]:
    """One rule per test example keyed on its unique text prefix.

    Each reply slot is correct with probability ``accuracy``, free text (a
    format failure) with probability ``format_fail``, otherwise a wrong label.
    The mock picks a slot by hashing the prompt, so strategies diverge.
    ``fail_on`` adds a leading rule that raises a transport error for any
    prompt containing that text.
    """
    rng = random.Random(seed)
    rules: list[dict[str, Any]] = []
    if fail_on:
        rules.append({"if_contains": fail_on, "raise": "transport"})
    for ex in test.examples:
        key = ex.slots["text"].split(":")[0] + ":"
        wrong = rng.choice([e for e in EMOTIONS if e != ex.gold])
        outcomes = (
            f"Category: {ex.gold}",
            f"I think this one is {ex.gold}.",
            f"Category: {wrong}",
        )

        def draw() -> str:
            u = rng.random()
            return outcomes[0] if u < accuracy else outcomes[1 if u < accuracy + format_fail else 2]

        reply = [draw(), draw(), draw()]
        favoured = ex.gold if rng.random() < accuracy else wrong
        logprobs = {
            label: [round(-0.1 - rng.random(), 6) if label == favoured else round(-2 - rng.random(), 6)]
            for label in EMOTIONS
        }
        rules.append({"if_contains": f"Text: {key}", "reply": reply, "logprobs": logprobs})
    return {"rules": rules, "default_reply": "no idea", "vocab_size": 6}


def write_synthetic(
    out_dir: str | Path,
    *,
    n_train: int = 60,
    n_test: int = 50,
    seed: int = 0,
    dim: int = 8,
    train_strategies: Sequence[str] = ("zero_shot", "fixed_3_shot", "definition"),
    infer_strategies: Sequence[str] = ("zero_shot", "3_shot", "definition", "ppl"),
    fail_on: dict[str, str] | None = None,
) -> Path:
    """Write a complete synthetic run directory and return its config path.

    ``fail_on`` maps a train strategy to a prompt substring that makes its
    backend raise, which fails exactly the cells whose prompts contain it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = make_dataset("synthetic", "train", n_train, seed, "r")
    test = make_dataset("synthetic", "test", n_test, seed + 1, "t")
    save_schema(out / "schema.json", emotion_schema())
    save_dataset(out / "train.jsonl", train)
    save_dataset(out / "test.jsonl", test)
    with open(out / "embeddings.jsonl", "w", encoding="utf-8") as fh:
        for row in make_embeddings([train, test], dim, seed + 2):
            fh.write(json.dumps(row) + "\n")

    backends = {}
    for k, name in enumerate(train_strategies):
        # later train strategies get slightly better scripted models
        acc = min(0.95, 0.55 + 0.1 * k)
        script = mock_script(test, seed + 10 + k, acc, 0.1, (fail_on or {}).get(name))
        fname = f"mock_{name}.json"
        (out / fname).write_text(json.dumps(script, indent=1) + "\n", encoding="utf-8")
        backends[name] = {"kind": "mock", "script": fname, "name": f"mock-{name}"}

    config = {
        "schema": "schema.json",
        "train": "train.jsonl",
        "test": "test.jsonl",
        "embeddings": "embeddings.jsonl",
        "templates": "ec",
        "train_strategies": list(train_strategies),
        "infer_strategies": list(infer_strategies),
        "backends": backends,
        "seed": seed,
        "parallelism": 4,
        "output_dir": "out",
        "pack": {"max_len": 512, "mode": "neat"},
        "reward_server": {"host": "127.0.0.1", "port": 8000},
    }
    path = out / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return path

