"""Rule-based rewards for RL rollouts, in reasoning and direct-answer modes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

from .inference import parse_tagged
from .prompts import CATEGORY_PREFIX
from .types import LabelSchema, normalize_label

MODES = ("reasoning", "direct")


@dataclass(frozen=True)
class MatchConfig:
    """How a predicted answer is compared with the gold label.

    Both sides are whitespace-trimmed. ``accept_category_prefix`` lets a direct
    answer be written as ``Category: <label>`` as well as the bare label.
    """

    case_fold: bool = False
    accept_category_prefix: bool = True

    def same(self, predicted: str, gold: str) -> bool:
        return normalize_label(predicted, self.case_fold) == normalize_label(gold, self.case_fold)


@dataclass(frozen=True)
class RewardBreakdown:
    format_reward: int
    accuracy_reward: int
    total: int

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    def to_json(self) -> str:
        # canonical wire form, shared with the HTTP service
        return json.dumps(self.to_dict(), separators=(",", ":"))


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"reward mode must be one of {MODES}, got {mode!r}")


def format_reward(response: str, mode: str) -> int:
    _check_mode(mode)
    if mode == "direct":
        return 1
    return int(parse_tagged(response) is not None)


def accuracy_reward(
    response: str,
    gold: str,
    mode: str,
    schema: LabelSchema | None = None,
    match: MatchConfig = MatchConfig(),
) -> int:
    _check_mode(mode)
    if schema is not None and schema.lookup(gold, match.case_fold) is None:
        raise ValueError(f"gold label {gold!r} is not in the schema")
    if mode == "reasoning":
        parsed = parse_tagged(response)
        return int(parsed is not None and match.same(parsed.answer, gold))
    answer = response.strip()
    if match.same(answer, gold):
        return 1
    if match.accept_category_prefix and answer.startswith(CATEGORY_PREFIX):
        return int(match.same(answer[len(CATEGORY_PREFIX):], gold))
    return 0


def total_reward(
    response: str,
    gold: str,
    mode: str,
    schema: LabelSchema | None = None,
    match: MatchConfig = MatchConfig(),
) -> RewardBreakdown:
    fmt = format_reward(response, mode)
    acc = accuracy_reward(response, gold, mode, schema, match)
    # direct mode has no format term in the total
    total = fmt + acc if mode == "reasoning" else acc
    return RewardBreakdown(fmt, acc, total)


def score_batch(
    items: Iterable[Mapping[str, str]],
    schema: LabelSchema | None = None,
    match: MatchConfig = MatchConfig(),
) -> list[RewardBreakdown]:
    return [
        total_reward(it["response"], it["gold"], it["mode"], schema, match) for it in items
    ]
