"""Comparative evaluation: randomized multi-system rounds, win/loss tables,
order-balanced pairwise comparisons and length statistics.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from bitmcts.errors import CacheMissError, EmptyTableError, ProviderError
from bitmcts.providers.base import JUDGE_DIMENSIONS, THEMATIC_EXPRESSION

log = logging.getLogger(__name__)

LENGTH_MODES = ("chars", "whitespace", "provider")


def dimensions_for(thematic: bool = False) -> tuple[str, ...]:
    return JUDGE_DIMENSIONS + ((THEMATIC_EXPRESSION,) if thematic else ())


@dataclass
class ComparisonRound:
    """One judge call. ``systems`` is the presentation order."""

    theme_id: str
    round_index: int
    systems: list[str]
    permutation: list[int]
    seed: int
    best: dict[str, str] = field(default_factory=dict)
    worst: dict[str, str] | None = None
    raw: str = ""
    valid: bool = True
    error: str | None = None

    def __post_init__(self) -> None:
        presented = set(self.systems)
        picks = list(self.best.values()) + list((self.worst or {}).values())
        if any(p not in presented for p in picks):
            raise ValueError("round picks a system that was not presented")

    def to_dict(self) -> dict[str, Any]:
        return {
            "theme_id": self.theme_id,
            "round_index": self.round_index,
            "systems": list(self.systems),
            "permutation": list(self.permutation),
            "seed": self.seed,
            "best": dict(self.best),
            "worst": dict(self.worst) if self.worst is not None else None,
            "raw": self.raw,
            "valid": self.valid,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ComparisonRound:
        return cls(**dict(data))


@dataclass
class WinRateTable:
    """Per-system, per-dimension rates as exact fractions."""

    systems: list[str]
    dimensions: list[str]
    win: dict[str, dict[str, Fraction]]
    loss: dict[str, dict[str, Fraction]] | None
    valid_rounds: int
    invalid_rounds: int

    def average(self, system: str, which: str = "win") -> Fraction:
        rates = (self.win if which == "win" else self.loss or {})[system]
        return sum(rates.values(), Fraction(0)) / len(self.dimensions)

    def rows(self, which: str = "win") -> list[list[Any]]:
        table = self.win if which == "win" else self.loss
        if table is None:
            raise ValueError("no worst picks were recorded")
        return [
            [s] + [table[s][d] for d in self.dimensions] + [self.average(s, which)]
            for s in self.systems
        ]


def _shuffled(rng: random.Random, n: int) -> list[int]:
    order = list(range(n))
    rng.shuffle(order)
    return order


def _judge_round(
    judge: Any,
    theme_id: str,
    round_index: int,
    systems: list[str],
    permutation: list[int],
    seed: int,
    texts: list[str],
    dimensions: Sequence[str],
) -> ComparisonRound:
    presented = [systems[i] for i in permutation]
    try:
        judgment = judge.judge_comparative(texts, list(dimensions))
    except CacheMissError:
        raise
    except ProviderError as exc:
        log.warning("round %d on %s invalidated: %s", round_index, theme_id, exc)
        return ComparisonRound(theme_id, round_index, presented, permutation, seed,
                               valid=False, error=str(exc))
    best = {d: presented[judgment.best[d]] for d in dimensions}
    worst = {d: presented[judgment.worst[d]] for d in dimensions} if judgment.worst else None
    return ComparisonRound(theme_id, round_index, presented, permutation, seed, best, worst, judgment.raw)


def run_comparative(
    fictions: Mapping[str, Mapping[str, str]],
    judge: Any,
    rounds: int = 4,
    seed: int = 0,
    dimensions: Sequence[str] = JUDGE_DIMENSIONS,
) -> list[ComparisonRound]:
    """Judge every theme ``rounds`` times, each under a fresh random system order.

    ``fictions`` maps theme id to {system id: fiction text}. Permutations come
    from a generator seeded by (seed, theme id), so transcripts replay exactly.
    """
    out = []
    for theme_id in sorted(fictions):
        by_system = fictions[theme_id]
        systems = sorted(by_system)
        if len(systems) < 2:
            raise ValueError(f"theme {theme_id!r} has fewer than two systems")
        rng = random.Random(f"{seed}:{theme_id}")
        for r in range(rounds):
            perm = _shuffled(rng, len(systems))
            texts = [by_system[systems[i]] for i in perm]
            out.append(_judge_round(judge, theme_id, r, systems, perm, seed, texts, dimensions))
    return out


def aggregate_win_rates(
    rounds: Iterable[ComparisonRound], dimensions: Sequence[str] | None = None
) -> WinRateTable:
    """Win rate = times picked best / valid rounds, pooled over themes.

    Loss rates use worst picks and are reported only when every valid round
    has them.
    """
    rounds = list(rounds)
    valid = [r for r in rounds if r.valid]
    if not valid:
        raise EmptyTableError(f"no valid rounds to aggregate ({len(rounds)} invalid)")
    dims = list(dimensions) if dimensions else list(valid[0].best)
    systems = sorted({s for r in valid for s in r.systems})
    total = len(valid)
    wins = {s: {d: 0 for d in dims} for s in systems}
    for r in valid:
        for d in dims:
            wins[r.best[d]][d] += 1
    win = {s: {d: Fraction(wins[s][d], total) for d in dims} for s in systems}
    loss = None
    if all(r.worst is not None for r in valid):
        losses = {s: {d: 0 for d in dims} for s in systems}
        for r in valid:
            for d in dims:
                losses[r.worst[d]][d] += 1  # type: ignore[index]
        loss = {s: {d: Fraction(losses[s][d], total) for d in dims} for s in systems}
    return WinRateTable(systems, dims, win, loss, total, len(rounds) - total)


@dataclass
class PairwiseResult:
    systems: tuple[str, str]
    win_rate: dict[str, Fraction]
    order_counts: dict[str, int]
    rounds: list[ComparisonRound]

    @property
    def average(self) -> Fraction:
        return sum(self.win_rate.values(), Fraction(0)) / len(self.win_rate)


def run_pairwise(
    a: Mapping[str, str],
    b: Mapping[str, str],
    judge: Any,
    repetitions: int = 4,
    seed: int = 0,
    names: tuple[str, str] = ("a", "b"),
    dimensions: Sequence[str] = JUDGE_DIMENSIONS,
) -> PairwiseResult:
    """Per theme, half the comparisons show (a, b) and half (b, a).

    The win rate is system ``a``'s share of valid comparisons per dimension.
    """
    if repetitions < 2 or repetitions % 2:
        raise ValueError("repetitions must be a positive even number")
    themes = sorted(set(a) & set(b))
    if not themes:
        raise ValueError("no theme is covered by both systems")
    name_a, name_b = names
    rounds = []
    counts = {f"{name_a},{name_b}": 0, f"{name_b},{name_a}": 0}
    for theme_id in themes:
        rng = random.Random(f"{seed}:pair:{theme_id}")
        orders = [[0, 1]] * (repetitions // 2) + [[1, 0]] * (repetitions // 2)
        rng.shuffle(orders)
        for r, perm in enumerate(orders):
            pair = [name_a, name_b]
            texts = [(a[theme_id], b[theme_id])[i] for i in perm]
            rounds.append(_judge_round(judge, theme_id, r, pair, list(perm), seed, texts, dimensions))
            counts[",".join(pair[i] for i in perm)] += 1
    valid = [r for r in rounds if r.valid]
    if not valid:
        raise EmptyTableError("every pairwise comparison was invalid")
    rate = {d: Fraction(sum(r.best[d] == name_a for r in valid), len(valid)) for d in dimensions}
    return PairwiseResult((name_a, name_b), rate, counts, rounds)


def text_length(text: str, mode: str = "chars") -> int:
    if mode == "chars":
        return len(text)
    if mode == "whitespace":
        return len(text.split())
    raise ValueError(f"length mode {mode!r} needs provider usage, not text")


def length_stats(
    fictions: Mapping[str, Sequence[Any]], mode: str = "chars"
) -> dict[str, float]:
    """Mean length per system.

    ``chars`` counts unicode code points, ``whitespace`` counts
    whitespace-separated tokens; ``provider`` expects each entry to already be
    the provider-reported completion token count.
    """
    if mode not in LENGTH_MODES:
        raise ValueError(f"unknown length mode {mode!r}")
    stats = {}
    for system, items in sorted(fictions.items()):
        if mode == "provider":
            counts = [int(x) for x in items]
        else:
            counts = [text_length(x, mode) for x in items]
        stats[system] = sum(counts) / len(counts) if counts else 0.0
    return stats


# -- IO ------------------------------------------------------------------------


def _pct(rate: Fraction) -> str:
    return f"{float(rate) * 100:.2f}"


def table_csv(table: WinRateTable, which: str = "win") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["system"] + table.dimensions + ["average"])
    for row in table.rows(which):
        writer.writerow([row[0]] + [_pct(v) for v in row[1:]])
    return buf.getvalue()


def table_markdown(table: WinRateTable, which: str = "win") -> str:
    header = ["system"] + table.dimensions + ["average"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in table.rows(which):
        lines.append("| " + " | ".join([row[0]] + [_pct(v) for v in row[1:]]) + " |")
    return "\n".join(lines) + "\n"


def write_rounds_jsonl(rounds: Iterable[ComparisonRound], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rounds:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_rounds_jsonl(path: str | Path) -> list[ComparisonRound]:
    with open(path, encoding="utf-8") as fh:
        return [ComparisonRound.from_dict(json.loads(line)) for line in fh if line.strip()]


def load_fictions(root: str | Path) -> tuple[dict[str, dict[str, str]], dict[str, list[int]]]:
    """Read ``<root>/<system>/<run>/fiction.md`` trees written by the pipeline.

    Returns {theme id: {system: text}} and, for the provider length mode,
    {system: [completion tokens per run]}.
    """
    fictions: dict[str, dict[str, str]] = {}
    tokens: dict[str, list[int]] = {}
    for system_dir in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        for run_json in sorted(system_dir.glob("*/run.json")):
            run_dir = run_json.parent
            fiction = run_dir / "fiction.md"
            if not fiction.exists():
                continue
            theme_id = json.loads(run_json.read_text(encoding="utf-8"))["theme"]["id"]
            fictions.setdefault(theme_id, {})[system_dir.name] = fiction.read_text(encoding="utf-8")
            metrics = run_dir / "metrics.json"
            if metrics.exists():
                usage = json.loads(metrics.read_text(encoding="utf-8")).get("token_usage", {})
                tokens.setdefault(system_dir.name, []).append(int(usage.get("completion_tokens", 0)))
    return fictions, tokens
