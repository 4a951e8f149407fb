"""Parsers that turn raw model output into structured values.

Every parser raises ``ProviderParseError`` on malformed input so callers can
retry with a fresh sample.
"""

from __future__ import annotations

import difflib
import json
import logging
import re
from typing import Any, Mapping, Sequence

from bitmcts.errors import ProviderParseError
from bitmcts.providers.base import SCORE_DIMENSIONS, DirectOutline, EditOp, Judgment

log = logging.getLogger(__name__)


def extract_json(text: str) -> Any:
    """Parse the outermost balanced ``{...}`` object embedded in ``text``.

    Braces inside JSON strings are skipped. Code fences and surrounding
    prose are ignored.
    """
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escape = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escape:
                    escape = False
                elif ch == "\\":
                    escape = True
                elif ch == '"':
                    in_string = False
            elif ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        return json.loads(text[start : i + 1])
                    except json.JSONDecodeError:
                        break
        start = text.find("{", start + 1)
    raise ProviderParseError("no JSON object found in response")


def _clean(value: Any) -> str | None:
    if isinstance(value, str) and value.strip():
        return value.strip()
    return None


def parse_event_list(text: str, k: int) -> list[str]:
    """``{"events": [...]}`` -> first ``k`` non-empty texts."""
    data = extract_json(text)
    events = data.get("events") if isinstance(data, dict) else None
    if not isinstance(events, list):
        raise ProviderParseError('expected {"events": [...]}')
    texts = [t for t in (_clean(e) for e in events) if t is not None]
    if not texts:
        raise ProviderParseError("no usable events in response")
    return texts[:k]


def parse_single_plot(text: str) -> str:
    """``{"plot": "..."}`` -> the plot text."""
    data = extract_json(text)
    plot = _clean(data.get("plot")) if isinstance(data, dict) else None
    if plot is None:
        raise ProviderParseError('expected {"plot": "..."}')
    return plot


def _ordinal_key(key: str) -> tuple[int, str]:
    match = re.search(r"(\d+)\s*$", key)
    return (int(match.group(1)) if match else 10**6, key)


def parse_numbered_options(text: str, expected: int = 5) -> list[str]:
    """``{"plot1": ..., "plot2": ...}`` (any key prefix) -> ordered option list.

    Malformed entries are dropped with a warning; at least one must survive.
    """
    data = extract_json(text)
    if not isinstance(data, dict):
        raise ProviderParseError("expected a JSON object of options")
    if len(data) == 1:
        only = next(iter(data.values()))
        if isinstance(only, list):
            data = {str(i + 1): v for i, v in enumerate(only)}
    options = []
    for key in sorted(data, key=_ordinal_key):
        value = _clean(data[key])
        if value is None:
            log.warning("dropping malformed option %r", key)
            continue
        options.append(value)
    if not options:
        raise ProviderParseError("no usable options in response")
    if len(options) != expected:
        log.warning("expected %d options, parsed %d", expected, len(options))
    return options


_CHOICE_LABELS = ("plot", "conflict", "climax", "idea", "option", "candidate", "fiction", "text")


def resolve_choice(value: Any, candidates: Sequence[str], label: str = "plot") -> int:
    """Map a model's pick onto a candidate index.

    Accepts 1-based integers, labels such as ``plot3`` or ``Fiction 2``, or
    (a fragment of) the candidate text itself: exact match first, then the
    candidate sharing the longest common substring.
    """
    n = len(candidates)
    if isinstance(value, bool):
        raise ProviderParseError(f"unresolvable choice {value!r}")
    if isinstance(value, int):
        if 1 <= value <= n:
            return value - 1
        raise ProviderParseError(f"choice {value} outside 1..{n}")
    if not isinstance(value, str) or not value.strip():
        raise ProviderParseError(f"unresolvable choice {value!r}")
    stripped = value.strip()
    labels = "|".join(sorted({re.escape(label), *_CHOICE_LABELS}, key=len, reverse=True))
    match = re.fullmatch(rf"(?:{labels})?\s*#?\s*(\d+)", stripped, re.I)
    if match:
        idx = int(match.group(1))
        if 1 <= idx <= n:
            return idx - 1
        raise ProviderParseError(f"choice {stripped!r} outside 1..{n}")
    norm = " ".join(stripped.split())
    for i, cand in enumerate(candidates):
        if " ".join(cand.split()) == norm:
            return i
    best, best_len = -1, 0
    for i, cand in enumerate(candidates):
        matcher = difflib.SequenceMatcher(None, norm, cand, autojunk=False)
        size = matcher.find_longest_match(0, len(norm), 0, len(cand)).size
        if size > best_len:
            best, best_len = i, size
    if best < 0 or best_len < min(8, len(norm)):
        raise ProviderParseError(f"could not resolve choice {stripped[:40]!r}")
    return best


def parse_best(text: str, candidates: Sequence[str]) -> int:
    data = extract_json(text)
    if not isinstance(data, dict) or "best" not in data:
        raise ProviderParseError('expected {"best": ...}')
    return resolve_choice(data["best"], candidates)


_DIMENSION_ALIASES: dict[str, str] = {
    "character": "character_development",
    "characters": "character_development",
    "character_development": "character_development",
    "setting": "setting",
    "setting_description": "setting",
    "consistency": "consistency",
    "relatedness": "relatedness",
    "causal_and_temporal_relationship": "causal_temporal",
    "causal_temporal_relationship": "causal_temporal",
    "causal_temporal": "causal_temporal",
    "causal_and_temporal": "causal_temporal",
    "theme": "theme",
    "theme_exploration": "theme",
    "readability": "readability",
    "readible": "readability",
    "readable": "readability",
    "creativity": "creativity",
    "identifying_major_flaws": "major_flaws",
    "identification_of_major_flaws": "major_flaws",
    "major_flaws": "major_flaws",
    "overall_quality": "overall_quality",
    "overall": "overall_quality",
}


def canonical_dimension(key: str) -> str | None:
    slug = re.sub(r"[^a-z0-9]+", "_", key.casefold()).strip("_")
    slug = re.sub(r"^\d+_", "", slug)
    return _DIMENSION_ALIASES.get(slug)


def parse_scores(text: str) -> dict[str, int]:
    """Evaluator output -> the ten canonical dimensions, clamped to [1, 10]."""
    data = extract_json(text)
    if isinstance(data, dict) and len(data) == 1 and isinstance(next(iter(data.values())), dict):
        data = next(iter(data.values()))
    if not isinstance(data, dict):
        raise ProviderParseError("expected a JSON object of scores")
    scores: dict[str, int] = {}
    for key, value in data.items():
        dim = canonical_dimension(str(key))
        if dim is None:
            continue
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise ProviderParseError(f"non-numeric score for {key!r}") from None
        scores[dim] = min(10, max(1, round(number)))
    missing = [d for d in SCORE_DIMENSIONS if d not in scores]
    if missing:
        raise ProviderParseError(f"missing dimensions {missing}")
    return scores


def _resolve_pick(value: Any, n: int) -> int:
    if isinstance(value, list):
        if len(value) != 1:
            raise ProviderParseError("multiple picks for one dimension")
        value = value[0]
    return resolve_choice(value, [""] * n, label="fiction")


def parse_judgment(text: str, n: int, dimensions: Sequence[str]) -> Judgment:
    """``{"best": {dim: label}, "worst": {dim: label}}`` -> index picks.

    A flat ``{dim: label}`` object is read as best picks only.
    """
    data = extract_json(text)
    if not isinstance(data, dict):
        raise ProviderParseError("expected a JSON object")
    best_raw = data.get("best", data)
    worst_raw = data.get("worst")
    if not isinstance(best_raw, dict):
        raise ProviderParseError("expected per-dimension best picks")

    def picks(raw: Mapping[str, Any]) -> dict[str, int]:
        norm = {re.sub(r"[^a-z0-9]+", "_", str(k).casefold()).strip("_"): v for k, v in raw.items()}
        out = {}
        for dim in dimensions:
            if dim not in norm:
                raise ProviderParseError(f"no pick for dimension {dim!r}")
            out[dim] = _resolve_pick(norm[dim], n)
        return out

    best = picks(best_raw)
    worst = picks(worst_raw) if isinstance(worst_raw, dict) else None
    return Judgment(best=best, worst=worst, raw=text)


def parse_bookends(text: str) -> tuple[str, str]:
    data = extract_json(text)
    opening = _clean(data.get("opening")) if isinstance(data, dict) else None
    closing = _clean(data.get("closing")) if isinstance(data, dict) else None
    if opening is None or closing is None:
        raise ProviderParseError('expected {"opening": ..., "closing": ...}')
    return opening, closing


def parse_edit_script(text: str) -> list[EditOp]:
    data = extract_json(text)
    ops = data.get("operations") if isinstance(data, dict) else None
    if not isinstance(ops, list):
        raise ProviderParseError('expected {"operations": [...]}')
    script = []
    for raw in ops:
        if not isinstance(raw, dict) or raw.get("op") not in ("keep", "move", "insert", "delete"):
            raise ProviderParseError(f"bad edit operation {raw!r}")
        try:
            script.append(
                EditOp(
                    op=raw["op"],
                    index=int(raw["index"]) if raw.get("index") is not None else None,
                    to=int(raw["to"]) if raw.get("to") is not None else None,
                    at=int(raw["at"]) if raw.get("at") is not None else None,
                    text=_clean(raw.get("text")),
                )
            )
        except (TypeError, ValueError):
            raise ProviderParseError(f"bad edit operation {raw!r}") from None
    return script


def parse_direct_outline(text: str) -> DirectOutline:
    data = extract_json(text)
    if not isinstance(data, dict) or not isinstance(data.get("events"), list):
        raise ProviderParseError('expected {"events": [...], "climax_position": int}')
    events = [t for t in (_clean(e) for e in data["events"]) if t is not None]
    try:
        position = int(data.get("climax_position", len(events) // 2))
    except (TypeError, ValueError):
        raise ProviderParseError("climax_position must be an integer") from None
    if len(events) < 2:
        raise ProviderParseError("direct outline needs at least two events besides the climax")
    return DirectOutline(events=events, climax_position=min(max(position, 0), len(events)))


def parse_segment(text: str) -> str:
    """Segments are free text; a ``{"text": ...}`` wrapper is unwrapped."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = extract_json(stripped)
        except ProviderParseError:
            data = None
        if isinstance(data, dict) and _clean(data.get("text")):
            return data["text"].strip()
    if not stripped:
        raise ProviderParseError("empty segment")
    return stripped
