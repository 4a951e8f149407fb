"""Seeded, offline stand-ins for every model call.

Every method is a pure function of the constructor arguments and its inputs,
so repeated calls are bit-identical. The scorers are analytic functions of
the outline, which makes exhaustive-search oracles possible in tests.
"""

from __future__ import annotations

import hashlib
import json
from typing import Callable, Sequence

from bitmcts.narrative import Direction, Outline, Origin, PlotEvent, StagedOutline, derive_id
from bitmcts.providers.base import (
    DirectOutline,
    EditOp,
    Judgment,
    ProposeRequest,
    ScoreBreakdown,
)

Scorer = Callable[[Outline], float]


def unit(*parts: object) -> float:
    """Deterministic uniform draw in [0, 1) keyed by ``parts``."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def length_scorer(offset: float = 0.0, slope: float = 1.0) -> Scorer:
    """Monotone in outline length: ``offset + slope * len``."""
    return lambda outline: offset + slope * len(outline)


def decreasing_scorer(start: float = 10.0, step: float = 1.0) -> Scorer:
    """Strictly decreasing in outline length."""
    return lambda outline: start - step * (len(outline) - 1)


def plateau_scorer(cap: float = 6.0, offset: float = 2.0, slope: float = 1.0) -> Scorer:
    """Length-monotone until ``cap``, flat afterwards."""
    return lambda outline: min(cap, offset + slope * len(outline))


def additive_scorer(seed: int = 0, base: float = 5.0, weight: float = 1.0) -> Scorer:
    """``base`` plus a hashed value in [-weight, weight] per non-climax event."""

    def score(outline: Outline) -> float:
        total = base
        for i, event in enumerate(outline.events):
            if i != outline.climax_index:
                total += weight * (2.0 * unit("value", seed, event.text) - 1.0)
        return total

    return score


def target_scorer(target: Sequence[str]) -> Scorer:
    """10 at ``target`` (a text sequence), falling with edit distance."""
    target = list(target)

    def score(outline: Outline) -> float:
        a, b = outline.texts, target
        prev = list(range(len(b) + 1))
        for i in range(1, len(a) + 1):
            cur = [i] + [0] * len(b)
            for j in range(1, len(b) + 1):
                cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1]))
            prev = cur
        return 10.0 * (1.0 - prev[-1] / max(len(a), len(b), 1))

    return score


SCORERS: dict[str, Callable[..., Scorer]] = {
    "length": length_scorer,
    "decreasing": decreasing_scorer,
    "plateau": plateau_scorer,
    "additive": additive_scorer,
}


class SyntheticBackend:
    """Deterministic backend for engine tests and offline pipeline runs.

    ``branching`` fixes the size of the candidate pool behind every outline
    state. In stochastic mode a rollout draw (``sample >= 1``) picks uniformly
    from that pool keyed by the sample ordinal; otherwise it returns the
    top-ranked candidate.
    """

    kind = "synthetic"

    def __init__(
        self,
        seed: int = 0,
        scorer: Scorer | str = "additive",
        branching: int = 4,
        stochastic: bool = False,
        vocabulary: Sequence[str] | None = None,
        judge: str = "longest",
        segment_sentences: int = 3,
    ) -> None:
        self.seed = seed
        if isinstance(scorer, str):
            scorer = additive_scorer(seed) if scorer == "additive" else SCORERS[scorer]()
        self.scorer = scorer
        self.branching = branching
        self.stochastic = stochastic
        self.vocabulary = list(vocabulary) if vocabulary else None
        self.judge = judge
        self.segment_sentences = segment_sentences
        self.theme = ""
        self.conflict = ""

    def with_context(self, theme: str, conflict: str = "") -> SyntheticBackend:
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.theme, clone.conflict = theme, conflict
        return clone

    # -- plot writer -------------------------------------------------

    def _token(self, *parts: object) -> str:
        return hashlib.sha256("\x1f".join(map(str, (self.seed,) + parts)).encode()).hexdigest()[:8]

    def candidate_pool(self, outline: Outline, direction: Direction) -> list[PlotEvent]:
        state = "|".join(e.id for e in outline.events)
        origin = Origin.FORWARD_SEARCH if direction is Direction.FORWARD else Origin.BACKWARD_SEARCH
        prefix = "fall" if direction is Direction.FORWARD else "rise"
        pool = []
        for i in range(self.branching):
            if self.vocabulary:
                idx = int(unit("vocab", self.seed, state, direction.value, i) * len(self.vocabulary))
                text = self.vocabulary[idx]
            else:
                text = f"{prefix}-{self._token('text', state, direction.value, i)}"
            pool.append(PlotEvent(derive_id(self.seed, state, direction.value, i), text, origin))
        return pool

    def propose(self, request: ProposeRequest) -> list[PlotEvent]:
        pool = self.candidate_pool(request.outline, request.direction)
        if request.sample == 0:
            return pool[: request.k]
        idx = 0
        if self.stochastic:
            state = "|".join(e.id for e in request.outline.events)
            idx = int(unit("draw", self.seed, state, request.direction.value, request.sample) * len(pool))
        drawn = pool[idx]
        return [PlotEvent(drawn.id, drawn.text, Origin.SIMULATION)]

    def score(self, outline: Outline) -> ScoreBreakdown:
        return ScoreBreakdown.uniform(self.scorer(outline))

    # -- pipeline stages ---------------------------------------------

    def usage(self) -> dict[str, int]:
        return {"prompt_tokens": 0, "completion_tokens": 0}

    def generate_conflicts(self, theme: str, transcript: list[str] | None = None) -> list[str]:
        options = [
            f"Conflict {i + 1} on '{theme}': {self._token('conflict', theme, i)}" for i in range(5)
        ]
        if transcript is not None:
            transcript.append(json.dumps({f"conflict{i + 1}": o for i, o in enumerate(options)}))
        return options

    def screen(
        self, candidates: Sequence[str], criterion: str, transcript: list[str] | None = None
    ) -> int:
        if len(candidates) <= 1:
            return 0
        pick = int(unit("screen", self.seed, criterion, *candidates) * len(candidates))
        if transcript is not None:
            transcript.append(json.dumps({"best": pick + 1}))
        return pick

    def generate_climaxes(
        self, theme: str, conflict: str, transcript: list[str] | None = None
    ) -> list[str]:
        options = [
            f"Climax {i + 1} of '{theme}': {self._token('climax', conflict, i)}" for i in range(5)
        ]
        if transcript is not None:
            transcript.append(json.dumps({f"plot{i + 1}": o for i, o in enumerate(options)}))
        return options

    def generate_bookends(self, outline: Outline) -> tuple[str, str]:
        state = "|".join(outline.texts)
        return (
            f"open-{self._token('opening', state)}",
            f"close-{self._token('closing', state)}",
        )

    def critique(self, outline: Outline) -> list[EditOp]:
        state = "|".join(outline.texts)
        script = [EditOp("keep", index=i) for i in range(len(outline))]
        at = 1 + int(unit("critic", self.seed, state) * max(len(outline) - 1, 1))
        script.append(EditOp("insert", at=at, text=f"bridge-{self._token('bridge', state)}"))
        return script

    def write_segment(self, outline: StagedOutline, segment: str) -> str:
        events = outline.outline.events
        sentences = []
        for i, event in enumerate(events):
            for j in range(self.segment_sentences):
                sentences.append(f"{segment} {i + 1}.{j + 1}: {event.text} {self._token(segment, event.id, j)}.")
        return " ".join(sentences)

    def direct_outline(self, theme: str, conflict: str, climax: str) -> DirectOutline:
        events = [f"direct-{self._token('direct', climax, i)}" for i in range(4)]
        return DirectOutline(events=events, climax_position=2)

    def judge_comparative(self, fictions: Sequence[str], dimensions: Sequence[str]) -> Judgment:
        n = len(fictions)
        if self.judge == "longest":
            lengths = [len(f) for f in fictions]
            best = lengths.index(max(lengths))
            worst = lengths.index(min(lengths))
            picks = {d: best for d in dimensions}
            worsts = {d: worst for d in dimensions}
        elif self.judge == "first":
            picks = {d: 0 for d in dimensions}
            worsts = {d: n - 1 for d in dimensions}
        elif self.judge == "seeded":
            picks = {d: int(unit("judge", self.seed, d, *fictions) * n) for d in dimensions}
            worsts = {d: int(unit("worst", self.seed, d, *fictions) * n) for d in dimensions}
        else:
            raise ValueError(f"unknown synthetic judge {self.judge!r}")
        return Judgment(best=picks, worst=worsts, raw=f"synthetic:{self.judge}")
