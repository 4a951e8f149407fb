"""Baseline and ablation search strategies over the same provider interfaces.

Every strategy takes a climax event and returns a rough outline; the pipeline
runs the remaining stages unchanged, so artifacts are comparable.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from bitmcts.engine import SearchConfig, SearchResult, bidirectional_search, evaluate
from bitmcts.narrative import Direction, Origin, Outline, PlotEvent, extend, normalize_text
from bitmcts.providers.base import Evaluator, ProposeRequest, Proposer

log = logging.getLogger(__name__)

FORWARD_BACKWARD = (Direction.FORWARD, Direction.BACKWARD)


class StrategyKind(str, Enum):
    BIT_MCTS = "bit-mcts"
    BEAM = "beam"
    BEST_OF_N = "best-of-n"
    DIRECT = "direct"
    UNIDIRECTIONAL_FORWARD = "unidirectional-forward"
    ORDER_SWAPPED = "order-swapped"
    NO_EARLY_STOP = "no-early-stop"
    NO_REFINEMENT = "no-refinement"


@dataclass(frozen=True)
class StrategySpec:
    """Which search strategy builds the rough outline.

    ``width`` applies to beam search, ``n`` to best-of-n, ``depth`` (events
    per phase) to both; ``None`` means the phase's ``d_max``.
    """

    kind: StrategyKind = StrategyKind.BIT_MCTS
    width: int = 4
    n: int = 8
    depth: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.width < 1:
            raise ValueError("beam width must be at least 1")
        if self.n < 1:
            raise ValueError("best-of-n needs n >= 1")
        if self.depth is not None and self.depth < 1:
            raise ValueError("depth budget must be at least 1")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "width": self.width, "n": self.n, "depth": self.depth}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StrategySpec:
        return cls(**data)


# Variants compared against the full method in the ablation table.
ABLATION_KINDS = (
    StrategyKind.UNIDIRECTIONAL_FORWARD,
    StrategyKind.ORDER_SWAPPED,
    StrategyKind.NO_EARLY_STOP,
    StrategyKind.NO_REFINEMENT,
    StrategyKind.DIRECT,
    StrategyKind.BEAM,
    StrategyKind.BEST_OF_N,
)


@dataclass
class SearchOutcome:
    outline: Outline
    phases: list[SearchResult] = field(default_factory=list)
    scored: int = 0

    @property
    def complete(self) -> bool:
        return all(p.complete for p in self.phases)


def _search_origin(direction: Direction) -> Origin:
    return Origin.FORWARD_SEARCH if direction is Direction.FORWARD else Origin.BACKWARD_SEARCH


def _admissible(events: list[PlotEvent], outline: Outline) -> list[PlotEvent]:
    taken = {normalize_text(t) for t in outline.texts}
    kept = []
    for event in events:
        text = normalize_text(event.text)
        if text in taken or outline.contains_id(event.id):
            continue
        taken.add(text)
        kept.append(event)
    return kept


def beam_phase(
    root: Outline,
    width: int,
    depth: int,
    proposer: Proposer,
    evaluator: Evaluator,
    direction: Direction | str,
    k: int = 4,
    temperature: float = 0.3,
) -> tuple[Outline, float]:
    """Classic beam search in one direction.

    Returns the best outline over every scored state (root included); ties
    prefer the longer outline, then the earlier one.
    """
    direction = Direction(direction)
    root_reward = evaluate(evaluator, root)
    beam = [(root, root_reward)]
    best, best_reward = root, root_reward
    for _ in range(depth):
        pool: list[tuple[Outline, float]] = []
        for outline, _reward in beam:
            request = ProposeRequest(outline, direction, k, temperature)
            for event in _admissible(list(proposer.propose(request))[:k], outline):
                grown = extend(outline, event, direction)
                pool.append((grown, evaluate(evaluator, grown)))
        if not pool:
            break
        # sorted() is stable, so equal scores keep insertion order.
        beam = sorted(pool, key=lambda item: -item[1])[:width]
        for outline, reward in beam:
            if (reward, len(outline)) > (best_reward, len(best)):
                best, best_reward = outline, reward
    return best, best_reward


def beam_search(
    climax: PlotEvent,
    width: int,
    depth: int,
    proposer: Proposer,
    evaluator: Evaluator,
    order: tuple[Direction | str, ...] = FORWARD_BACKWARD,
    k: int = 4,
    temperature: float = 0.3,
) -> Outline:
    if width < 1 or depth < 1:
        raise ValueError("beam search needs width >= 1 and depth >= 1")
    outline = Outline.root(climax)
    for direction in order:
        outline, _ = beam_phase(outline, width, depth, proposer, evaluator, direction, k, temperature)
    return outline


def greedy_rollout(
    climax: PlotEvent,
    depth: int,
    proposer: Proposer,
    draws: Any,
    order: tuple[Direction | str, ...] = FORWARD_BACKWARD,
    temperature: float = 0.3,
) -> Outline:
    """One complete outline: ``depth`` sampled extensions per phase, all accepted."""
    outline = Outline.root(climax)
    for direction in order:
        direction = Direction(direction)
        for _ in range(depth):
            request = ProposeRequest(outline, direction, 1, temperature, sample=next(draws))
            events = _admissible(list(proposer.propose(request)), outline)
            if not events:
                break
            event = events[0]
            event = PlotEvent(event.id, event.text, _search_origin(direction))
            outline = extend(outline, event, direction)
    return outline


def best_of_n(
    climax: PlotEvent,
    n: int,
    depth: int,
    proposer: Proposer,
    evaluator: Evaluator,
    temperature: float = 0.3,
) -> Outline:
    """Score ``n`` independent rollouts and keep the best (earliest on ties)."""
    if n < 1:
        raise ValueError("best-of-n needs n >= 1")
    draws = itertools.count(1)
    best, best_reward = None, float("-inf")
    for _ in range(n):
        outline = greedy_rollout(climax, depth, proposer, draws, temperature=temperature)
        reward = evaluate(evaluator, outline)
        if reward > best_reward:
            best, best_reward = outline, reward
    assert best is not None
    return best


def direct_outline(theme: str, conflict: str, climax: PlotEvent, provider: Any) -> Outline:
    """A single call for the whole outline; the climax is spliced in where the model says."""
    from bitmcts.narrative import derive_id

    plan = provider.direct_outline(theme, conflict, climax.text)
    events = [
        PlotEvent(derive_id("direct", climax.id, i, text), text, Origin.DIRECT)
        for i, text in enumerate(plan.events)
    ]
    position = min(max(plan.climax_position, 0), len(events))
    events.insert(position, climax)
    return Outline(tuple(events), position)


def search_outline(
    spec: StrategySpec,
    climax: PlotEvent,
    forward_cfg: SearchConfig,
    backward_cfg: SearchConfig,
    backend: Any,
    theme: str = "",
    conflict: str = "",
) -> SearchOutcome:
    """Build the rough outline with the strategy named by ``spec``."""
    kind = spec.kind
    if kind in (StrategyKind.BIT_MCTS, StrategyKind.NO_REFINEMENT):
        result = bidirectional_search(climax, forward_cfg, backward_cfg, backend, backend)
    elif kind is StrategyKind.UNIDIRECTIONAL_FORWARD:
        result = bidirectional_search(
            climax, forward_cfg, backward_cfg, backend, backend, order=(Direction.FORWARD,)
        )
    elif kind is StrategyKind.ORDER_SWAPPED:
        result = bidirectional_search(
            climax, forward_cfg, backward_cfg, backend, backend,
            order=(Direction.BACKWARD, Direction.FORWARD),
        )
    elif kind is StrategyKind.NO_EARLY_STOP:
        result = bidirectional_search(
            climax,
            replace(forward_cfg, early_stop=False),
            replace(backward_cfg, early_stop=False),
            backend,
            backend,
        )
    elif kind is StrategyKind.BEAM:
        depth = spec.depth or forward_cfg.d_max
        outline = beam_search(
            climax, spec.width, depth, backend, backend,
            k=forward_cfg.k_max, temperature=forward_cfg.temperature,
        )
        return SearchOutcome(outline)
    elif kind is StrategyKind.BEST_OF_N:
        depth = spec.depth or forward_cfg.d_max
        outline = best_of_n(climax, spec.n, depth, backend, backend, forward_cfg.temperature)
        return SearchOutcome(outline)
    elif kind is StrategyKind.DIRECT:
        return SearchOutcome(direct_outline(theme, conflict, climax, backend))
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown strategy {kind!r}")
    return SearchOutcome(result.outline, list(result.phases))


def run_variant(spec: StrategySpec | str, theme: Any, cfg: Any, backend: Any, run_dir: Any = None) -> Any:
    """Run the full pipeline with the rough-outline stage swapped for ``spec``."""
    from bitmcts.pipeline import run_pipeline

    if not isinstance(spec, StrategySpec):
        spec = StrategySpec(kind=StrategyKind(spec))
    return run_pipeline(theme, replace(cfg, strategy=spec), backend, run_dir=run_dir)
