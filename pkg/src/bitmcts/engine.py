"""Bidirectional Monte Carlo Tree Search over plot-event sequences.

One phase grows a tree rooted at a fixed outline, either appending events
(forward) or prepending them (backward). Each iteration selects a leaf by
UCB, instantiates at most one child from the leaf's cached candidate list,
runs a guided rollout with early termination, and backs the rollout return
up the selection path. The bidirectional driver runs a forward phase from the
climax and then a backward phase from the forward result.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterator

from bitmcts.errors import CacheMissError, ContractViolation, ProviderError
from bitmcts.narrative import Direction, Outline, PlotEvent, extend, normalize_text
from bitmcts.providers.base import Evaluator, ProposeRequest, Proposer

log = logging.getLogger(__name__)

REWARD_MIN, REWARD_MAX = 0.0, 10.0


@dataclass(frozen=True)
class SearchConfig:
    """Per-phase search hyperparameters.

    ``seed`` is recorded with every run; the tree policy itself has no
    randomness (ties break by creation order). ``early_stop=False`` swaps the
    guided rollout for fixed-depth rollouts that accept every sample.
    """

    exploration_c: float = 0.5
    iterations: int = 50
    d_max: int = 8
    s_max: int = 3
    k_max: int = 4
    seed: int = 0
    direction: Direction = Direction.FORWARD
    temperature: float = 0.3
    early_stop: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", Direction(self.direction))
        if not self.exploration_c > 0:
            raise ValueError("exploration_c must be positive")
        for name in ("iterations", "d_max", "s_max", "k_max"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")

    def to_dict(self) -> dict[str, Any]:
        return {
            "exploration_c": self.exploration_c,
            "iterations": self.iterations,
            "d_max": self.d_max,
            "s_max": self.s_max,
            "k_max": self.k_max,
            "seed": self.seed,
            "direction": self.direction.value,
            "temperature": self.temperature,
            "early_stop": self.early_stop,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SearchConfig:
        return cls(**data)


@dataclass(eq=False)
class SearchNode:
    outline: Outline
    parent: SearchNode | None = field(default=None, repr=False)
    children: list[SearchNode] = field(default_factory=list, repr=False)
    depth: int = 0
    visits: int = 0
    total_return: float = 0.0
    plot_reward: float | None = None
    terminal: bool = False
    fully_expanded: bool = False
    cached_extensions: list[PlotEvent] | None = field(default=None, repr=False)
    next_candidate: int = 0
    serial: int = 0
    propose_calls: int = 0
    event: PlotEvent | None = field(default=None, repr=False)

    @property
    def mean_return(self) -> float:
        return self.total_return / max(self.visits, 1)

    def walk(self) -> Iterator[SearchNode]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def path_from_root(self) -> list[SearchNode]:
        path = []
        node: SearchNode | None = self
        while node is not None:
            path.append(node)
            node = node.parent
        return path[::-1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "serial": self.serial,
            "depth": self.depth,
            "visits": self.visits,
            "total_return": self.total_return,
            "plot_reward": self.plot_reward,
            "terminal": self.terminal,
            "fully_expanded": self.fully_expanded,
            "next_candidate": self.next_candidate,
            "cached_extensions": (
                None if self.cached_extensions is None
                else [e.to_dict() for e in self.cached_extensions]
            ),
            "outline": self.outline.to_dict(),
            "children": [c.to_dict() for c in self.children],
        }


@dataclass
class SearchResult:
    best_outline: Outline
    best_reward: float
    tree_root: SearchNode
    iterations_run: int
    provider_call_counts: dict[str, int]
    config: SearchConfig
    complete: bool = True
    warnings: list[str] = field(default_factory=list)

    def nodes(self) -> list[SearchNode]:
        return list(self.tree_root.walk())

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "iterations_run": self.iterations_run,
            "complete": self.complete,
            "best_reward": self.best_reward,
            "best_outline": self.best_outline.to_dict(),
            "provider_call_counts": dict(sorted(self.provider_call_counts.items())),
            "warnings": list(self.warnings),
            "tree": self.tree_root.to_dict(),
        }


class _Counted:
    """Wraps a proposer/evaluator pair, counting calls and clamping rewards."""

    def __init__(self, proposer: Proposer, evaluator: Evaluator) -> None:
        self.proposer = proposer
        self.evaluator = evaluator
        self.counts = {"propose": 0, "score": 0}
        self.warnings: list[str] = []

    def propose(self, request: ProposeRequest) -> list[PlotEvent]:
        self.counts["propose"] += 1
        return self.proposer.propose(request)

    def score(self, outline: Outline) -> Any:
        self.counts["score"] += 1
        return self.evaluator.score(outline)


def evaluate(evaluator: Evaluator, outline: Outline, warnings: list[str] | None = None) -> float:
    """Scalar reward of ``outline`` clamped to [0, 10]."""
    total = float(evaluator.score(outline).total)
    if not REWARD_MIN <= total <= REWARD_MAX:
        msg = f"evaluator returned {total}, clamped to [{REWARD_MIN}, {REWARD_MAX}]"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        total = min(REWARD_MAX, max(REWARD_MIN, total))
    return total


def ucb_score(child: SearchNode, parent_visits: int, c: float) -> float:
    if child.visits < 1:
        raise ContractViolation("UCB is undefined for an unvisited child")
    if parent_visits < 1:
        raise ContractViolation("UCB needs a visited parent")
    n = child.visits
    return child.total_return / n + c * math.sqrt(2.0 * math.log(parent_visits) / n)


def select_path(root: SearchNode, c: float) -> list[SearchNode]:
    """Greedy UCB descent; returns the whole path, root first."""
    path = [root]
    node = root
    while not node.terminal and node.fully_expanded and node.children:
        best, best_score = node.children[0], -math.inf
        for child in node.children:
            score = ucb_score(child, node.visits, c)
            if score > best_score:
                best, best_score = child, score
        node = best
        path.append(node)
    return path


def select_leaf(root: SearchNode, c: float) -> SearchNode:
    return select_path(root, c)[-1]


def is_admissible(candidate: PlotEvent, leaf: SearchNode) -> bool:
    """Reject candidates repeating an event already in the leaf's outline or a sibling."""
    if leaf.outline.contains_id(candidate.id):
        return False
    text = normalize_text(candidate.text)
    taken = [e.text for e in leaf.outline.events]
    taken += [c.event.text for c in leaf.children if c.event is not None]
    return all(normalize_text(t) != text for t in taken)


def _skip_inadmissible(leaf: SearchNode) -> None:
    cached = leaf.cached_extensions or []
    while leaf.next_candidate < len(cached) and not is_admissible(cached[leaf.next_candidate], leaf):
        leaf.next_candidate += 1
    if leaf.next_candidate >= len(cached):
        leaf.fully_expanded = True


def expand(
    leaf: SearchNode,
    proposer: Proposer,
    evaluator: Evaluator,
    direction: Direction | str,
    k: int = 4,
    temperature: float = 0.3,
    serial: Callable[[], int] | None = None,
    warnings: list[str] | None = None,
) -> SearchNode | None:
    """Instantiate one child of ``leaf`` from its cached candidate list.

    The proposer is consulted only on the first expansion of a leaf. Returns
    None (and marks the leaf fully expanded) when no admissible candidate is
    left.
    """
    if leaf.terminal or leaf.fully_expanded:
        raise ContractViolation("expand needs a non-terminal, not fully expanded leaf")
    direction = Direction(direction)
    if leaf.cached_extensions is None:
        request = ProposeRequest(leaf.outline, direction, k, temperature, sample=0)
        leaf.cached_extensions = list(proposer.propose(request))[:k]
        leaf.propose_calls += 1
    _skip_inadmissible(leaf)
    if leaf.fully_expanded:
        return None
    event = leaf.cached_extensions[leaf.next_candidate]
    child = SearchNode(
        outline=extend(leaf.outline, event, direction),
        parent=leaf,
        depth=leaf.depth + 1,
        serial=serial() if serial else len(leaf.children) + 1,
        event=event,
    )
    child.plot_reward = evaluate(evaluator, child.outline, warnings)
    leaf.next_candidate += 1
    leaf.children.append(child)
    _skip_inadmissible(leaf)
    return child


@dataclass
class RolloutContext:
    """Phase-level state shared by every rollout of one tree."""

    root_length: int
    draws: Iterator[int] = field(default_factory=lambda: itertools.count(1))
    warnings: list[str] = field(default_factory=list)
    trace: list[list[float]] | None = None


def simulate(
    node: SearchNode,
    cfg: SearchConfig,
    proposer: Proposer,
    evaluator: Evaluator,
    ctx: RolloutContext | None = None,
) -> float:
    """Guided rollout with early termination.

    Extensions are drawn one at a time and kept only while the score does not
    drop; the first drop ends the rollout without marking ``node`` terminal.
    Only reaching ``d_max`` marks a node terminal. Rollout events never enter
    the tree.
    """
    if node.plot_reward is None:
        raise ContractViolation("simulate needs a scored node")
    if ctx is None:
        ctx = RolloutContext(root_length=len(node.outline) - node.depth)
    if node.terminal or node.depth >= cfg.d_max:
        node.terminal = True
        return node.plot_reward
    if not cfg.early_stop:
        return _fixed_depth_rollout(node, cfg, proposer, evaluator, ctx)

    reward_cur = node.plot_reward
    s_cur = node.outline
    accepted = [reward_cur]
    try:
        for _ in range(min(cfg.s_max, cfg.d_max - node.depth)):
            event = _draw(s_cur, cfg, proposer, ctx)
            if event is None:
                break
            s_new = extend(s_cur, event, cfg.direction)
            if len(s_new) - ctx.root_length > cfg.d_max:
                break
            reward_new = evaluate(evaluator, s_new, ctx.warnings)
            if reward_new >= reward_cur:
                s_cur, reward_cur = s_new, reward_new
                accepted.append(reward_cur)
            else:
                break
    except CacheMissError:
        raise
    except ProviderError as exc:
        msg = f"rollout cut short by provider error: {exc}"
        log.warning(msg)
        ctx.warnings.append(msg)
    if ctx.trace is not None:
        ctx.trace.append(accepted)
    return reward_cur


def _fixed_depth_rollout(
    node: SearchNode,
    cfg: SearchConfig,
    proposer: Proposer,
    evaluator: Evaluator,
    ctx: RolloutContext,
) -> float:
    s_cur = node.outline
    reward = node.plot_reward
    steps = 0
    try:
        for _ in range(min(cfg.s_max, cfg.d_max - node.depth)):
            event = _draw(s_cur, cfg, proposer, ctx)
            if event is None:
                break
            s_new = extend(s_cur, event, cfg.direction)
            if len(s_new) - ctx.root_length > cfg.d_max:
                break
            s_cur = s_new
            steps += 1
        if steps:
            reward = evaluate(evaluator, s_cur, ctx.warnings)
    except CacheMissError:
        raise
    except ProviderError as exc:
        msg = f"fixed-depth rollout cut short by provider error: {exc}"
        log.warning(msg)
        ctx.warnings.append(msg)
    return reward


def _draw(outline: Outline, cfg: SearchConfig, proposer: Proposer, ctx: RolloutContext) -> PlotEvent | None:
    request = ProposeRequest(outline, cfg.direction, 1, cfg.temperature, sample=next(ctx.draws))
    events = [e for e in proposer.propose(request) if not outline.contains_id(e.id)]
    return events[0] if events else None


def backpropagate(path: list[SearchNode], reward: float) -> None:
    for node in path:
        node.visits += 1
        node.total_return += reward


def extract_best(root: SearchNode) -> SearchNode:
    """Highest plot reward among visited nodes; ties prefer depth, then age."""
    best = root
    for node in root.walk():
        if node.visits < 1 or node.plot_reward is None:
            continue
        if best.visits < 1 or (node.plot_reward, node.depth, -node.serial) > (
            best.plot_reward,
            best.depth,
            -best.serial,
        ):
            best = node
    return best


def run_phase(
    root_outline: Outline,
    cfg: SearchConfig,
    proposer: Proposer,
    evaluator: Evaluator,
    trace: list[list[float]] | None = None,
) -> SearchResult:
    """Run ``cfg.iterations`` select/expand/simulate/backpropagate iterations.

    Provider failures other than offline cache misses stop the phase early and
    return the partial tree flagged incomplete.
    """
    counted = _Counted(proposer, evaluator)
    serials = itertools.count(1)
    root = SearchNode(outline=root_outline, depth=0, serial=0)
    ctx = RolloutContext(root_length=len(root_outline), warnings=counted.warnings, trace=trace)
    complete = True
    iterations_run = 0
    try:
        root.plot_reward = evaluate(counted, root_outline, counted.warnings)
        for _ in range(cfg.iterations):
            path = select_path(root, cfg.exploration_c)
            leaf = path[-1]
            node = leaf
            if not leaf.terminal and not leaf.fully_expanded and leaf.depth < cfg.d_max:
                child = expand(
                    leaf, counted, counted, cfg.direction, cfg.k_max, cfg.temperature,
                    serial=lambda: next(serials), warnings=counted.warnings,
                )
                if child is not None:
                    path.append(child)
                    node = child
            reward = simulate(node, cfg, counted, counted, ctx)
            backpropagate(path, reward)
            iterations_run += 1
    except CacheMissError:
        raise
    except ProviderError as exc:
        complete = False
        msg = f"phase aborted after {iterations_run} iterations: {exc}"
        log.warning(msg)
        counted.warnings.append(msg)

    best = extract_best(root)
    return SearchResult(
        best_outline=best.outline,
        best_reward=best.plot_reward if best.plot_reward is not None else 0.0,
        tree_root=root,
        iterations_run=iterations_run,
        provider_call_counts=dict(counted.counts),
        config=cfg,
        complete=complete,
        warnings=list(counted.warnings),
    )


@dataclass
class BidirectionalResult:
    outline: Outline
    phases: list[SearchResult]

    @property
    def complete(self) -> bool:
        return all(p.complete for p in self.phases)

    def phase(self, direction: Direction | str) -> SearchResult | None:
        direction = Direction(direction)
        for result in self.phases:
            if result.config.direction is direction:
                return result
        return None


def bidirectional_search(
    climax: PlotEvent,
    forward_cfg: SearchConfig,
    backward_cfg: SearchConfig,
    proposer: Proposer,
    evaluator: Evaluator,
    order: tuple[Direction | str, ...] = (Direction.FORWARD, Direction.BACKWARD),
    search: Callable[[Outline, SearchConfig], SearchResult] | None = None,
) -> BidirectionalResult:
    """Grow falling action from the climax, then rising action from that result.

    ``order`` reorders or drops phases for ablations. Each phase gets a fresh
    tree rooted at the previous phase's best outline, with depth reset to 0.
    """
    run = search or (lambda outline, cfg: run_phase(outline, cfg, proposer, evaluator))
    outline = Outline.root(climax)
    results = []
    for direction in order:
        direction = Direction(direction)
        base = forward_cfg if direction is Direction.FORWARD else backward_cfg
        result = run(outline, replace(base, direction=direction))
        results.append(result)
        outline = result.best_outline
        if not result.complete:
            break
    return BidirectionalResult(outline=outline, phases=results)
