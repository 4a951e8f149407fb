import json
import math

import pytest

from bitmcts.engine import (
    RolloutContext,
    SearchConfig,
    SearchNode,
    backpropagate,
    bidirectional_search,
    evaluate,
    expand,
    extract_best,
    run_phase,
    select_leaf,
    select_path,
    simulate,
    ucb_score,
)
from bitmcts.errors import CacheMissError, ContractViolation, TransportError
from bitmcts.narrative import Direction, Origin, Outline, PlotEvent, extend
from bitmcts.providers.base import ScoreBreakdown
from bitmcts.providers.synthetic import SyntheticBackend, length_scorer

from conftest import ev, root_outline

F, B = Direction.FORWARD, Direction.BACKWARD


class Script:
    """Proposer returning fixed candidate lists keyed by outline texts."""

    def __init__(self, table=None, default=None, score=len):
        self.table = table or {}
        self.default = default
        self.calls = []
        self._score = score

    def propose(self, request):
        self.calls.append(request)
        key = tuple(request.outline.texts)
        if key in self.table:
            return list(self.table[key])
        if self.default is not None:
            return self.default(request)
        return []

    def score(self, outline):
        return ScoreBreakdown.uniform(self._score(outline))


def node(w, n, serial=0, parent=None):
    nd = SearchNode(outline=root_outline(), visits=n, total_return=w, serial=serial, parent=parent)
    nd.plot_reward = 0.0
    return nd


# -- UCB --------------------------------------------------------------------


def test_ucb_zero_exploration_when_parent_visited_once():
    assert ucb_score(node(0.0, 1), 1, 0.5) == 0.0


def test_ucb_worked_example():
    expected = 1.5 + 0.5 * math.sqrt(2 * math.log(10) / 2)
    assert ucb_score(node(3.0, 2), 10, 0.5) == pytest.approx(expected, abs=1e-12)
    assert ucb_score(node(3.0, 2), 10, 0.5) == pytest.approx(2.258713, abs=1e-6)


def test_ucb_rejects_unvisited_child():
    with pytest.raises(ContractViolation):
        ucb_score(node(0.0, 0), 3, 0.5)
    with pytest.raises(ContractViolation):
        ucb_score(node(1.0, 1), 0, 0.5)


def _fully_expanded(root, children):
    root.children = children
    for c in children:
        c.parent = root
    root.fully_expanded = True
    root.cached_extensions = []
    return root


def test_select_stops_at_unexpanded_root():
    root = node(5.0, 3)
    root.children = [node(1.0, 1)]
    assert select_leaf(root, 0.5) is root


def test_select_ties_break_to_first_child():
    kids = [node(2.0, 1, 1), node(2.0, 1, 2), node(1.0, 1, 3)]
    root = _fully_expanded(node(5.0, 3), kids)
    assert select_leaf(root, 0.5) is kids[0]


def test_select_three_levels_by_hand():
    # Level 1: parent N=10, c=1.
    #   a: W=6,N=6 -> 1 + sqrt(2 ln10 / 6) = 1.8761
    #   b: W=3,N=4 -> 0.75 + sqrt(2 ln10 / 4) = 1.8230
    # Level 2 under a (N=6):
    #   a1: W=1,N=1 -> 1 + sqrt(2 ln6) = 2.8930
    #   a2: W=4,N=5 -> 0.8 + sqrt(2 ln6 / 5) = 1.6467
    a1, a2 = node(1.0, 1, 3), node(4.0, 5, 4)
    a = _fully_expanded(node(6.0, 6, 1), [a1, a2])
    b = node(3.0, 4, 2)
    root = _fully_expanded(node(9.0, 10), [a, b])
    assert select_path(root, 1.0) == [root, a, a1]


def test_select_stops_at_terminal():
    kid = node(1.0, 1, 1)
    kid.terminal = True
    kid.children = [node(1.0, 1, 2)]
    kid.fully_expanded = True
    root = _fully_expanded(node(1.0, 2), [kid])
    assert select_leaf(root, 0.5) is kid


def test_c_zero_is_pure_exploitation():
    kids = [node(1.0, 2, 1), node(3.0, 2, 2), node(2.0, 2, 3)]
    root = _fully_expanded(node(6.0, 6), kids)
    assert select_leaf(root, 1e-300) is kids[1]


# -- expansion ----------------------------------------------------------------


def test_expand_caches_candidates_and_calls_proposer_once():
    a, b, c = ev("a"), ev("b"), ev("c")
    prop = Script({("climax",): [a, b, c]})
    leaf = SearchNode(outline=root_outline())
    children = [expand(leaf, prop, prop, F, k=3) for _ in range(3)]
    assert [ch.outline.texts for ch in children] == [["climax", "a"], ["climax", "b"], ["climax", "c"]]
    assert len(prop.calls) == 1 and leaf.propose_calls == 1
    assert leaf.fully_expanded and leaf.next_candidate == 3
    assert all(ch.visits == 0 and ch.total_return == 0 for ch in children)
    assert [ch.plot_reward for ch in children] == [2.0, 2.0, 2.0]


def test_expand_first_child_advances_index():
    prop = Script({("climax",): [ev("a"), ev("b"), ev("c")]})
    leaf = SearchNode(outline=root_outline())
    child = expand(leaf, prop, prop, F, k=3)
    assert child.outline.texts == ["climax", "a"]
    assert leaf.next_candidate == 1 and not leaf.fully_expanded


def test_expand_backward_prepends():
    s = Outline((PlotEvent("id-climax", "climax", Origin.CLIMAX), ev("f1")), 0)
    prop = Script({("climax", "f1"): [ev("r1", Origin.BACKWARD_SEARCH)]})
    child = expand(SearchNode(outline=s), prop, prop, B, k=1)
    assert child.outline.texts == ["r1", "climax", "f1"]
    assert child.outline.climax_index == 1


def test_expand_skips_duplicate_text():
    s = append_f1 = extend(root_outline(), ev("Walk home"), F)
    prop = Script({tuple(s.texts): [PlotEvent("other", "  walk HOME ", Origin.FORWARD_SEARCH), ev("b")]})
    leaf = SearchNode(outline=append_f1)
    child = expand(leaf, prop, prop, F, k=2)
    assert child.outline.texts[-1] == "b"
    assert leaf.fully_expanded  # nothing admissible left


def test_expand_skips_sibling_duplicates():
    prop = Script({("climax",): [ev("a"), PlotEvent("a2", "A", Origin.FORWARD_SEARCH), ev("c")]})
    leaf = SearchNode(outline=root_outline())
    first = expand(leaf, prop, prop, F, k=3)
    second = expand(leaf, prop, prop, F, k=3)
    assert (first.outline.texts[-1], second.outline.texts[-1]) == ("a", "c")
    assert leaf.fully_expanded


def test_expand_with_no_candidates_marks_fully_expanded():
    prop = Script()
    leaf = SearchNode(outline=root_outline())
    assert expand(leaf, prop, prop, F) is None
    assert leaf.fully_expanded and leaf.children == []
    with pytest.raises(ContractViolation):
        expand(leaf, prop, prop, F)


def test_evaluate_clamps_out_of_range():
    class Raw:
        def __init__(self, total):
            self.total = total

        def score(self, outline):
            return ScoreBreakdown({}, self.total)

    warnings = []
    assert evaluate(Raw(14.0), root_outline(), warnings) == 10.0
    assert evaluate(Raw(-1.0), root_outline(), warnings) == 0.0
    assert len(warnings) == 2


# -- simulation -----------------------------------------------------------------


def scored(outline, depth, backend):
    nd = SearchNode(outline=outline, depth=depth)
    nd.plot_reward = backend.scorer(outline)
    return nd


@pytest.mark.parametrize("depth", range(0, 9))
def test_simulate_monotone_takes_all_allowed_steps(depth):
    backend = SyntheticBackend(seed=1, scorer=length_scorer(0.0, 1.0))
    cfg = SearchConfig(d_max=8, s_max=3)
    outline = root_outline()
    for i in range(depth):
        outline = extend(outline, ev(f"x{i}"), F)
    nd = scored(outline, depth, backend)
    trace = []
    ctx = RolloutContext(root_length=1, trace=trace)
    reward = simulate(nd, cfg, backend, backend, ctx)
    steps = min(cfg.s_max, cfg.d_max - depth)
    assert reward == nd.plot_reward + steps
    assert nd.terminal == (depth >= cfg.d_max)
    if depth < cfg.d_max:
        assert len(trace[0]) == steps + 1


def test_simulate_decreasing_accepts_nothing_and_keeps_node_open():
    backend = SyntheticBackend(seed=1, scorer="decreasing")
    nd = scored(root_outline(), 0, backend)
    trace = []
    reward = simulate(nd, SearchConfig(), backend, backend, RolloutContext(1, trace=trace))
    assert reward == nd.plot_reward
    assert not nd.terminal
    assert trace == [[nd.plot_reward]]


def test_simulate_at_depth_limit_marks_terminal():
    backend = SyntheticBackend(seed=1, scorer="length")
    prop = Script()
    nd = scored(extend(root_outline(), ev("a"), F), 2, backend)
    nd.plot_reward = 4.25
    assert simulate(nd, SearchConfig(d_max=2), prop, prop) == 4.25
    assert nd.terminal and prop.calls == []


def test_simulate_provider_error_returns_best_so_far():
    calls = []

    class Flaky(SyntheticBackend):
        def propose(self, request):
            calls.append(request.sample)
            if len(calls) > 1:
                raise TransportError("down")
            return super().propose(request)

    backend = Flaky(seed=0, scorer="length")
    nd = scored(root_outline(), 0, backend)
    ctx = RolloutContext(1)
    assert simulate(nd, SearchConfig(), backend, backend, ctx) == nd.plot_reward + 1
    assert ctx.warnings and not nd.terminal


def test_simulate_cache_miss_propagates():
    class Offline(SyntheticBackend):
        def propose(self, request):
            raise CacheMissError("cold")

    backend = Offline(scorer="length")
    with pytest.raises(CacheMissError):
        simulate(scored(root_outline(), 0, backend), SearchConfig(), backend, backend)


def test_fixed_depth_rollout_ignores_decreasing_scores():
    backend = SyntheticBackend(seed=2, scorer="decreasing")
    nd = scored(root_outline(), 0, backend)
    cfg = SearchConfig(early_stop=False, s_max=3, d_max=8)
    assert simulate(nd, cfg, backend, backend) == nd.plot_reward - 3


def test_rollout_draws_use_fresh_sample_ordinals():
    seen = []

    class Spy(SyntheticBackend):
        def propose(self, request):
            seen.append(request.sample)
            return super().propose(request)

    backend = Spy(seed=0, scorer="length")
    run_phase(root_outline(), SearchConfig(iterations=5, k_max=2, d_max=3), backend, backend)
    draws = [s for s in seen if s]
    assert draws == list(range(1, len(draws) + 1))


# -- backpropagation and phases ----------------------------------------------


def test_backpropagate_updates_every_node_on_path():
    path = [node(1.0, 2), node(0.5, 1), node(0.0, 0)]
    backpropagate(path, 7.0)
    assert [(n.visits, n.total_return) for n in path] == [(3, 8.0), (2, 7.5), (1, 7.0)]


def test_single_iteration_anatomy():
    backend = SyntheticBackend(seed=3, scorer="length")
    result = run_phase(root_outline(), SearchConfig(iterations=1), backend, backend)
    root = result.tree_root
    assert len(root.children) == 1 and root.visits == 1
    assert root.total_return == root.children[0].total_return
    assert result.iterations_run == 1


def test_root_visits_equal_iterations():
    backend = SyntheticBackend(seed=3)
    for i in (1, 7, 25):
        result = run_phase(root_outline(), SearchConfig(iterations=i), backend, backend)
        assert result.tree_root.visits == i


def enumerate_max(backend, root, direction, k, d_max):
    """Exhaustive oracle: best score over every outline reachable in <= d_max steps."""
    best = backend.scorer(root)
    frontier = [root]
    for _ in range(d_max):
        nxt = []
        for outline in frontier:
            taken = {t.casefold() for t in outline.texts}
            for event in backend.candidate_pool(outline, direction)[:k]:
                if event.text.casefold() in taken:
                    continue
                taken.add(event.text.casefold())
                grown = extend(outline, event, direction)
                best = max(best, backend.scorer(grown))
                nxt.append(grown)
        frontier = nxt
    return best


def test_small_phase_matches_enumeration():
    for seed in range(5):
        backend = SyntheticBackend(seed=seed, branching=2)
        cfg = SearchConfig(iterations=30, k_max=2, d_max=2)
        result = run_phase(root_outline(), cfg, backend, backend)
        assert result.best_reward == pytest.approx(enumerate_max(backend, root_outline(), F, 2, 2))


def test_phase_is_deterministic():
    def once():
        backend = SyntheticBackend(seed=11, stochastic=True)
        return json.dumps(run_phase(root_outline(), SearchConfig(iterations=20), backend, backend).to_dict())

    assert once() == once()


def test_extraction_prefers_reward_then_depth_then_age():
    root = node(0.0, 3)
    root.plot_reward = 5.0
    a, b = node(0.0, 1, 1, root), node(0.0, 1, 2, root)
    a.plot_reward = b.plot_reward = 7.0
    a.depth = b.depth = 1
    deep = node(0.0, 1, 3, a)
    deep.plot_reward, deep.depth = 7.0, 2
    unvisited = node(0.0, 0, 4, a)
    unvisited.plot_reward, unvisited.depth = 9.0, 2
    root.children, a.children = [a, b], [deep, unvisited]
    assert extract_best(root) is deep


def test_phase_provider_failure_flags_incomplete():
    class Dying(SyntheticBackend):
        n = 0

        def score(self, outline):
            Dying.n += 1
            if Dying.n > 6:
                raise TransportError("quota")
            return super().score(outline)

    backend = Dying(seed=0)
    result = run_phase(root_outline(), SearchConfig(iterations=50), backend, backend)
    assert not result.complete and result.iterations_run < 50
    assert result.tree_root.visits == result.iterations_run


def test_phase_cache_miss_propagates():
    class Cold(SyntheticBackend):
        def score(self, outline):
            raise CacheMissError("cold")

    with pytest.raises(CacheMissError):
        run_phase(root_outline(), SearchConfig(), Cold(), Cold())


# -- bidirectional ------------------------------------------------------------


def test_bidirectional_composition_by_hand():
    climax = PlotEvent("id-climax", "climax", Origin.CLIMAX)
    prop = Script(
        {
            ("climax",): [ev("f1")],
            ("climax", "f1"): [ev("f2")],
            ("climax", "f1", "f2"): [ev("r1", Origin.BACKWARD_SEARCH)],
        }
    )
    cfg = SearchConfig(iterations=10, d_max=2, k_max=1)
    result = bidirectional_search(climax, cfg, cfg, prop, prop)
    assert result.outline.texts == ["r1", "climax", "f1", "f2"]
    assert result.outline.climax_index == 1
    assert [p.config.direction for p in result.phases] == [F, B]


def test_bidirectional_order_swapped():
    climax = PlotEvent("id-climax", "climax", Origin.CLIMAX)
    prop = Script({("climax",): [ev("r1", Origin.BACKWARD_SEARCH)], ("r1", "climax"): [ev("f1")]})
    cfg = SearchConfig(iterations=5, d_max=1, k_max=1)
    result = bidirectional_search(climax, cfg, cfg, prop, prop, order=(B, F))
    assert result.outline.texts == ["r1", "climax", "f1"]


def test_bidirectional_degenerate_returns_climax_alone():
    backend = SyntheticBackend(seed=0, scorer="decreasing")
    climax = PlotEvent("id-climax", "climax", Origin.CLIMAX)
    cfg = SearchConfig(iterations=3)
    result = bidirectional_search(climax, cfg, cfg, backend, backend)
    assert result.outline.texts == ["climax"]


def test_phase_depth_resets_between_phases():
    backend = SyntheticBackend(seed=5, scorer="length")
    climax = PlotEvent("id-climax", "climax", Origin.CLIMAX)
    cfg = SearchConfig(iterations=60, d_max=2, k_max=2)
    result = bidirectional_search(climax, cfg, cfg, backend, backend)
    assert len(result.outline) == 5
    assert result.phases[1].tree_root.depth == 0


def test_config_defaults_and_validation():
    cfg = SearchConfig()
    assert (cfg.exploration_c, cfg.iterations, cfg.d_max, cfg.s_max, cfg.k_max) == (0.5, 50, 8, 3, 4)
    assert SearchConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        SearchConfig(exploration_c=0)
    with pytest.raises(ValueError):
        SearchConfig(iterations=0)
