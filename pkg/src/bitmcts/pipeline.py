"""Theme-to-fiction pipeline: conflict, climax, outline search, refinement, prose.

Each stage persists its output under the run directory before the next one
starts, so a run can be resumed from any completed stage.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from bitmcts.errors import BitMCTSError, CacheMissError, ProviderError
from bitmcts.narrative import (
    Origin,
    Outline,
    PlotEvent,
    StagedOutline,
    Theme,
    derive_id,
    stage_partition,
)
from bitmcts.providers.base import CountingBackend, EditOp

log = logging.getLogger(__name__)

STAGES = ("conflict", "climax", "search", "refine", "fiction")
SEGMENTS = ("beginning", "body", "ending")


class EditScriptError(ValueError):
    """The self-critic produced an edit script that cannot be applied."""


class StageFailed(BitMCTSError):
    def __init__(self, stage: str, cause: Exception, last_completed: str | None) -> None:
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.last_completed = last_completed
        self.exit_code = getattr(cause, "exit_code", 1)


@dataclass
class ConflictSpec:
    theme: Theme
    conflict_text: str
    candidates: list[str]
    chosen_index: int
    raw_responses: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 <= self.chosen_index < len(self.candidates):
            raise ValueError("chosen_index outside the candidate list")
        if not self.conflict_text.strip():
            raise ValueError("conflict text must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "theme": {"id": self.theme.id, "text": self.theme.text},
            "conflict_text": self.conflict_text,
            "candidates": list(self.candidates),
            "chosen_index": self.chosen_index,
            "raw_responses": list(self.raw_responses),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ConflictSpec:
        return cls(
            theme=Theme(text=data["theme"]["text"], id=data["theme"]["id"]),
            conflict_text=data["conflict_text"],
            candidates=list(data["candidates"]),
            chosen_index=int(data["chosen_index"]),
            raw_responses=list(data.get("raw_responses", [])),
        )


@dataclass
class ClimaxSpec:
    event: PlotEvent
    candidates: list[str]
    chosen_index: int
    raw_responses: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "event": self.event.to_dict(),
            "candidates": list(self.candidates),
            "chosen_index": self.chosen_index,
            "raw_responses": list(self.raw_responses),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ClimaxSpec:
        return cls(
            event=PlotEvent.from_dict(data["event"]),
            candidates=list(data["candidates"]),
            chosen_index=int(data["chosen_index"]),
            raw_responses=list(data.get("raw_responses", [])),
        )


@dataclass
class FictionArtifact:
    theme: Theme
    conflict: ConflictSpec
    climax: PlotEvent
    rough_outline: Outline
    refined_outline: StagedOutline | None
    fiction_segments: dict[str, str]
    metadata: dict[str, Any]
    complete: bool = True

    @property
    def full_text(self) -> str:
        return "".join(self.fiction_segments.get(s, "") for s in SEGMENTS)

    def to_dict(self) -> dict[str, Any]:
        return {
            "theme": {"id": self.theme.id, "text": self.theme.text},
            "conflict": self.conflict.to_dict(),
            "climax": self.climax.to_dict(),
            "rough_outline": self.rough_outline.to_dict(),
            "refined_outline": self.refined_outline.to_dict() if self.refined_outline else None,
            "fiction_segments": {s: self.fiction_segments.get(s, "") for s in SEGMENTS},
            "full_text": self.full_text,
            "complete": self.complete,
            "metadata": self.metadata,
        }


# -- stage 1: conflict and climax ------------------------------------------


def generate_conflict(theme: Theme, backend: Any) -> ConflictSpec:
    """Five candidate conflicts, then one screening call to choose."""
    raw: list[str] = []
    candidates = backend.generate_conflicts(theme.text, transcript=raw)
    if len(candidates) != 5:
        log.warning("screening over %d conflict candidates instead of 5", len(candidates))
    index = backend.screen(candidates, "conflict", transcript=raw)
    return ConflictSpec(theme, candidates[index], list(candidates), index, raw)


def generate_climax(conflict: ConflictSpec, backend: Any) -> ClimaxSpec:
    raw: list[str] = []
    candidates = backend.generate_climaxes(conflict.theme.text, conflict.conflict_text, transcript=raw)
    if len(candidates) != 5:
        log.warning("screening over %d climax candidates instead of 5", len(candidates))
    index = backend.screen(candidates, "climax", transcript=raw)
    text = candidates[index]
    event = PlotEvent(derive_id("climax", conflict.theme.id, text), text, Origin.CLIMAX)
    return ClimaxSpec(event, list(candidates), index, raw)


# -- stage 3: refinement ------------------------------------------------------


def apply_edit_script(outline: Outline, script: Sequence[EditOp], salt: str = "") -> Outline:
    """Apply keep/move/insert/delete operations in order.

    Indices refer to the outline as left by the preceding operations. The
    climax may move but never be deleted.
    """
    events = list(outline.events)
    climax_id = outline.climax.id

    def check(index: int | None, upper: int, what: str) -> int:
        if index is None or not 0 <= index < upper:
            raise EditScriptError(f"{what} index {index} outside [0, {upper})")
        return index

    for n, op in enumerate(script):
        if op.op == "keep":
            check(op.index, len(events), "keep")
        elif op.op == "delete":
            i = check(op.index, len(events), "delete")
            if events[i].id == climax_id:
                raise EditScriptError("edit script deletes the climax")
            events.pop(i)
        elif op.op == "move":
            i = check(op.index, len(events), "move")
            j = check(op.to, len(events), "move target")
            events.insert(j, events.pop(i))
        elif op.op == "insert":
            j = check(op.at, len(events) + 1, "insert")
            if not op.text or not op.text.strip():
                raise EditScriptError("insert without text")
            event_id = derive_id("edit", salt, n, op.text)
            events.insert(j, PlotEvent(event_id, op.text.strip(), Origin.REFINEMENT_EDIT))
        else:
            raise EditScriptError(f"unknown operation {op.op!r}")
    index = next(i for i, e in enumerate(events) if e.id == climax_id)
    return Outline(tuple(events), index)


def add_bookends(outline: Outline, opening: str, closing: str, salt: str = "") -> Outline:
    first = PlotEvent(derive_id("opening", salt, opening), opening, Origin.REFINEMENT_OPENING)
    last = PlotEvent(derive_id("closing", salt, closing), closing, Origin.REFINEMENT_CLOSING)
    return Outline((first,) + outline.events + (last,), outline.climax_index + 1)


def refine_outline(
    rough: Outline, backend: Any, salt: str = "", notes: list[str] | None = None
) -> StagedOutline:
    """Bookend the rough outline, then apply the self-critic's edit script.

    An invalid script (bad index, deleting the climax) is skipped with a
    warning and the bookended outline is kept.
    """
    opening, closing = backend.generate_bookends(rough)
    outline = add_bookends(rough, opening, closing, salt)
    script = backend.critique(outline)
    try:
        outline = apply_edit_script(outline, script, salt)
    except EditScriptError as exc:
        msg = f"self-critic edit script rejected: {exc}"
        log.warning(msg)
        if notes is not None:
            notes.append(msg)
    return stage_partition(outline)


# -- stage 4: prose --------------------------------------------------------


def generate_fiction(refined: StagedOutline, backend: Any) -> tuple[dict[str, str], list[str]]:
    """Three calls (beginning, body, ending), each conditioned on the whole outline.

    Returns the segments produced so far and a list of failures; an empty
    failure list means the fiction is complete.
    """
    segments: dict[str, str] = {}
    failures: list[str] = []
    for name in SEGMENTS:
        try:
            text = backend.write_segment(refined, name)
        except CacheMissError:
            raise
        except ProviderError as exc:
            failures.append(f"{name}: {exc}")
            continue
        if not text or not text.strip():
            failures.append(f"{name}: empty segment")
            continue
        segments[name] = text.strip() + ("\n" if name == "ending" else "\n\n")
    return segments, failures


# -- orchestration ------------------------------------------------------------


def default_clock() -> _dt.datetime:
    """Wall clock, or ``SOURCE_DATE_EPOCH`` when set (reproducible runs)."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        return _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    return _dt.datetime.now(tz=_dt.timezone.utc).replace(microsecond=0)


def write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def default_run_dir(root: str | Path, theme: Theme, clock: Callable[[], _dt.datetime] = default_clock) -> Path:
    return Path(root) / f"{theme.id}-{clock().strftime('%Y%m%dT%H%M%SZ')}"


@dataclass
class _RunState:
    theme: Theme
    conflict: ConflictSpec | None = None
    climax: ClimaxSpec | None = None
    rough: Outline | None = None
    refined: StagedOutline | None = None
    segments: dict[str, str] = field(default_factory=dict)
    phase_calls: list[dict[str, Any]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    stages_run: list[str] = field(default_factory=list)
    timestamps: dict[str, str] = field(default_factory=dict)


def _load_stage(state: _RunState, stage: str, run_dir: Path) -> None:
    if stage == "conflict":
        state.conflict = ConflictSpec.from_dict(read_json(run_dir / "conflict.json"))
    elif stage == "climax":
        state.climax = ClimaxSpec.from_dict(read_json(run_dir / "climax.json"))
    elif stage == "search":
        state.rough = Outline.from_dict(read_json(run_dir / "rough_outline.json"))
    elif stage == "refine":
        state.refined = StagedOutline.from_dict(read_json(run_dir / "refined_outline.json"))


def run_pipeline(
    theme: Theme | str,
    config: Any,
    backend: Any,
    run_dir: str | Path | None = None,
    resume_from: str | None = None,
    clock: Callable[[], _dt.datetime] = default_clock,
    stop_after: str | None = None,
) -> FictionArtifact:
    """Run every stage in order, persisting after each.

    ``resume_from`` names the first stage to recompute; earlier stages are
    loaded from ``run_dir`` and their providers are never called.
    ``stop_after`` ends the run early (the artifact is then incomplete).
    """
    from bitmcts.baselines import StrategyKind, search_outline

    theme = theme if isinstance(theme, Theme) else Theme(theme)
    strategy = config.strategy
    counting = CountingBackend(backend)
    run_path = Path(run_dir) if run_dir is not None else None
    for name in (resume_from, stop_after):
        if name is not None and name not in STAGES:
            raise ValueError(f"unknown stage {name!r}; expected one of {STAGES}")
    start = STAGES.index(resume_from) if resume_from else 0
    if start and run_dir is None:
        raise ValueError("resuming needs the run directory holding earlier stages")
    state = _RunState(theme=theme)
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        if start:
            for stage in STAGES[:start]:
                _load_stage(state, stage, run_path)
    started = clock().isoformat()

    def persist_run(last: str | None, complete: bool) -> None:
        if run_path is None:
            return
        write_json(
            run_path / "run.json",
            {
                "theme": {"id": theme.id, "text": theme.text},
                "config": config.to_dict(),
                "seed": config.seed,
                "strategy": strategy.to_dict(),
                "started_at": started,
                "resumed_from": resume_from,
                "stages_run": list(state.stages_run),
                "last_completed_stage": last,
                "complete": complete,
            },
        )

    last_completed = STAGES[start - 1] if start else None
    persist_run(last_completed, False)
    refine_enabled = strategy.kind is not StrategyKind.NO_REFINEMENT
    complete = True

    for stage in STAGES[start:]:
        try:
            if stage == "conflict":
                state.conflict = generate_conflict(theme, counting)
                if run_path:
                    write_json(run_path / "conflict.json", state.conflict.to_dict())
            elif stage == "climax":
                assert state.conflict is not None
                state.climax = generate_climax(state.conflict, counting)
                if run_path:
                    write_json(run_path / "climax.json", state.climax.to_dict())
            elif stage == "search":
                assert state.conflict is not None and state.climax is not None
                bound = counting.with_context(theme.text, state.conflict.conflict_text)
                outcome = search_outline(
                    strategy, state.climax.event, config.forward, config.backward, bound,
                    theme=theme.text, conflict=state.conflict.conflict_text,
                )
                state.rough = outcome.outline
                state.phase_calls = [_phase_summary(p) for p in outcome.phases]
                state.notes.extend(w for p in outcome.phases for w in p.warnings)
                if run_path:
                    for phase in outcome.phases:
                        name = f"tree_{phase.config.direction.value}.json"
                        write_json(run_path / name, phase.to_dict())
                    write_json(run_path / "rough_outline.json", state.rough.to_dict())
                if not outcome.complete:
                    complete = False
                    raise ProviderError("outline search stopped before its iteration budget")
            elif stage == "refine":
                assert state.rough is not None and state.conflict is not None
                bound = counting.with_context(theme.text, state.conflict.conflict_text)
                if refine_enabled:
                    state.refined = refine_outline(state.rough, bound, theme.id, state.notes)
                else:
                    state.refined = stage_partition(state.rough)
                if run_path:
                    write_json(run_path / "refined_outline.json", state.refined.to_dict())
            elif stage == "fiction":
                assert state.refined is not None and state.conflict is not None
                bound = counting.with_context(theme.text, state.conflict.conflict_text)
                state.segments, failures = generate_fiction(state.refined, bound)
                if failures:
                    complete = False
                    state.notes.extend(failures)
                if run_path:
                    (run_path / "fiction.md").write_text(
                        "".join(state.segments.get(s, "") for s in SEGMENTS), encoding="utf-8"
                    )
        except BitMCTSError as exc:
            persist_run(last_completed, False)
            raise StageFailed(stage, exc, last_completed) from exc
        state.stages_run.append(stage)
        state.timestamps[stage] = clock().isoformat()
        if stage == "fiction" and not complete:
            break
        last_completed = stage
        persist_run(last_completed, False)
        if stage == stop_after:
            complete = stage == STAGES[-1]
            break

    assert state.conflict is not None and state.climax is not None and state.rough is not None
    full_text = "".join(state.segments.get(s, "") for s in SEGMENTS)
    usage = backend.usage() if hasattr(backend, "usage") else {}
    metadata = {
        "strategy": strategy.to_dict(),
        "refinement": refine_enabled,
        "seed": config.seed,
        "stages_run": list(state.stages_run),
        "resumed_from": resume_from,
        "provider_calls": dict(sorted(counting.counts.items())),
        "search_phases": state.phase_calls,
        "token_usage": usage,
        "lengths": {"chars": len(full_text), "whitespace_tokens": len(full_text.split())},
        "timestamps": {"started": started, **state.timestamps},
        "warnings": list(state.notes),
    }
    artifact = FictionArtifact(
        theme=theme,
        conflict=state.conflict,
        climax=state.climax.event,
        rough_outline=state.rough,
        refined_outline=state.refined,
        fiction_segments={s: state.segments.get(s, "") for s in SEGMENTS},
        metadata=metadata,
        complete=complete,
    )
    if run_path:
        write_json(run_path / "metrics.json", {"complete": complete, **metadata})
        persist_run(last_completed if not complete else "fiction", complete)
    return artifact


def _phase_summary(result: Any) -> dict[str, Any]:
    return {
        "direction": result.config.direction.value,
        "iterations_run": result.iterations_run,
        "best_reward": result.best_reward,
        "complete": result.complete,
        "provider_call_counts": dict(sorted(result.provider_call_counts.items())),
    }


def completed_stages(run_dir: str | Path) -> list[str]:
    data = read_json(Path(run_dir) / "run.json")
    last = data.get("last_completed_stage")
    return list(STAGES[: STAGES.index(last) + 1]) if last else []
