"""Themes, plot events, outlines and Freytag staging.

Outlines are immutable values: ``append_event`` and ``prepend_event`` return
new outlines and never touch their input.
"""

from __future__ import annotations

import hashlib
import uuid
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Sequence

from bitmcts.errors import InvariantViolation


class Origin(str, Enum):
    CLIMAX = "climax"
    FORWARD_SEARCH = "forward-search"
    BACKWARD_SEARCH = "backward-search"
    SIMULATION = "simulation"
    REFINEMENT_OPENING = "refinement-opening"
    REFINEMENT_CLOSING = "refinement-closing"
    REFINEMENT_EDIT = "refinement-edit"
    DIRECT = "direct"


class Stage(str, Enum):
    EXPOSITION = "exposition"
    RISING_ACTION = "rising-action"
    CLIMAX = "climax"
    FALLING_ACTION = "falling-action"
    RESOLUTION = "resolution"


class Direction(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


def derive_id(*parts: Any) -> str:
    """Stable UUID-shaped identifier derived from arbitrary parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return str(uuid.UUID(bytes=digest[:16], version=4))


@dataclass(frozen=True)
class Theme:
    text: str
    id: str = ""

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError("theme text must be non-empty")
        if not self.id:
            object.__setattr__(self, "id", "theme-" + derive_id("theme", self.text.strip())[:8])


@dataclass(frozen=True)
class PlotEvent:
    id: str
    text: str
    origin: Origin

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError("plot event text must be non-empty")
        if not self.id:
            raise ValueError("plot event id must be non-empty")
        object.__setattr__(self, "origin", Origin(self.origin))

    def to_dict(self) -> dict[str, str]:
        return {"id": self.id, "text": self.text, "origin": self.origin.value}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PlotEvent:
        return cls(id=data["id"], text=data["text"], origin=Origin(data["origin"]))


def normalize_text(text: str) -> str:
    return " ".join(text.split()).casefold()


@dataclass(frozen=True)
class Outline:
    events: tuple[PlotEvent, ...]
    climax_index: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "events", tuple(self.events))
        if not self.events:
            raise InvariantViolation("an outline holds at least one event")
        if not 0 <= self.climax_index < len(self.events):
            raise InvariantViolation(
                f"climax_index {self.climax_index} outside [0, {len(self.events)})"
            )
        ids = [e.id for e in self.events]
        if len(set(ids)) != len(ids):
            raise InvariantViolation("event ids within an outline must be distinct")

    @classmethod
    def root(cls, climax: PlotEvent) -> Outline:
        return cls(events=(climax,), climax_index=0)

    def __len__(self) -> int:
        return len(self.events)

    @property
    def climax(self) -> PlotEvent:
        return self.events[self.climax_index]

    @property
    def texts(self) -> list[str]:
        return [e.text for e in self.events]

    def contains_id(self, event_id: str) -> bool:
        return any(e.id == event_id for e in self.events)

    def to_dict(self) -> dict[str, Any]:
        return {"events": [e.to_dict() for e in self.events], "climax_index": self.climax_index}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Outline:
        return cls(
            events=tuple(PlotEvent.from_dict(e) for e in data["events"]),
            climax_index=int(data["climax_index"]),
        )


class DuplicateEventError(ValueError):
    """An event id is already present in the outline."""


def append_event(outline: Outline, event: PlotEvent) -> Outline:
    if outline.contains_id(event.id):
        raise DuplicateEventError(f"event {event.id} already in outline")
    return Outline(events=outline.events + (event,), climax_index=outline.climax_index)


def prepend_event(event: PlotEvent, outline: Outline) -> Outline:
    if outline.contains_id(event.id):
        raise DuplicateEventError(f"event {event.id} already in outline")
    return Outline(events=(event,) + outline.events, climax_index=outline.climax_index + 1)


def extend(outline: Outline, event: PlotEvent, direction: Direction | str) -> Outline:
    """Append for forward search, prepend for backward search."""
    if Direction(direction) is Direction.FORWARD:
        return append_event(outline, event)
    return prepend_event(event, outline)


@dataclass(frozen=True)
class StagedOutline:
    outline: Outline
    stage_labels: tuple[Stage, ...]

    def __post_init__(self) -> None:
        labels = tuple(Stage(s) for s in self.stage_labels)
        object.__setattr__(self, "stage_labels", labels)
        if len(labels) != len(self.outline):
            raise InvariantViolation("one stage label per event")
        ci = self.outline.climax_index
        if [i for i, s in enumerate(labels) if s is Stage.CLIMAX] != [ci]:
            raise InvariantViolation("exactly one climax label, at climax_index")
        for i, s in enumerate(labels):
            if s in (Stage.EXPOSITION, Stage.RISING_ACTION) and i > ci:
                raise InvariantViolation(f"{s.value} label after the climax at {i}")
            if s in (Stage.FALLING_ACTION, Stage.RESOLUTION) and i < ci:
                raise InvariantViolation(f"{s.value} label before the climax at {i}")

    def to_dict(self) -> dict[str, Any]:
        return {**self.outline.to_dict(), "stage_labels": [s.value for s in self.stage_labels]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StagedOutline:
        return cls(outline=Outline.from_dict(data), stage_labels=tuple(data["stage_labels"]))

    def by_stage(self) -> dict[Stage, list[PlotEvent]]:
        grouped: dict[Stage, list[PlotEvent]] = {s: [] for s in Stage}
        for event, label in zip(self.outline.events, self.stage_labels):
            grouped[label].append(event)
        return grouped


def stage_partition(outline: Outline) -> StagedOutline:
    """Label every event with its Freytag stage.

    Exposition and resolution are reserved for the refinement bookends: the
    first event is exposition only when it is a refinement opening, the last
    is resolution only when it is a refinement closing. Everything else before
    the climax is rising action, everything after is falling action.
    """
    ci = outline.climax_index
    labels: list[Stage] = []
    for i, event in enumerate(outline.events):
        if i == ci:
            labels.append(Stage.CLIMAX)
        elif i < ci:
            if i == 0 and event.origin is Origin.REFINEMENT_OPENING:
                labels.append(Stage.EXPOSITION)
            else:
                labels.append(Stage.RISING_ACTION)
        else:
            if i == len(outline) - 1 and event.origin is Origin.REFINEMENT_CLOSING:
                labels.append(Stage.RESOLUTION)
            else:
                labels.append(Stage.FALLING_ACTION)
    return StagedOutline(outline=outline, stage_labels=tuple(labels))


def render_outline(outline: Outline | StagedOutline, labels: bool = False) -> str:
    """Numbered plain-text rendering used inside prompts."""
    staged = outline if isinstance(outline, StagedOutline) else None
    events: Sequence[PlotEvent] = (staged.outline if staged else outline).events
    lines = []
    for i, event in enumerate(events):
        prefix = f"{i + 1}. "
        if labels and staged is not None:
            prefix += f"[{staged.stage_labels[i].value}] "
        lines.append(prefix + " ".join(event.text.split()))
    return "\n".join(lines)


def make_events(texts: Iterable[str], origin: Origin, *salt: Any) -> list[PlotEvent]:
    """Wrap raw texts as events with ids derived from ``salt`` and position."""
    return [
        PlotEvent(id=derive_id(*salt, i, text), text=text, origin=origin)
        for i, text in enumerate(texts)
    ]
