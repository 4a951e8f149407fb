"""Provider-facing types and the interfaces every backend implements."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence, runtime_checkable

from bitmcts.narrative import Direction, Outline, PlotEvent, StagedOutline

log = logging.getLogger(__name__)

# Canonical keys for the ten evaluator dimensions, in prompt order.
SCORE_DIMENSIONS: tuple[str, ...] = (
    "character_development",
    "setting",
    "consistency",
    "relatedness",
    "causal_temporal",
    "theme",
    "readability",
    "creativity",
    "major_flaws",
    "overall_quality",
)

# Comparative-judge dimensions (win-rate tables).
JUDGE_DIMENSIONS: tuple[str, ...] = (
    "narrative_complexity",
    "creativity",
    "emotional_resonance",
    "plot_structure",
    "character_development",
    "setting_description",
    "grammaticality",
    "fluency",
    "diversity",
    "overall_quality",
)
THEMATIC_EXPRESSION = "thematic_expression"

DEFAULT_TEMPERATURES: dict[str, float] = {
    "conflict": 0.4,
    "conflict_screening": 0.3,
    "climax": 0.4,
    "climax_screening": 0.3,
    "plot_generation": 0.3,
    "evaluation": 0.0,
    "refinement": 0.3,
    "critic": 0.0,
    "fiction": 0.7,
    "direct": 0.3,
    "judge": 0.0,
}


@dataclass(frozen=True)
class ProposeRequest:
    """Ask the plot writer for up to ``k`` one-step extensions of ``outline``.

    ``sample`` 0 requests the ranked expansion list; ``sample`` n >= 1 is the
    n-th independent rollout draw and salts caching/sampling accordingly.
    """

    outline: Outline
    direction: Direction
    k: int
    temperature: float = 0.3
    sample: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.k < 1:
            raise ValueError("k must be positive")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")


@dataclass(frozen=True)
class ScoreBreakdown:
    per_dimension: Mapping[str, int]
    total: float

    @classmethod
    def from_dimensions(cls, scores: Mapping[str, int]) -> ScoreBreakdown:
        missing = [d for d in SCORE_DIMENSIONS if d not in scores]
        if missing:
            raise ValueError(f"missing dimensions: {missing}")
        clamped = {d: min(10, max(1, int(scores[d]))) for d in SCORE_DIMENSIONS}
        return cls(per_dimension=clamped, total=sum(clamped.values()) / 10.0)

    @classmethod
    def uniform(cls, total: float) -> ScoreBreakdown:
        """Breakdown for analytic scorers: every dimension is the rounded total."""
        total = min(10.0, max(0.0, float(total)))
        level = min(10, max(1, round(total)))
        return cls(per_dimension={d: level for d in SCORE_DIMENSIONS}, total=total)

    def to_dict(self) -> dict[str, Any]:
        return {"per_dimension": dict(self.per_dimension), "total": self.total}


@dataclass(frozen=True)
class Judgment:
    """Per-dimension picks over the fictions in presentation order."""

    best: Mapping[str, int]
    worst: Mapping[str, int] | None = None
    raw: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "best": dict(self.best),
            "worst": dict(self.worst) if self.worst is not None else None,
            "raw": self.raw,
        }


@dataclass(frozen=True)
class EditOp:
    op: str  # keep | move | insert | delete
    index: int | None = None
    to: int | None = None
    at: int | None = None
    text: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class DirectOutline:
    events: Sequence[str]
    climax_position: int


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff: float = 1.0
    parse_retries: int = 2


@dataclass
class ProviderProfile:
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    api_key_env: str = "OPENAI_API_KEY"
    temperatures: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TEMPERATURES))
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout: float = 120.0
    max_in_flight: int = 4
    language: str = "en"

    def temperature(self, stage: str) -> float:
        return self.temperatures.get(stage, DEFAULT_TEMPERATURES[stage])

    def to_dict(self) -> dict[str, Any]:
        return {
            "endpoint": self.endpoint,
            "model": self.model,
            "api_key_env": self.api_key_env,
            "temperatures": dict(sorted(self.temperatures.items())),
            "retry": dict(self.retry.__dict__),
            "timeout": self.timeout,
            "max_in_flight": self.max_in_flight,
            "language": self.language,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ProviderProfile:
        data = dict(data)
        temps = dict(DEFAULT_TEMPERATURES)
        temps.update(data.pop("temperatures", None) or {})
        retry = RetryPolicy(**(data.pop("retry", None) or {}))
        return cls(temperatures=temps, retry=retry, **data)


@runtime_checkable
class Proposer(Protocol):
    def propose(self, request: ProposeRequest) -> list[PlotEvent]: ...


@runtime_checkable
class Evaluator(Protocol):
    def score(self, outline: Outline) -> ScoreBreakdown: ...


class Backend(Proposer, Evaluator, Protocol):
    """Everything the four-stage pipeline asks of a model."""

    def with_context(self, theme: str, conflict: str = "") -> Backend: ...

    def generate_conflicts(self, theme: str) -> list[str]: ...

    def screen(self, candidates: Sequence[str], criterion: str) -> int: ...

    def generate_climaxes(self, theme: str, conflict: str) -> list[str]: ...

    def generate_bookends(self, outline: Outline) -> tuple[str, str]: ...

    def critique(self, outline: Outline) -> list[EditOp]: ...

    def write_segment(self, outline: StagedOutline, segment: str) -> str: ...

    def direct_outline(self, theme: str, conflict: str, climax: str) -> DirectOutline: ...

    def judge_comparative(
        self, fictions: Sequence[str], dimensions: Sequence[str]
    ) -> Judgment: ...


class CountingBackend:
    """Delegating wrapper that tallies calls per operation."""

    def __init__(self, inner: Any) -> None:
        self._inner = inner
        self.counts: dict[str, int] = {}

    def __getattr__(self, name: str) -> Any:
        attr = getattr(self._inner, name)
        if not callable(attr) or name.startswith("_"):
            return attr
        if name == "with_context":
            def rebind(*args: Any, **kwargs: Any) -> CountingBackend:
                wrapped = CountingBackend(attr(*args, **kwargs))
                wrapped.counts = self.counts
                return wrapped
            return rebind

        def counted(*args: Any, **kwargs: Any) -> Any:
            self.counts[name] = self.counts.get(name, 0) + 1
            return attr(*args, **kwargs)

        return counted

    @property
    def inner(self) -> Any:
        return self._inner
