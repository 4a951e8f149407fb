"""Run configuration (a YAML file mirroring ``RunConfig``), backend factory and logging."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from bitmcts.baselines import StrategySpec
from bitmcts.engine import SearchConfig
from bitmcts.errors import ConfigError
from bitmcts.narrative import Direction
from bitmcts.providers.base import ProviderProfile

PROVIDERS = ("synthetic", "llm")
VERBOSITY = ("debug", "info", "warning", "error")


@dataclass(frozen=True)
class RunConfig:
    themes: tuple[str, ...] = ()
    provider: str = "synthetic"
    profile: ProviderProfile = field(default_factory=ProviderProfile)
    synthetic: dict[str, Any] = field(default_factory=dict)
    forward: SearchConfig = field(default_factory=lambda: SearchConfig(direction=Direction.FORWARD))
    backward: SearchConfig = field(default_factory=lambda: SearchConfig(direction=Direction.BACKWARD))
    strategy: StrategySpec = field(default_factory=StrategySpec)
    output_dir: str = "runs"
    cache_dir: str = ".bitmcts-cache"
    verbosity: str = "info"
    seed: int = 0
    offline: bool = False

    def __post_init__(self) -> None:
        if self.provider not in PROVIDERS:
            raise ConfigError(f"provider must be one of {PROVIDERS}, got {self.provider!r}")
        if self.verbosity not in VERBOSITY:
            raise ConfigError(f"verbosity must be one of {VERBOSITY}, got {self.verbosity!r}")
        if self.forward.direction is not Direction.FORWARD:
            raise ConfigError("forward search config must have direction 'forward'")
        if self.backward.direction is not Direction.BACKWARD:
            raise ConfigError("backward search config must have direction 'backward'")

    def to_dict(self) -> dict[str, Any]:
        return {
            "themes": list(self.themes),
            "provider": self.provider,
            "profile": self.profile.to_dict(),
            "synthetic": dict(sorted(self.synthetic.items())),
            "forward": self.forward.to_dict(),
            "backward": self.backward.to_dict(),
            "strategy": self.strategy.to_dict(),
            "output_dir": self.output_dir,
            "cache_dir": self.cache_dir,
            "verbosity": self.verbosity,
            "seed": self.seed,
            "offline": self.offline,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs: dict[str, Any] = dict(data)
        try:
            if "themes" in kwargs:
                themes = kwargs["themes"]
                kwargs["themes"] = (themes,) if isinstance(themes, str) else tuple(themes)
            if "profile" in kwargs:
                kwargs["profile"] = ProviderProfile.from_dict(kwargs["profile"] or {})
            for name, direction in (("forward", Direction.FORWARD), ("backward", Direction.BACKWARD)):
                if name in kwargs:
                    section = dict(kwargs[name] or {})
                    section.setdefault("direction", direction)
                    kwargs[name] = SearchConfig.from_dict(section)
            if "strategy" in kwargs:
                strategy = kwargs["strategy"]
                kwargs["strategy"] = (
                    StrategySpec(kind=strategy) if isinstance(strategy, str)
                    else StrategySpec.from_dict(strategy or {})
                )
            if "synthetic" in kwargs:
                kwargs["synthetic"] = dict(kwargs["synthetic"] or {})
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    def with_seed(self, seed: int) -> RunConfig:
        return replace(
            self,
            seed=seed,
            forward=replace(self.forward, seed=seed),
            backward=replace(self.backward, seed=seed),
        )


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data)


def http_transport() -> Any:
    """Transport handed to the chat client; tests substitute a mock here."""
    return None


def make_backend(config: RunConfig) -> Any:
    if config.provider == "synthetic":
        from bitmcts.providers.synthetic import SyntheticBackend

        options = dict(config.synthetic)
        options.setdefault("seed", config.seed)
        try:
            return SyntheticBackend(**options)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"invalid synthetic provider options: {exc}") from exc

    from bitmcts.cache import ResponseCache
    from bitmcts.providers.llm import ChatClient, LLMBackend

    client = ChatClient(
        config.profile,
        cache=ResponseCache(config.cache_dir),
        offline=config.offline,
        transport=http_transport(),
    )
    return LLMBackend(client)


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "level": record.levelname.lower(),
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry, ensure_ascii=False)


def setup_logging(verbosity: str = "info", stream: Any = None) -> None:
    """JSON lines at debug level, plain progress lines otherwise."""
    handler = logging.StreamHandler(stream or sys.stderr)
    if verbosity == "debug":
        handler.setFormatter(JsonLineFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("bitmcts")
    root.handlers[:] = [handler]
    root.setLevel(verbosity.upper())
    root.propagate = False
