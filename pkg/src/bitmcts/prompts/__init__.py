"""Prompt templates shipped as text files, one per stage and language.

Each file holds a ``### system`` and a ``### user`` section. Only the named
placeholders below are substituted, so literal JSON braces survive.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

PLACEHOLDERS = (
    "theme", "conflict", "outline", "direction", "candidates", "climax",
    "fictions", "dimensions", "k",
)
_PATTERN = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: str
    user: str

    def render(self, **values: object) -> list[dict[str, str]]:
        def fill(text: str) -> str:
            return _PATTERN.sub(lambda m: str(values.get(m.group(1), "")), text)

        return [
            {"role": "system", "content": fill(self.system)},
            {"role": "user", "content": fill(self.user)},
        ]


def parse_template(name: str, text: str) -> PromptTemplate:
    match = re.match(r"### system\n(.*?)\n### user\n(.*)\Z", text, re.S)
    if not match:
        raise ValueError(f"template {name!r} lacks system/user sections")
    return PromptTemplate(name=name, system=match.group(1).strip(), user=match.group(2).strip())


@lru_cache(maxsize=None)
def load_template(name: str, language: str = "en", directory: str | None = None) -> PromptTemplate:
    """Load ``<language>/<name>.txt``; falls back to English when missing."""
    for lang in (language, "en"):
        if directory:
            path = Path(directory) / lang / f"{name}.txt"
            if path.exists():
                return parse_template(name, path.read_text(encoding="utf-8"))
        else:
            res = resources.files(__name__).joinpath(lang, f"{name}.txt")
            if res.is_file():
                return parse_template(name, res.read_text(encoding="utf-8"))
    raise FileNotFoundError(f"no prompt template {name!r} for language {language!r}")
