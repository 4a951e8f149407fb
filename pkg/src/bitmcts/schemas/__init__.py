"""JSON schemas for the persisted tree, outline and artifact formats."""

from __future__ import annotations

import json
from importlib import resources
from typing import Any


def load_schema(name: str) -> dict[str, Any]:
    """``name`` is one of ``tree``, ``outline``, ``artifact``."""
    text = resources.files(__name__).joinpath(f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)
