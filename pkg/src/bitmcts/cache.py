"""Content-addressed store for raw provider responses.

Each response lives in ``<root>/<digest[:2]>/<digest>.json``. Writes go to a
unique temp file and are renamed into place, so concurrent puts of the same
key always leave one complete file.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any


@dataclass(frozen=True)
class CacheKey:
    digest: str

    @classmethod
    def build(
        cls,
        backend: str,
        model: str,
        prompt: Any,
        temperature: float,
        ordinal: str | int = 0,
    ) -> CacheKey:
        payload = json.dumps(
            {
                "backend": backend,
                "model": model,
                "prompt": prompt,
                "temperature": float(temperature),
                "ordinal": str(ordinal),
            },
            sort_keys=True,
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return cls(hashlib.sha256(payload.encode("utf-8")).hexdigest())

    def __str__(self) -> str:
        return self.digest


class ResponseCache:
    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def path_for(self, key: CacheKey) -> Path:
        return self.root / key.digest[:2] / f"{key.digest}.json"

    def get(self, key: CacheKey) -> str | None:
        path = self.path_for(key)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            with self._lock:
                self.misses += 1
            return None
        except OSError as exc:
            raise OSError(f"reading cache entry {path}: {exc}") from exc
        with self._lock:
            self.hits += 1
        return json.loads(raw)["response"]

    def put(self, key: CacheKey, response: str) -> None:
        path = self.path_for(key)
        body = json.dumps({"key": key.digest, "response": response}, ensure_ascii=False)
        with self._lock:
            if path.exists():
                return
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(body)
                os.replace(tmp, path)
            except OSError as exc:
                raise OSError(f"writing cache entry {path}: {exc}") from exc

    def __len__(self) -> int:
        if not self.root.exists():
            return 0
        return sum(1 for _ in self.root.glob("*/*.json"))
