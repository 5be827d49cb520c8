"""JSON checkpoints: every array stored with its shape next to the flat data."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT = "riskoracle-checkpoint"
VERSION = 1


def dumps(kind: str, arrays: dict, meta: dict | None = None) -> str:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "meta": meta or {},
        "arrays": {name: {"shape": list(np.shape(a)),
                          "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
                   for name, a in arrays.items()},
    }
    return json.dumps(payload, sort_keys=True)


def save(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    Path(path).write_text(dumps(kind, arrays, meta))


def load(path, kind: str | None = None) -> tuple:
    """Returns ``(arrays, meta)``; checks format, version and kind."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != FORMAT or payload.get("version") != VERSION:
        raise DataError(f"{path} is not a version-{VERSION} {FORMAT}")
    if kind is not None and payload.get("kind") != kind:
        raise DataError(f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    arrays = {name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
              for name, entry in payload["arrays"].items()}
    return arrays, payload["meta"]
