"""Atomic, canonical file output helpers.

Every artifact is written as temp-file-plus-rename so a crashed run never
leaves a half-written file, and JSON is serialized canonically (sorted keys,
fixed separators) so identical data produces identical bytes.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, separators=(",", ": ")) + "\n"


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str | Path, obj) -> None:
    atomic_write_text(path, dumps_canonical(obj))


def read_json(path: str | Path):
    with open(path) as fh:
        return json.load(fh)
