"""Atomic JSON/CSV/text artifact I/O shared by checkpoints, suites and reports."""

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Union

from .errors import ArtifactError, CommonErrors

PathLike = Union[str, Path]


def write_text_atomic(path: PathLike, text: str) -> Path:
    """Write to a temp file in the target directory, then rename over the target"""
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    except OSError as e:
        raise ArtifactError(f"Cannot write {target}: {e}", path=str(target), missing=False) from e
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return target


def dumps_json(payload: Any) -> str:
    # repr-based float output round-trips doubles exactly
    return json.dumps(payload, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json_atomic(path: PathLike, payload: Any) -> Path:
    return write_text_atomic(path, dumps_json(payload))


def read_json(path: PathLike) -> Any:
    source = Path(path)
    if not source.exists():
        raise CommonErrors.file_not_found(str(source))
    with open(source, "r", encoding="utf-8") as f:
        return json.load(f)
