"""Canonical JSON encoding and versioned documents.

Floats are written as decimals with 17 significant digits, which round-trips
every IEEE-754 double exactly.  Object keys keep insertion order, so the byte
output is a pure function of the value being written.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .errors import PersistIOError, SchemaError, VersionError

SCHEMA_VERSION = 1


def _encode_float(x: float) -> str:
    if not math.isfinite(x):
        raise SchemaError(f"non-finite float {x!r} cannot be serialised")
    text = f"{x:.17g}"
    if "e" not in text and "." not in text and "n" not in text:
        text += ".0"
    return text


def _encode(obj: Any, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, (int, np.integer)) and not isinstance(obj, (bool, np.bool_)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_encode_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, np.ndarray):
        _encode(obj.tolist(), out)
    elif isinstance(obj, Mapping):
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if not isinstance(k, str):
                raise SchemaError(f"object keys must be strings, got {k!r}")
            if i:
                out.append(",")
            out.append(json.dumps(k, ensure_ascii=True))
            out.append(":")
            _encode(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _encode(v, out)
        out.append("]")
    else:
        raise SchemaError(f"cannot serialise object of type {type(obj).__name__}")


def dumps(obj: Any) -> str:
    """Canonical compact JSON text for ``obj``."""
    out: list[str] = []
    _encode(obj, out)
    return "".join(out)


def content_hash(obj: Any) -> str:
    """SHA-256 hex digest of the canonical encoding."""
    return hashlib.sha256(dumps(obj).encode()).hexdigest()


def write_text(path: str | os.PathLike, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise PersistIOError(f"cannot write {path}: {exc}") from exc


def read_text(path: str | os.PathLike) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise PersistIOError(f"cannot read {path}: {exc}") from exc


def document(kind: str, body: Mapping[str, Any]) -> dict[str, Any]:
    return {"version": SCHEMA_VERSION, "kind": kind, **body}


def save_document(path: str | os.PathLike, kind: str, body: Mapping[str, Any]) -> None:
    write_text(path, dumps(document(kind, body)) + "\n")


def parse_document(text: str, kind: str | Iterable[str]) -> dict[str, Any]:
    """Parse and check the ``version``/``kind`` envelope of a document."""
    kinds = {kind} if isinstance(kind, str) else set(kind)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"corrupted payload: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("document root must be an object")
    if "version" not in doc:
        raise SchemaError("document has no version field")
    if doc["version"] != SCHEMA_VERSION:
        raise VersionError(f"unsupported schema version {doc['version']!r} (expected {SCHEMA_VERSION})")
    if doc.get("kind") not in kinds:
        raise SchemaError(f"expected document kind in {sorted(kinds)}, got {doc.get('kind')!r}")
    return doc


def load_document(path: str | os.PathLike, kind: str | Iterable[str]) -> dict[str, Any]:
    return parse_document(read_text(path), kind)


def require(doc: Mapping[str, Any], key: str) -> Any:
    if key not in doc:
        raise SchemaError(f"missing field {key!r}")
    return doc[key]


def as_array(value: Any, shape: tuple[int, ...], dtype=float, name: str = "array") -> np.ndarray:
    """Convert a nested list to an array of exactly ``shape``."""
    try:
        arr = np.asarray(value, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{name}: not a numeric array ({exc})") from exc
    if arr.shape != tuple(shape):
        raise SchemaError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
    if dtype is float and not np.all(np.isfinite(arr)):
        raise SchemaError(f"{name}: contains non-finite values")
    return arr
