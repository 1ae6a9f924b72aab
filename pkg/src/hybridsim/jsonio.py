"""Small shared helpers for JSON documents and canonical hashing."""

from __future__ import annotations

import hashlib
import json
from typing import Any, Mapping


def ensure_mapping(doc: Any, what: str, err_cls: type[Exception]) -> Mapping[str, Any]:
    """Accept a mapping, or a JSON string/bytes encoding one.

    Raises err_cls with a one-line message if the document cannot be parsed
    or is not a JSON object.
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise err_cls(f"{what}: malformed JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, Mapping):
        raise err_cls(f"{what}: document must be a JSON object")
    return doc


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and fixed separators, for stable digests."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_of(obj: Any) -> str:
    """Hex digest of the canonical JSON form of obj."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
