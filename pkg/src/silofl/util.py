"""Small shared helpers: stable hashing and deterministic float formatting."""

from __future__ import annotations

import hashlib
import json


def stable_hash(payload) -> str:
    """16-hex digest of a JSON-able payload, invariant to dict ordering."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def fmt(x) -> str:
    """Shortest round-trip decimal form; stable across runs for CSV output."""
    if isinstance(x, float):
        return repr(x)
    return str(x)
