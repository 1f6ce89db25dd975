"""Small shared helpers: seeded RNG derivation and canonical JSON."""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Derive an independent Generator from a base seed and a tag path.

    Tags may be ints or strings; strings are hashed so the derivation is
    stable across runs and platforms.
    """
    keys = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            digest = hashlib.sha256(tag.encode("utf-8")).digest()
            keys.append(int.from_bytes(digest[:4], "little"))
        else:
            keys.append(int(tag) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(keys))


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace drift)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint(obj: Any) -> str:
    """sha256 hex digest of an object's canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
