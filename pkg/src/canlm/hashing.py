"""Deterministic hashing helpers used to chain pipeline artifacts."""

import hashlib
import json


def canonical_json(obj) -> str:
    """Serialize to a canonical JSON string (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest(obj) -> str:
    """sha256 hex digest of an object's canonical JSON form."""
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
