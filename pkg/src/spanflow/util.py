"""Seeding, counter-based uniform draws, and checkpoint I/O."""
from __future__ import annotations

import hashlib
import io
import json
from typing import Any

import numpy as np

CHECKPOINT_VERSION = 1


def derive_seed(root_seed: int, *names) -> int:
    """Stable 63-bit child seed for a named subsystem/stream."""
    key = f"{root_seed}|" + "|".join(str(n) for n in names)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def counter_uniform(*key) -> float:
    """Uniform [0,1) draw that is a pure function of the key.

    Used where reproducibility must not depend on evaluation order.
    """
    digest = hashlib.sha256(repr(tuple(key)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned container of named tensors; round-trips bit-exactly."""
    payload = dict(meta)
    payload["checkpoint_version"] = CHECKPOINT_VERSION
    meta_bytes = canonical_json(payload).encode("utf-8")
    store = {f"t.{name}": arr for name, arr in arrays.items()}
    store["__meta__"] = np.frombuffer(meta_bytes, dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **store)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = np.load(io.BytesIO(fh.read()))
    meta = json.loads(bytes(blob["__meta__"]).decode("utf-8"))
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    arrays = {
        name[2:]: blob[name] for name in blob.files if name.startswith("t.")
    }
    return arrays, meta
