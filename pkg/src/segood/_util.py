"""Small helpers shared across modules: canonical JSON, hashing, atomic
writes, seeded per-image random streams."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def canonical_json(obj) -> str:
    """Serialize with sorted keys and no whitespace so equal objects always
    produce equal bytes. Floats use repr, which round-trips float64 exactly."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_of_json(obj) -> str:
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def atomic_write_bytes(path: Path | str, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over the
    destination. Readers never observe a half-written file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: Path | str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def fmt_float(x: float) -> str:
    """17 significant digits: enough to round-trip any float64."""
    return format(float(x), ".17g")


def image_rng(seed: int, image_key: int, stream: int) -> np.random.Generator:
    """Generator keyed by (seed, image, purpose) so random draws do not
    depend on the order images are processed in."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(image_key), int(stream)]))
