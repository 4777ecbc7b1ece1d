"""Binary P5 greymap export of decoded patches.

Mapping: -1 -> 0, 0 -> 128, +1 -> 255, row-major, maxval 255.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

_LEVELS = {-1: 0, 0: 128, 1: 255}
_INVERSE = {v: k for k, v in _LEVELS.items()}


def encode_pgm(decoded: np.ndarray) -> bytes:
    """Serialize a {-1, 0, +1} matrix as a binary P5 greymap."""
    decoded = np.asarray(decoded)
    if decoded.ndim != 2:
        raise ConfigError("decoded patch must be a matrix")
    if not np.all(np.isin(decoded, (-1, 0, 1))):
        raise ConfigError("decoded entries must be in {-1, 0, +1}")
    h, w = decoded.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    payload = np.vectorize(_LEVELS.__getitem__)(decoded.astype(int)).astype(np.uint8)
    return header + payload.tobytes()


def write_pgm(decoded: np.ndarray, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(decoded))


def read_pgm(path: str) -> np.ndarray:
    """Inverse of write_pgm; rejects files not produced by it."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ConfigError(f"{path}: not a P5 file written by this package")
    w, h = (int(x) for x in parts[1].split())
    payload = np.frombuffer(parts[3], dtype=np.uint8)
    if payload.size != w * h:
        raise ConfigError(f"{path}: payload size {payload.size} != {w}x{h}")
    bad = set(np.unique(payload)) - set(_INVERSE)
    if bad:
        raise ConfigError(f"{path}: unexpected grey levels {sorted(bad)}")
    values = np.vectorize(_INVERSE.__getitem__)(payload)
    return values.reshape(h, w).astype(np.float64)
