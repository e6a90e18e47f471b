"""Named, order-independent random streams derived from one root seed."""

from __future__ import annotations

import zlib
from typing import Iterable

import numpy as np

#: Stream names used by the search loops and the synthetic target.
STREAMS = ("random", "beam-order", "ts-pool", "ts-draw", "target", "validate", "recognition")


def _word(part: str | int) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("seed components must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(root: int, *path: str | int) -> np.random.SeedSequence:
    """A SeedSequence keyed by ``path`` (names, integers or concept ids)."""
    return np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_word(p) for p in path))


def stream(root: int, *path: str | int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root, *path))


def derive_int(root: int, *path: str | int) -> int:
    """A 63-bit integer seed for ``path``; stable across runs and platforms."""
    hi, lo = seed_sequence(root, *path).generate_state(2, np.uint32)
    return (int(hi) << 31) ^ int(lo)


def set_path(concepts: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(set(concepts)))
