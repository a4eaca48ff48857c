"""Deterministic derivation of independent random streams from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def derive_seed(root: int, *keys) -> int:
    seq = np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF, *(_key(k) for k in keys)])
    return int(seq.generate_state(2, dtype=np.uint64)[0])


def make_rng(root: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
