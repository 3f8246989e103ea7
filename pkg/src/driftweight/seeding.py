"""Deterministic per-component seeds derived from one root seed."""

import zlib

import numpy as np


def derive_seed(root: int, component: str) -> int:
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


def rng_for(root: int, component: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, component))
