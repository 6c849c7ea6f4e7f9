"""Counter-based randomness keyed by cell code.

Every retention mark is a pure function of ``(seed, level, linear index)``.
Since a level-n linear index determines the whole ancestry of a cell, this
is the same as keying by the full cell code.
"""

import math

import numba as nb
import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)
_LEVEL_KEY = np.uint64(0xD1B54A32D192ED03)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)

MASK64 = (1 << 64) - 1


@nb.njit(inline="always")
def mix64(x):
    # splitmix64 finalizer applied to x + golden gamma
    x = x + GAMMA
    x = (x ^ (x >> _S30)) * _C1
    x = (x ^ (x >> _S27)) * _C2
    return x ^ (x >> _S31)


def mix64_py(x: int) -> int:
    """Pure-Python twin of :func:`mix64` (used for seeds and in tests)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def level_key(seed: int, level: int) -> int:
    return mix64_py((seed ^ ((level * 0xD1B54A32D192ED03) & MASK64)) & MASK64)


def replication_seed(master: int, index: int) -> int:
    """Seed of replication ``index`` under ``master``."""
    return mix64_py(master ^ mix64_py(index & MASK64))


def threshold(p: float) -> int:
    """Integer threshold t with ``(h >> 11) < t`` iff ``u < p`` for u = (h >> 11) * 2**-53."""
    return min(math.ceil(p * 2.0**53), 1 << 53)


@nb.njit(inline="always")
def retained(key, idx, thr):
    h = mix64(key + np.uint64(idx))
    return (h >> _S11) < thr


def retained_numpy(key: int, idx: np.ndarray, thr: int) -> np.ndarray:
    """Vectorised numpy reference for :func:`retained`."""
    with np.errstate(over="ignore"):
        x = np.uint64(key) + idx.astype(np.uint64) + GAMMA
        x = (x ^ (x >> _S30)) * _C1
        x = (x ^ (x >> _S27)) * _C2
        x = x ^ (x >> _S31)
    return (x >> _S11) < np.uint64(thr)
