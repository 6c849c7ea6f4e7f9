"""Generation of fractal percolation construction steps F_0 ⊇ F_1 ⊇ ... ⊇ F_n.

Cells of level n live on the lattice {0, ..., M^n - 1}^d and are addressed by
their row-major linear index (first axis most significant).  Each retention
mark is a pure function of (seed, level, index), so any subtree can be
regenerated on its own and batches can be generated in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterator, Sequence

import numba as nb
import numpy as np

from . import _hash
from ._hash import mix64, retained

DEFAULT_CELL_BUDGET = 2**31
SPARSE_DENSITY = 1 / 64


class CapacityError(RuntimeError):
    """A requested lattice exceeds the configured cell budget."""


@dataclass(frozen=True)
class ModelParams:
    d: int
    M: int
    p: float
    n_max: int = 0
    seed: int = 0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension must be an integer >= 1, got {self.d!r}")
        if int(self.M) != self.M or self.M < 2:
            raise ValueError(f"subdivision factor must be an integer >= 2, got {self.M!r}")
        if not (0.0 < self.p <= 1.0):
            raise ValueError(f"retention probability must lie in (0, 1], got {self.p!r}")
        if int(self.n_max) != self.n_max or self.n_max < 0:
            raise ValueError(f"n_max must be an integer >= 0, got {self.n_max!r}")
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "p", float(self.p))

    @property
    def mean_offspring(self) -> float:
        return self.M**self.d * self.p

    @property
    def D(self) -> float:
        """Similarity dimension log(M^d p) / log M."""
        return math.log(self.mean_offspring) / math.log(self.M)

    @property
    def supercritical(self) -> bool:
        return self.mean_offspring > 1.0

    def cells(self, level: int) -> int:
        return self.M ** (self.d * level)


def check_budget(params: ModelParams, cell_budget: int = DEFAULT_CELL_BUDGET) -> None:
    cells = params.cells(params.n_max)
    if cells > cell_budget:
        raise CapacityError(
            f"level {params.n_max} lattice has {cells} cells (M={params.M}, d={params.d}), "
            f"budget is {cell_budget}"
        )


class CellGrid:
    """Occupancy of the level-``level`` lattice.

    Stored as a packed bitset when dense and as sorted linear indices when
    the occupied fraction drops below ``SPARSE_DENSITY``.
    """

    __slots__ = ("d", "M", "level", "count", "_bits", "_codes")

    def __init__(self, d: int, M: int, level: int, indices: np.ndarray, storage: str = "auto"):
        self.d = d
        self.M = M
        self.level = level
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size > 1 and np.any(idx[1:] <= idx[:-1]):
            idx = np.unique(idx)
        if idx.size and (idx[0] < 0 or idx[-1] >= self.n_cells):
            raise ValueError("cell index outside the lattice")
        self.count = int(idx.size)
        if storage == "auto":
            storage = "sparse" if self.count < SPARSE_DENSITY * self.n_cells else "dense"
        if storage == "sparse":
            self._codes = idx
            self._bits = None
        elif storage == "dense":
            mask = np.zeros(self.n_cells, dtype=bool)
            mask[idx] = True
            self._bits = np.packbits(mask)
            self._codes = None
        else:
            raise ValueError(f"unknown storage {storage!r}")

    @classmethod
    def full(cls, d: int, M: int, level: int) -> "CellGrid":
        return cls(d, M, level, np.arange(M ** (d * level), dtype=np.int64))

    @classmethod
    def from_dense(cls, occupancy: np.ndarray, M: int, level: int) -> "CellGrid":
        occupancy = np.asarray(occupancy, dtype=bool)
        side = M**level
        if occupancy.shape != (side,) * occupancy.ndim:
            raise ValueError(f"expected a cubic array of side {side}, got {occupancy.shape}")
        return cls(occupancy.ndim, M, level, np.flatnonzero(occupancy))

    @property
    def side_count(self) -> int:
        return self.M**self.level

    @property
    def n_cells(self) -> int:
        return self.side_count**self.d

    @property
    def cell_side(self) -> Fraction:
        return Fraction(1, self.side_count)

    @property
    def is_sparse(self) -> bool:
        return self._codes is not None

    def indices(self) -> np.ndarray:
        """Sorted linear indices of occupied cells."""
        if self._codes is not None:
            return self._codes
        return np.flatnonzero(np.unpackbits(self._bits, count=self.n_cells)).astype(np.int64)

    def coords(self) -> np.ndarray:
        """(count, d) integer coordinates of occupied cells."""
        idx = self.indices()
        return np.stack(np.unravel_index(idx, (self.side_count,) * self.d), axis=-1).astype(np.int64)

    def to_dense(self) -> np.ndarray:
        mask = np.zeros(self.n_cells, dtype=bool)
        mask[self.indices()] = True
        return mask.reshape((self.side_count,) * self.d)

    def __eq__(self, other):
        if not isinstance(other, CellGrid):
            return NotImplemented
        return (self.d, self.M, self.level) == (other.d, other.M, other.level) and np.array_equal(
            self.indices(), other.indices()
        )

    def __repr__(self):
        kind = "sparse" if self.is_sparse else "dense"
        return f"CellGrid(d={self.d}, M={self.M}, level={self.level}, count={self.count}, {kind})"


@dataclass(frozen=True, eq=False)
class Realization:
    params: ModelParams
    grids: tuple[CellGrid, ...]

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(g.count for g in self.grids)

    def __eq__(self, other):
        if not isinstance(other, Realization):
            return NotImplemented
        return self.params == other.params and all(a == b for a, b in zip(self.grids, other.grids))


# ---------------------------------------------------------------------------
# kernels


@nb.njit(cache=True, nogil=True)
def _child_layout(parents, d, M, side):
    """Linear index of each parent's first child and the offsets of all M^d children."""
    cs = side * M
    md = M**d
    rel = np.zeros(md, np.int64)
    for o in range(md):
        y = o
        stride = 1
        for a in range(d - 1, -1, -1):
            rel[o] += (y % M) * stride
            y //= M
            stride *= cs
    base = np.empty(parents.size, np.int64)
    for i in range(parents.size):
        x = parents[i]
        b = 0
        stride = 1
        for a in range(d - 1, -1, -1):
            b += (x % side) * M * stride
            x //= side
            stride *= cs
        base[i] = b
    return base, rel


@nb.njit(cache=True, nogil=True)
def _count_children(offsets, parents, d, M, side, keys, thr):
    """Number of retained children per replication, without materializing them."""
    base, rel = _child_layout(parents, d, M, side)
    nrep = offsets.size - 1
    counts = np.zeros(nrep, np.int64)
    for r in range(nrep):
        key = keys[r]
        c = 0
        for i in range(offsets[r], offsets[r + 1]):
            b = base[i]
            for o in range(rel.size):
                c += retained(key, b + rel[o], thr)
        counts[r] = c
    return counts


@nb.njit(cache=True, nogil=True)
def _grow(offsets, parents, d, M, side, keys, thr, sort):
    """Children of every occupied parent, segment by segment.

    ``offsets`` delimits the parents of each replication (CSR layout) and
    ``keys[r]`` is the level key of replication r.
    """
    counts = _count_children(offsets, parents, d, M, side, keys, thr)
    base, rel = _child_layout(parents, d, M, side)
    nrep = offsets.size - 1
    new_offsets = np.zeros(nrep + 1, np.int64)
    for r in range(nrep):
        new_offsets[r + 1] = new_offsets[r] + counts[r]
    # one spare slot absorbs the unconditional write after the last child
    out = np.empty(new_offsets[nrep] + 1, np.int64)
    k = 0
    for r in range(nrep):
        key = keys[r]
        for i in range(offsets[r], offsets[r + 1]):
            b = base[i]
            for o in range(rel.size):
                lin = b + rel[o]
                # branchless: write unconditionally, advance only when retained
                out[k] = lin
                k += retained(key, lin, thr)
        if sort:
            out[new_offsets[r]:k].sort()
    return new_offsets, out[:k]


@nb.njit(cache=True)
def _level_keys(seeds, level):
    out = np.empty(seeds.size, np.uint64)
    lk = np.uint64(level) * np.uint64(0xD1B54A32D192ED03)
    for i in range(seeds.size):
        out[i] = mix64(seeds[i] ^ lk)
    return out


@nb.njit(cache=True)
def _replication_seeds(master, start, count):
    out = np.empty(count, np.uint64)
    for i in range(count):
        out[i] = mix64(master ^ mix64(np.uint64(start + i)))
    return out


def replication_seeds(master: int, start: int, count: int) -> np.ndarray:
    """Seeds of replications ``start .. start+count-1`` (see ``_hash.replication_seed``)."""
    return _replication_seeds(np.uint64(master), start, count)


# ---------------------------------------------------------------------------
# generation


def _first_level_filter(idx: np.ndarray, d: int, M: int, level: int, j: int) -> np.ndarray:
    side = M**level
    coords = np.unravel_index(idx, (side,) * d)
    anc = np.ravel_multi_index(tuple(c // M ** (level - 1) for c in coords), (M,) * d)
    return idx[anc == j - 1]


def _generate(params: ModelParams, cell_budget: int, only_first: int | None = None) -> Realization:
    check_budget(params, cell_budget)
    d, M = params.d, params.M
    thr = np.uint64(_hash.threshold(params.p))
    seeds = np.array([params.seed], dtype=np.uint64)
    grids = [CellGrid.full(d, M, 0)]
    offsets = np.array([0, 1], dtype=np.int64)
    idx = np.zeros(1, dtype=np.int64)
    for level in range(1, params.n_max + 1):
        if idx.size == 0:
            grids.append(CellGrid(d, M, level, idx))
            continue
        keys = _level_keys(seeds, level)
        offsets, idx = _grow(offsets, idx, d, M, M ** (level - 1), keys, thr, True)
        if level == 1 and only_first is not None:
            idx = idx[idx == only_first - 1]
            offsets = np.array([0, idx.size], dtype=np.int64)
        grids.append(CellGrid(d, M, level, idx))
    return Realization(params, tuple(grids))


def generate(params: ModelParams, cell_budget: int = DEFAULT_CELL_BUDGET) -> Realization:
    """One realization with grids for levels 0..n_max.

    Generation stops growing at the first empty level; deeper grids are empty.
    """
    return _generate(params, cell_budget)


def generate_subtree(params: ModelParams, j: int, cell_budget: int = DEFAULT_CELL_BUDGET) -> Realization:
    """Regenerate only the descendants of first-level cube ``j`` (1-based).

    Because marks are keyed by cell code, level n of the result equals
    ``subpopulation(generate(params), j, n)``.
    """
    _check_first_index(params.d, params.M, j)
    return _generate(params, cell_budget, only_first=j)


def occupied_count(r: Realization, n: int) -> int:
    if not 0 <= n <= r.params.n_max:
        raise IndexError(f"level {n} outside 0..{r.params.n_max}")
    return r.grids[n].count


def _check_first_index(d: int, M: int, j: int) -> None:
    if not 1 <= j <= M**d:
        raise IndexError(f"first-level index {j} outside 1..{M**d}")


def subpopulation(r: Realization, j: int, n: int) -> CellGrid:
    """F_n^j: level-n cells of F_n descending from first-level cube J_j, in global position."""
    d, M = r.params.d, r.params.M
    _check_first_index(d, M, j)
    if not 1 <= n <= r.params.n_max:
        raise IndexError(f"level {n} outside 1..{r.params.n_max}")
    grid = r.grids[n]
    return CellGrid(d, M, n, _first_level_filter(grid.indices(), d, M, n, j))


def generate_intersection(params: ModelParams, ell: int, cell_budget: int = DEFAULT_CELL_BUDGET) -> Realization:
    """Fast path for the cellwise intersection of ``ell`` independent percolations.

    Such an intersection is itself a fractal percolation with retention p**ell.
    """
    if ell < 1:
        raise ValueError("ell must be >= 1")
    return generate(replace(params, p=params.p**ell), cell_budget)


def intersect(realizations: Sequence[Realization]) -> Realization:
    """Literal cellwise intersection of realizations sharing d, M and n_max."""
    first = realizations[0]
    d, M, n_max = first.params.d, first.params.M, first.params.n_max
    for r in realizations[1:]:
        if (r.params.d, r.params.M, r.params.n_max) != (d, M, n_max):
            raise ValueError("realizations must share d, M and n_max")
    grids = []
    for level in range(n_max + 1):
        idx = first.grids[level].indices()
        for r in realizations[1:]:
            idx = np.intersect1d(idx, r.grids[level].indices(), assume_unique=True)
        grids.append(CellGrid(d, M, level, idx))
    params = replace(first.params, p=math.prod(r.params.p for r in realizations))
    return Realization(params, tuple(grids))


def literal_intersection(params: ModelParams, ell: int, cell_budget: int = DEFAULT_CELL_BUDGET) -> Realization:
    """Intersection of ``ell`` independent copies seeded from ``params.seed``."""
    copies = [generate(replace(params, seed=_hash.replication_seed(params.seed, i)), cell_budget) for i in range(ell)]
    out = intersect(copies)
    return replace(out, params=replace(out.params, seed=params.seed))


@dataclass(frozen=True)
class LevelBatch:
    """Level ``level`` of a batch of replications in CSR layout.

    ``indices`` is None for a count-only level.
    """

    level: int
    offsets: np.ndarray
    indices: np.ndarray | None

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)


def generate_batch(
    d: int, M: int, p: float, n_max: int, seeds: np.ndarray, sort: bool = True, count_last: bool = False
) -> Iterator[LevelBatch]:
    """Yield levels 0..n_max for one realization per seed.

    Replication r is identical to ``generate(ModelParams(d, M, p, n_max, seeds[r]))``.
    With ``sort=False`` the per-replication index segments are left unsorted,
    which is enough when only counts or dense lookups are needed.  With
    ``count_last`` the deepest level only carries counts.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    thr = np.uint64(_hash.threshold(p))
    offsets = np.arange(seeds.size + 1, dtype=np.int64)
    idx = np.zeros(seeds.size, dtype=np.int64)
    yield LevelBatch(0, offsets, idx)
    for level in range(1, n_max + 1):
        keys = _level_keys(seeds, level)
        if count_last and level == n_max:
            counts = _count_children(offsets, idx, d, M, M ** (level - 1), keys, thr)
            yield LevelBatch(level, np.concatenate(([0], np.cumsum(counts))), None)
            return
        offsets, idx = _grow(offsets, idx, d, M, M ** (level - 1), keys, thr, sort)
        yield LevelBatch(level, offsets, idx)


# ---------------------------------------------------------------------------
# grid dump format


def _rle(mask: np.ndarray) -> list[int]:
    if mask.size == 0:
        return [0]
    change = np.flatnonzero(np.diff(mask.astype(np.int8))) + 1
    bounds = np.concatenate(([0], change, [mask.size]))
    runs = np.diff(bounds).tolist()
    if mask[0]:
        runs.insert(0, 0)
    return runs


def dumps(r: Realization) -> str:
    """``FRACPERC v1 d M p n seed`` header, then one RLE line per level.

    Each level line lists alternating run lengths over the row-major bitset,
    starting with a (possibly empty) run of unoccupied cells.
    """
    prm = r.params
    lines = [f"FRACPERC v1 {prm.d} {prm.M} {prm.p!r} {prm.n_max} {prm.seed}"]
    for g in r.grids:
        mask = np.zeros(g.n_cells, dtype=bool)
        mask[g.indices()] = True
        lines.append(" ".join(map(str, _rle(mask))))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Realization:
    lines = text.rstrip("\n").split("\n")
    head = lines[0].split()
    if head[:2] != ["FRACPERC", "v1"] or len(head) != 7:
        raise ValueError("not a FRACPERC v1 dump")
    params = ModelParams(int(head[2]), int(head[3]), float(head[4]), int(head[5]), int(head[6]))
    if len(lines) != params.n_max + 2:
        raise ValueError("level count does not match header")
    grids = []
    for level, line in enumerate(lines[1:]):
        runs = [int(x) for x in line.split()]
        n_cells = params.cells(level)
        if sum(runs) != n_cells:
            raise ValueError(f"level {level}: runs cover {sum(runs)} of {n_cells} cells")
        idx, pos = [], 0
        for i, run in enumerate(runs):
            if i % 2:
                idx.append(np.arange(pos, pos + run, dtype=np.int64))
            pos += run
        cells = np.concatenate(idx) if idx else np.zeros(0, np.int64)
        grids.append(CellGrid(params.d, params.M, level, cells))
    return Realization(params, tuple(grids))
