"""Intrinsic volumes of unions of closed lattice cubes.

Every functional is an integer count divided by an integer power of the
cell side, so values are exact in rational mode and correctly rounded in
float mode:

    V_0 = Euler characteristic from the face census
    V_1 = (sum of 4 * edge weights) * s / 4      (d = 3)
    V_{d-1} = exposed facets * s^(d-1) / 2
    V_d = cells * s^d
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import comb
from typing import Sequence

import numba as nb
import numpy as np

from .percolation import CellGrid

DENSE_LOOKUP_LIMIT = 2**26
MAX_ORACLE_CELLS = 20

# 4 * weight of a lattice edge by the occupancy pattern of its 4 incident
# cells (rotation classes); frozen from the least-squares fit in the tests
EDGE_PATTERNS = ("single", "adjacent", "diagonal", "triple", "full")
EDGE_WEIGHT4 = {
    "single": 1,
    "adjacent": 0,
    "diagonal": -2,
    "triple": -1,
    "full": 0,
}


def _edge_weights() -> np.ndarray:
    return np.array([EDGE_WEIGHT4[k] for k in EDGE_PATTERNS], np.int64)


@dataclass(frozen=True)
class MinkowskiVector:
    """v[k] has units length^k; ``None`` marks entries not supported in this dimension."""

    values: tuple
    side: Fraction

    @property
    def d(self) -> int:
        return len(self.values) - 1

    def __getitem__(self, k):
        return self.values[k]

    def __iter__(self):
        return iter(self.values)

    def as_float(self) -> "MinkowskiVector":
        return MinkowskiVector(tuple(None if v is None else float(v) for v in self.values), self.side)


@dataclass(frozen=True)
class FaceCensus:
    f: tuple[int, ...]

    @property
    def euler(self) -> int:
        return sum((-1) ** j * fj for j, fj in enumerate(self.f))


# ---------------------------------------------------------------------------
# neighbourhood tables


@lru_cache(maxsize=None)
def _face_tables(d: int):
    """Faces of a cell and the other cells incident to each face.

    A face type picks per axis: 0 = spans the axis, 1 = lower side, 2 = upper
    side.  Its incident cells are self + eps with eps_a in {0, -1} on lower
    axes and {0, +1} on upper axes.  ``smaller`` marks incident cells that
    precede self in row-major order, ``diag`` marks cells differing on two
    axes (only used for edges in d = 3).
    """
    dims, ptr, offs, smaller, diag = [], [0], [], [], []
    for t in itertools.product((0, 1, 2), repeat=d):
        dims.append(sum(1 for a in t if a == 0))
        choices = [(0,) if a == 0 else ((0, -1) if a == 1 else (0, 1)) for a in t]
        for eps in itertools.product(*choices):
            if not any(eps):
                continue
            first = next(e for e in eps if e)
            offs.append(eps)
            smaller.append(first < 0)
            diag.append(sum(1 for e in eps if e) == 2)
        ptr.append(len(offs))
    return (
        np.array(dims, np.int64),
        np.array(ptr, np.int64),
        np.array(offs, np.int64).reshape(-1, d),
        np.array(smaller, np.int64),
        np.array(diag, np.int64),
    )


# ---------------------------------------------------------------------------
# kernels


@nb.njit(cache=True, nogil=True)
def _measure_sparse(query, cells, d, side, dims, ptr, offs, smaller, diag, w4, census, acc):
    """Census of ``query`` cells against the sorted occupied set ``cells``
    (binary-search lookups).  Exposed facets go to acc[0], 4 * edge weights
    to acc[1]."""
    coords = np.empty(d, np.int64)
    for qi in range(query.size):
        x = query[qi]
        for a in range(d - 1, -1, -1):
            coords[a] = x % side
            x //= side
        for t in range(dims.size):
            cnt = 1
            n_smaller = 0
            n_diag = 0
            for e in range(ptr[t], ptr[t + 1]):
                inside = True
                lin = 0
                for a in range(d):
                    c = coords[a] + offs[e, a]
                    if c < 0 or c >= side:
                        inside = False
                        break
                    lin = lin * side + c
                if not inside:
                    continue
                k = np.searchsorted(cells, lin)
                if k < cells.size and cells[k] == lin:
                    cnt += 1
                    n_smaller += smaller[e]
                    n_diag += diag[e]
            # cnt: occupied incident cells including self
            j = dims[t]
            if j == d - 1 and cnt == 1:
                acc[0] += 1
            if n_smaller == 0:
                census[j] += 1
                if d == 3 and j == 1:
                    if cnt == 2:
                        acc[1] += w4[2] if n_diag else w4[1]
                    elif cnt == 3:
                        acc[1] += w4[3]
                    else:
                        acc[1] += w4[0] if cnt == 1 else w4[4]


@nb.njit(cache=True, nogil=True)
def _padded_index(x, d, side):
    ps = side + 2
    out = 0
    stride = 1
    for a in range(d - 1, -1, -1):
        out += (x % side + 1) * stride
        x //= side
        stride *= ps
    return out


@nb.njit(cache=True, nogil=True)
def _measure_dense(query, buf, d, side, dims, ptr, loff, smaller, diag, w4, census, acc):
    """As ``_measure_sparse`` but against a zero-padded occupancy buffer of
    side ``side + 2``; ``loff`` holds neighbour offsets in that buffer."""
    for qi in range(query.size):
        pc = _padded_index(query[qi], d, side)
        for t in range(dims.size):
            cnt = 1
            n_smaller = 0
            n_diag = 0
            for e in range(ptr[t], ptr[t + 1]):
                # branch-free: occupancy is close to a coin flip
                o = np.int64(buf[pc + loff[e]])
                cnt += o
                n_smaller += o * smaller[e]
                n_diag += o * diag[e]
            # cnt: occupied incident cells including self
            j = dims[t]
            if j == d - 1 and cnt == 1:
                acc[0] += 1
            if n_smaller == 0:
                census[j] += 1
                if d == 3 and j == 1:
                    if cnt == 2:
                        acc[1] += w4[2] if n_diag else w4[1]
                    elif cnt == 3:
                        acc[1] += w4[3]
                    else:
                        acc[1] += w4[0] if cnt == 1 else w4[4]


def _padded_offsets(offs: np.ndarray, side: int) -> np.ndarray:
    d = offs.shape[1]
    strides = (side + 2) ** np.arange(d - 1, -1, -1, dtype=np.int64)
    return offs @ strides


@nb.njit(cache=True, nogil=True)
def _measure_batch(offsets, cells, d, side, use_dense, dims, ptr, offs, loff, smaller, diag, w4):
    nrep = offsets.size - 1
    census = np.zeros((nrep, d + 1), np.int64)
    acc = np.zeros((nrep, 2), np.int64)
    buf = np.zeros((side + 2) ** d if use_dense else 1, np.uint8)
    for r in range(nrep):
        lo, hi = offsets[r], offsets[r + 1]
        seg = cells[lo:hi]
        if use_dense:
            for i in range(seg.size):
                buf[_padded_index(seg[i], d, side)] = 1
            _measure_dense(seg, buf, d, side, dims, ptr, loff, smaller, diag, w4, census[r], acc[r])
            for i in range(seg.size):
                buf[_padded_index(seg[i], d, side)] = 0
        else:
            _measure_sparse(seg, seg, d, side, dims, ptr, offs, smaller, diag, w4, census[r], acc[r])
    return census, acc


@dataclass(frozen=True)
class CountBatch:
    """Integer numerators of V_0..V_d for a batch of grids on one lattice.

    ``numerators[:, k] / denominators[k] * side**k`` is V_k.
    """

    d: int
    level: int
    M: int
    numerators: np.ndarray
    denominators: tuple[int, ...]
    census: np.ndarray | None


def measure_batch(offsets: np.ndarray, cells: np.ndarray, d: int, M: int, level: int,
                  sorted_segments: bool = True, need_all: bool = True) -> CountBatch:
    """Census-based counts for every CSR segment of ``cells`` (lattice of side M^level).

    With ``need_all=False`` only V_d is filled in and no neighbourhood pass is made.
    """
    offsets = np.asarray(offsets, np.int64)
    cells = np.asarray(cells, np.int64)
    side = M**level
    nrep = offsets.size - 1
    num = np.zeros((nrep, d + 1), np.int64)
    den = _denominators(d)
    num[:, d] = np.diff(offsets)
    if not need_all:
        return CountBatch(d, level, M, num, den, None)
    use_dense = (side + 2) ** d <= DENSE_LOOKUP_LIMIT
    if not use_dense and not sorted_segments:
        cells = cells.copy()
        for r in range(nrep):
            cells[offsets[r]:offsets[r + 1]].sort()
    dims, ptr, offs, smaller, diag = _face_tables(d)
    census, acc = _measure_batch(offsets, cells, d, side, use_dense, dims, ptr, offs,
                                 _padded_offsets(offs, side), smaller, diag, _edge_weights())
    num[:, 0] = (census * (-1) ** np.arange(d + 1)).sum(axis=1)
    if d >= 2:
        num[:, d - 1] = acc[:, 0]
    if d == 3:
        num[:, 1] = acc[:, 1]
    return CountBatch(d, level, M, num, den, census)


def _denominators(d: int) -> tuple[int, ...]:
    den = [1] * (d + 1)
    if d >= 2:
        den[d - 1] = 2
    if d == 3:
        den[1] = 4
    return tuple(den)


def supported(d: int) -> tuple[bool, ...]:
    """Which V_k the census machinery provides in dimension d."""
    if d <= 3:
        return (True,) * (d + 1)
    return tuple(k in (0, d - 1, d) for k in range(d + 1))


# ---------------------------------------------------------------------------
# single-grid API


def _grid_counts(grid: CellGrid, chunks: int = 1):
    idx = grid.indices()
    side = grid.side_count
    d = grid.d
    dims, ptr, offs, smaller, diag = _face_tables(d)
    w4 = _edge_weights()
    census = np.zeros(d + 1, np.int64)
    acc = np.zeros(2, np.int64)
    parts = np.array_split(idx, max(1, chunks))
    if (side + 2) ** d <= DENSE_LOOKUP_LIMIT:
        buf = np.zeros((side + 2) ** d, np.uint8)
        pad = np.stack(np.unravel_index(idx, (side,) * d), -1) + 1 if idx.size else np.zeros((0, d), np.int64)
        buf[np.ravel_multi_index(tuple(pad.T), (side + 2,) * d)] = 1
        loff = _padded_offsets(offs, side)
        for part in parts:
            _measure_dense(part, buf, d, side, dims, ptr, loff, smaller, diag, w4, census, acc)
    else:
        for part in parts:
            _measure_sparse(part, idx, d, side, dims, ptr, offs, smaller, diag, w4, census, acc)
    return census, acc


def face_census(grid: CellGrid, chunks: int = 1) -> FaceCensus:
    """Counts of lattice j-faces contained in the closed union.

    Each face is owned by its first occupied incident cell in row-major order,
    so splitting the cells into ``chunks`` gives the same totals.
    """
    census, _ = _grid_counts(grid, chunks)
    return FaceCensus(tuple(int(x) for x in census))


def _value(num: int, den: int, side: Fraction, k: int, exact: bool):
    v = Fraction(num, den) * side**k
    return v if exact else float(v)


def volume(grid: CellGrid, exact: bool = False):
    return _value(grid.count, 1, grid.cell_side, grid.d, exact)


def surface(grid: CellGrid, exact: bool = False):
    """Half the surface area: exposed facets * side^(d-1) / 2."""
    _, acc = _grid_counts(grid)
    return _value(int(acc[0]), 2, grid.cell_side, grid.d - 1, exact)


def euler(grid: CellGrid) -> int:
    return face_census(grid).euler


def mean_width_3d(grid: CellGrid, exact: bool = False):
    if grid.d != 3:
        raise ValueError(f"mean_width_3d needs d = 3, got d = {grid.d}")
    _, acc = _grid_counts(grid)
    return _value(int(acc[1]), 4, grid.cell_side, 1, exact)


def intrinsic_all(grid: CellGrid, exact: bool = False, side: Fraction | None = None) -> MinkowskiVector:
    """(V_0, ..., V_d) of the closed union; unsupported entries (d > 3) are None.

    ``side`` overrides the cell side (defaults to 1/M^level).
    """
    d = grid.d
    side = grid.cell_side if side is None else Fraction(side)
    census, acc = _grid_counts(grid)
    num = [None] * (d + 1)
    num[0] = int((census * (-1) ** np.arange(d + 1)).sum())
    num[d] = grid.count
    if d >= 2:
        num[d - 1] = int(acc[0])
    if d == 3:
        num[1] = int(acc[1])
    den = _denominators(d)
    values = tuple(None if num[k] is None else _value(num[k], den[k], side, k, exact) for k in range(d + 1))
    return MinkowskiVector(values, side)


def values_from_counts(batch: CountBatch, exact: bool = False) -> list[MinkowskiVector]:
    side = Fraction(1, batch.M**batch.level)
    ok = supported(batch.d)
    out = []
    for row in batch.numerators:
        out.append(MinkowskiVector(
            tuple(_value(int(row[k]), batch.denominators[k], side, k, exact) if ok[k] else None
                  for k in range(batch.d + 1)), side))
    return out


# ---------------------------------------------------------------------------
# inclusion-exclusion oracle


def _esym(lengths: Sequence, k: int):
    total = 0
    for combo in itertools.combinations(lengths, k):
        prod = 1
        for x in combo:
            prod *= x
        total += prod
    return total


def box_intrinsic(lengths: Sequence, k: int):
    """V_k of an axis-parallel box with the given side lengths (zeros allowed)."""
    return _esym(lengths, k)


def brute_force_intrinsic(cells: Sequence[Sequence[int]], d: int | None = None,
                          side: Fraction = Fraction(1)) -> MinkowskiVector:
    """V_k of a union of closed lattice cubes by inclusion-exclusion over subsets.

    ``cells`` are integer lower corners; each cube is corner + [0, 1]^d scaled by ``side``.
    """
    cells = [tuple(int(x) for x in c) for c in dict.fromkeys(tuple(c) for c in cells)]
    if len(cells) > MAX_ORACLE_CELLS:
        raise ValueError(f"oracle limited to {MAX_ORACLE_CELLS} cells, got {len(cells)}")
    if d is None:
        if not cells:
            raise ValueError("dimension needed for an empty cell list")
        d = len(cells[0])
    side = Fraction(side)
    totals = [Fraction(0)] * (d + 1)

    def visit(start, lo, hi, size):
        # lo/hi: current intersection box in lattice units
        for i in range(start, len(cells)):
            c = cells[i]
            nlo = tuple(max(a, b) for a, b in zip(lo, c))
            nhi = tuple(min(a, b + 1) for a, b in zip(hi, c))
            if any(h < l for l, h in zip(nlo, nhi)):
                continue
            sign = 1 if size % 2 == 0 else -1
            lengths = [(h - l) * side for l, h in zip(nlo, nhi)]
            for k in range(d + 1):
                totals[k] += sign * box_intrinsic(lengths, k)
            visit(i + 1, nlo, nhi, size + 1)

    big = 1 << 62
    visit(0, (-big,) * d, (big,) * d, 0)
    return MinkowskiVector(tuple(totals), side)


def unit_cube_vector(d: int) -> tuple[int, ...]:
    return tuple(comb(d, k) for k in range(d + 1))


def parse_cube_list(text: str) -> tuple[int, int, int, list[tuple[int, ...]]]:
    """Parse ``d M n; x1 y1 [z1]; ...`` into (d, M, n, cells)."""
    parts = [s.strip() for s in text.strip().split(";") if s.strip()]
    d, M, n = (int(x) for x in parts[0].split())
    cells = [tuple(int(x) for x in s.split()) for s in parts[1:]]
    for c in cells:
        if len(c) != d:
            raise ValueError(f"cell {c} does not have {d} coordinates")
    return d, M, n, cells


def format_cube_list(d: int, M: int, n: int, cells) -> str:
    return "; ".join([f"{d} {M} {n}"] + [" ".join(map(str, c)) for c in cells])


def grid_from_cells(cells, d: int, M: int, level: int) -> CellGrid:
    side = M**level
    if not cells:
        return CellGrid(d, M, level, np.zeros(0, np.int64))
    arr = np.asarray(cells, np.int64).reshape(-1, d)
    if arr.min() < 0 or arr.max() >= side:
        raise ValueError("cell outside the lattice")
    return CellGrid(d, M, level, np.ravel_multi_index(tuple(arr.T), (side,) * d))


# ---------------------------------------------------------------------------
# intersections of independent unions on one lattice


@nb.njit(cache=True, nogil=True)
def _contains(seg, lin):
    k = np.searchsorted(seg, lin)
    return k < seg.size and seg[k] == lin


@nb.njit(cache=True, nogil=True)
def _intersection_census(offs2d, cells, d, side, dims, ptr, offs, smaller):
    """Face counts of the set intersection of t closed cube unions per replication.

    ``cells[offs2d[j, r]:offs2d[j, r + 1]]`` is union j of replication r (sorted).
    A face belongs to the intersection iff every union holds one of its
    incident cells; faces are enumerated from union 0 and owned by its first
    occupied incident cell there.
    """
    t = offs2d.shape[0]
    R = offs2d.shape[1] - 1
    f = np.zeros((R, d + 1), np.int64)
    coords = np.empty(d, np.int64)
    nbr = np.empty(ptr[-1], np.int64)
    for r in range(R):
        seg0 = cells[offs2d[0, r]:offs2d[0, r + 1]]
        for qi in range(seg0.size):
            x = seg0[qi]
            for a in range(d - 1, -1, -1):
                coords[a] = x % side
                x //= side
            # neighbour codes, -1 outside the lattice
            for e in range(ptr[-1]):
                lin = 0
                for a in range(d):
                    c = coords[a] + offs[e, a]
                    if c < 0 or c >= side:
                        lin = -1
                        break
                    lin = lin * side + c
                nbr[e] = lin
            for ft in range(dims.size):
                owned = True
                for e in range(ptr[ft], ptr[ft + 1]):
                    if smaller[e] and nbr[e] >= 0 and _contains(seg0, nbr[e]):
                        owned = False
                        break
                if not owned:
                    continue
                ok = True
                for j in range(1, t):
                    segj = cells[offs2d[j, r]:offs2d[j, r + 1]]
                    hit = _contains(segj, seg0[qi])
                    e = ptr[ft]
                    while not hit and e < ptr[ft + 1]:
                        if nbr[e] >= 0 and _contains(segj, nbr[e]):
                            hit = True
                        e += 1
                    if not hit:
                        ok = False
                        break
                if ok:
                    f[r, dims[ft]] += 1
    return f


def intersection_census_batch(offsets_list, cells_list, d: int, M: int, level: int) -> np.ndarray:
    """(R, d+1) face counts of the intersection of several closed unions per replication.

    Union j of replication r is ``cells_list[j][offsets_list[j][r]:offsets_list[j][r+1]]``
    (sorted).  By additivity over the resulting cubical complex,
    V_k = side^k * sum_i (-1)^(i-k) C(i, k) f_i.
    """
    shift = np.cumsum([0] + [c.size for c in cells_list[:-1]])
    offs2d = np.stack([np.asarray(o, np.int64) + s for o, s in zip(offsets_list, shift)])
    cells = np.concatenate([np.asarray(c, np.int64) for c in cells_list])
    dims, ptr, offs, smaller, _ = _face_tables(d)
    return _intersection_census(offs2d, cells, d, M**level, dims, ptr, offs, smaller)


def complex_intrinsic(f: Sequence[int], k: int, side=Fraction(1)):
    """V_k of a cubical complex with face counts f (each face a closed lattice cube)."""
    return sum((-1) ** (i - k) * comb(i, k) * f[i] for i in range(k, len(f))) * Fraction(side) ** k
