"""Exact model moments, recursions, constants and limit functionals."""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np
from scipy.stats import norm

from .percolation import ModelParams


class SubcriticalError(ValueError):
    """Operation needs p > M^(-d)."""


def _require_supercritical(params: ModelParams):
    if not params.supercritical:
        raise SubcriticalError(
            f"needs M^d p > 1, got M^d p = {params.mean_offspring:g} (d={params.d}, M={params.M}, p={params.p})"
        )


@dataclass(frozen=True)
class MomentReport:
    functional: object  # k, or "N" / "W"
    n: int
    mean: float
    variance: float
    source: str = "closed_form"


def dimension(params: ModelParams) -> float:
    return params.D


def _geom_ratio(x: float, n: int) -> float:
    """(x^n - 1)/(x - 1), continuous at x = 1."""
    y = x - 1.0
    if y == 0.0:
        return float(n)
    if abs(y) < 1e-3:
        return math.expm1(n * math.log1p(y)) / y
    return (x**n - 1.0) / y


def gw_moments(params: ModelParams, n: int) -> MomentReport:
    """Moments of N_n for Bin(M^d, p) offspring."""
    m = params.mean_offspring
    var1 = m * (1 - params.p)
    var = var1 * m ** (n - 1) * _geom_ratio(m, n) if n > 0 else 0.0
    return MomentReport("N", n, m**n, var)


def w_infinity_moments(params: ModelParams) -> tuple[float, float]:
    _require_supercritical(params)
    return 1.0, (1 - params.p) / (params.mean_offspring - 1)


def w_moments(params: ModelParams, n: int) -> MomentReport:
    m = params.mean_offspring
    g = gw_moments(params, n)
    return MomentReport("W", n, 1.0, g.variance / m ** (2 * n))


def _vol_var(d: int, M: int, p: float, n: int) -> float:
    # (1-p)/(M^d p - 1) * (p^{2n} - (p/M^d)^n), arranged to stay accurate near M^d p = 1
    if n == 0:
        return 0.0
    x = M**d * p
    return (1 - p) * p ** (2 * n) * _geom_ratio(x, n) / x**n


def _vol_var_sum(d: int, M: int, p: float, n: int) -> float:
    x = M**d * p
    return p ** (2 * n) * (1 - p) * math.fsum(x ** (i - n) for i in range(n))


def volume_moments(params: ModelParams, n: int) -> MomentReport:
    d, M, p = params.d, params.M, params.p
    return MomentReport(params.d, n, p**n, _vol_var(d, M, p, n))


def volume_variance_sum_form(params: ModelParams, n: int) -> float:
    """Var V_d(F_n) as p^{2n}(1-p) sum_{i<n} (M^d p)^{i-n}."""
    return _vol_var_sum(params.d, params.M, params.p, n)


def intersection_volume_moments(params: ModelParams, ell: int, n: int) -> MomentReport:
    """Volume moments of the cellwise intersection of ``ell`` independent copies."""
    if ell < 1:
        raise ValueError("ell must be >= 1")
    q = params.p**ell
    return MomentReport(params.d, n, q**n, _vol_var(params.d, params.M, q, n))


# ---------------------------------------------------------------------------
# surface


@dataclass(frozen=True)
class SurfaceConstants:
    c_bar_1: float
    c_bar_2: float | None


def surface_constants(params: ModelParams) -> SurfaceConstants:
    d, M, p = params.d, params.M, params.p
    c1 = d * M * (1 - p) / (M - p)
    c2 = c1**2 * (1 - p) / (M**d * p - 1) if params.supercritical else None
    return SurfaceConstants(c1, c2)


def _surface_means(d: int, M: int, p: float, n: int) -> list[float]:
    ex = [float(d)]
    for m in range(1, n + 1):
        ex.append(M * p * ex[-1] - d * (M - 1) * p ** (2 * m))
    return ex


def surface_mean_recursion(params: ModelParams, n: int) -> float:
    return _surface_means(params.d, params.M, params.p, n)[n]


def surface_mean_closed(params: ModelParams, n: int) -> float:
    d, M, p = params.d, params.M, params.p
    if p == 1.0:
        return surface_mean_recursion(params, n)
    c1 = d * M * (1 - p) / (M - p)
    return c1 * (M * p) ** n * (1 + (M - 1) / (1 - p) * (p / M) ** (n + 1))


def surface_mean(params: ModelParams, n: int) -> float:
    """E V_{d-1}(F_n)."""
    return surface_mean_closed(params, n)


@dataclass(frozen=True)
class SurfaceRecursionState:
    n: int
    E_X: float
    Var_X: float
    gamma: float
    corner_cov: float
    row_cov: float
    inter_mean: float
    inter_var: float


def surface_variance_states(params: ModelParams, n: int) -> list[SurfaceRecursionState]:
    """Jointly iterate the covariance recursions for Var V_{d-1}(F_m), m = 0..n.

    Notation per level m, all for the half surface X_m = V_{d-1}(F_m):
      row[m]    covariance of two facet pieces in a row across a facet
      corner[m] covariance of two facet pieces meeting at a ridge
      g[m]      Cov(X_m, H_m), H_m the trace on one facet of an independent
                neighbouring copy; gamma_{m+1} = M^{2(1-d)} g[m]
    """
    d, M, p = params.d, params.M, params.p
    if d < 2:
        raise ValueError("surface variance recursion needs d >= 2")
    ex = _surface_means(d, M, p, n)
    s2 = M ** (2 * (d - 1))
    states = [SurfaceRecursionState(0, float(d), 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)]
    g_prev = 0.0
    corner = 0.0
    beta = 0.0
    for m in range(1, n + 1):
        row = (1 - p) * p ** (4 * m - 1) / s2
        corner = p**3 / M**d * corner + row
        gamma = M ** (2 * (1 - d)) * g_prev
        cov4 = p * p * gamma + p * p * (1 - p) * M ** (1 - d) * ex[m - 1] * M ** (1 - d) * p ** (2 * (m - 1))
        inter_mean = p ** (2 * (m - 1))
        inter_var = _vol_var(d - 1, M, p * p, m - 1)
        vpair = p * p / s2 * (inter_var + (1 - p * p) * inter_mean**2)
        beta = (
            p * M ** (2 - d) * beta
            + p * (1 - p) * M ** (2 - d) * ex[m - 1] ** 2
            + d * (M - 1) * M ** (d - 1) * vpair
            + 2 * d * (M - 2) * M ** (d - 1) * row
            + 8 * comb(d, 2) * (M - 1) ** 2 * M ** (d - 2) * corner
            - 4 * d * (M - 1) * M ** (d - 1) * cov4
        )
        g_prev = (
            p * p * M ** (1 - d) * g_prev
            + (1 - p) * M ** (1 - d) * p ** (2 * m) * ex[m - 1]
            - M ** (d - 1) * row
            - 2 * (d - 1) * (M - 1) * M ** (d - 2) * corner
        )
        states.append(SurfaceRecursionState(m, ex[m], beta, gamma, corner, row, inter_mean, inter_var))
    return states


def surface_variance_exact(params: ModelParams, n: int) -> SurfaceRecursionState:
    return surface_variance_states(params, n)[n]


@dataclass(frozen=True)
class SurfaceAsymptotic:
    leading: float
    regime: str
    remainder: str


def surface_variance_asymptotic(params: ModelParams, n: int) -> SurfaceAsymptotic:
    """Leading term c_bar_2 (Mp)^{2n} of Var V_{d-1}(F_n) and the remainder order."""
    _require_supercritical(params)
    d, M, p = params.d, params.M, params.p
    c2 = surface_constants(params).c_bar_2
    lhs, rhs = p * p, M ** (1.0 - d)
    if math.isclose(lhs, rhs, rel_tol=1e-12):
        regime, rem = "log", "O((Mp^3)^n * n)"
    elif lhs > rhs:
        regime, rem = "upper", "O((Mp^3)^n)"
    else:
        regime, rem = "lower", "O((p/M^(d-2))^n)"
    return SurfaceAsymptotic(c2 * (M * p) ** (2 * n), regime, rem)


# ---------------------------------------------------------------------------
# limit functionals


@lru_cache(maxsize=None)
def intersection_groups(d: int, M: int) -> dict[tuple[int, int], int]:
    """Number of subsets T of first-level cubes (|T| >= 2) with nonempty
    common intersection, keyed by (|T|, dimension of the intersection)."""
    seen = set()
    counts = Counter()
    cube_ids = {c: i for i, c in enumerate(itertools.product(range(M), repeat=d))}
    for v in itertools.product(range(M + 1), repeat=d):
        around = [
            cube_ids[c]
            for c in itertools.product(*[(x - 1, x) for x in v])
            if all(0 <= a < M for a in c)
        ]
        for t in range(2, len(around) + 1):
            for T in itertools.combinations(sorted(around), t):
                if T in seen:
                    continue
                seen.add(T)
                cubes = [np.unravel_index(j, (M,) * d) for j in T]
                u = sum(1 for a in range(d) if len({c[a] for c in cubes}) == 1)
                counts[(t, u)] += 1
    return dict(counts)


@dataclass
class SeriesTerm:
    t: int
    u: int
    count: int
    method: str  # "closed" / "mc" / "zero"
    value: float
    se: float = 0.0


@dataclass
class LimitSeriesResult:
    k: int
    value: float
    cutoff: int
    tail_bound: float
    se: float
    ci_halfwidth: float
    ci_level: float
    replications: int
    converged: bool
    terms: list[SeriesTerm] = field(default_factory=list)
    note: str = ""

    @property
    def ci(self) -> tuple[float, float]:
        return self.value - self.ci_halfwidth, self.value + self.ci_halfwidth


def _group_tails(d, M, p, k, t, u, cnt, n_terms):
    """Crude bound on sum_{n > N} |term_n| of one group, for N = 0..n_terms.

    A lattice face lies in one trace with probability at most 2^u p^m (some
    incident cell survives), and sum_i C(i, k) f_i <= 6^u M^(um) on the level-m
    lattice, so |E V_k| <= 6^u 2^(ut) (M^u p^t)^m s^k.  Consecutive bounds
    shrink by rho = M^(u-d) p^(t-1) <= p/M.
    """
    D = math.log(M**d * p) / math.log(M)
    rho = M ** (u - d) * p ** (t - 1)
    ns = np.arange(1, n_terms + 2)
    log_b = (math.log(cnt * 6.0**u * 2.0 ** (u * t) * p**t) - k * math.log(M) + ns * (k - D) * math.log(M)
             + (ns - 1) * math.log(M ** (u - k) * p**t))
    return np.exp(log_b) / (1 - rho)


@lru_cache(maxsize=None)
def _subset_tables(r: int):
    """Inclusion-exclusion tables for the 2^r cells around a face with r normal axes.

    Cells are bit patterns (bit a set = upper side on normal axis a).  For every
    nonempty cell subset S: its sign, the number of distinct cells after
    collapsing the axes outside a split pattern e (= distinct ancestors at a
    level where exactly the axes in e have separated), and which axes it uses
    on the upper side.
    """
    ncell = 2**r
    subsets = range(1, 2**ncell)
    D = np.zeros((len(subsets), 2**r), np.int64)
    sign = np.zeros(len(subsets))
    upper = np.zeros((len(subsets), r), bool)
    for si, S in enumerate(subsets):
        members = [c for c in range(ncell) if S >> c & 1]
        sign[si] = 1.0 if len(members) % 2 else -1.0
        for e in range(2**r):
            D[si, e] = len({c & e for c in members})
        for a in range(r):
            upper[si, a] = any(c >> a & 1 for c in members)
    return D, sign, upper


def trace_face_log_counts(u: int, M: int, p: float, t: int, m: int) -> np.ndarray:
    """log E f_i, i = 0..u, for the intersection of t independent closed traces.

    A trace is the level-m construction step of a u-dimensional percolation
    with retention p (unconditioned on the start cube).  A lattice face lies in
    the intersection iff it lies in every trace, and lies in one trace iff one
    of its incident cells survives; for a union of such events
    P(all cells in S survive) = p^(number of distinct ancestors of S).
    Faces are classified per normal axis by the level at which the two
    incident cells split (a boundary face has only one incident side).
    """
    out = np.empty(u + 1)
    lm = math.log(M)
    for i in range(u + 1):
        r = u - i
        D, sign, upper = _subset_tables(r)
        # class value T in 1..m: split level; T = m + 1: boundary (one side only)
        T = np.arange(1, m + 2)
        logc = np.where(T <= m, math.log(M - 1) + (T - 1) * lm if M > 1 else -np.inf, math.log(2.0))
        grids = np.meshgrid(*([T] * r), indexing="ij") if r else []
        shape = (m + 1,) * r
        A = np.zeros((D.shape[0],) + shape)
        for e in range(2**r):
            lo = np.ones(shape)
            hi = np.full(shape, float(m + 1))
            for a in range(r):
                if e >> a & 1:
                    lo = np.maximum(lo, grids[a])
                else:
                    hi = np.minimum(hi, grids[a])
            n_e = np.maximum(hi - lo, 0.0)
            A += D[:, e].reshape((-1,) + (1,) * r) * n_e
        allowed = np.ones((D.shape[0],) + shape, bool)
        for a in range(r):
            boundary = grids[a] == m + 1
            allowed &= ~(upper[:, a].reshape((-1,) + (1,) * r) & boundary)
        P = np.sum(np.where(allowed, sign.reshape((-1,) + (1,) * r) * p**A, 0.0), axis=0)
        logw = np.zeros(shape)
        for a in range(r):
            logw = logw + logc[grids[a] - 1]
        with np.errstate(divide="ignore"):
            terms = logw + t * np.log(np.maximum(P, 0.0))
        top = np.max(terms)
        lse = top + math.log(np.sum(np.exp(terms - top))) if np.isfinite(top) else -np.inf
        out[i] = math.log(comb(u, i)) + i * m * lm + lse
    return out


def trace_intersection_mean(u: int, k: int, M: int, p: float, t: int, m: int) -> float:
    """E V_k of the intersection of t independent closed level-m traces on a unit u-cube.

    Uses V_k = s^k sum_i (-1)^(i-k) C(i, k) f_i for a cubical complex with face counts f_i.
    """
    if k > u:
        return 0.0
    if k == u:
        return p ** (t * m)
    logf = trace_face_log_counts(u, M, p, t, m)
    return math.fsum((-1) ** (i - k) * comb(i, k) * math.exp(logf[i] - k * m * math.log(M)) for i in range(k, u + 1))


def _exact_expectations(u: int, k: int, M: int, p: float, t: int, n_levels: int) -> np.ndarray:
    return np.array([trace_intersection_mean(u, k, M, p, t, m) for m in range(n_levels)])


def _mc_levels(u, k, M, p, t, n_levels, R, seed):
    """Per replication V_k of the intersection of t independent traces, levels 0..n_levels-1."""
    from .minkowski import intersection_census_batch
    from .percolation import generate_batch, replication_seeds

    out = np.zeros((R, n_levels))
    if n_levels == 0:
        return out
    gens = [generate_batch(u, M, p, n_levels - 1, replication_seeds(seed ^ (j * 0x9E37), 0, R), sort=True)
            for j in range(t)]
    for level_batches in zip(*gens):
        level = level_batches[0].level
        f = intersection_census_batch([lb.offsets for lb in level_batches],
                                      [lb.indices for lb in level_batches], u, M, level)
        v = np.zeros(R)
        for i in range(k, u + 1):
            v += (-1) ** (i - k) * comb(i, k) * f[:, i]
        out[:, level] = v / float(M) ** (k * level)
    return out


def limit_functional_series(
    params: ModelParams,
    k: int,
    replications: int = 10_000,
    tolerance: float = 1e-4,
    max_levels: int = 400,
    mc_cell_budget: int = 2**25,
    force_mc: bool = False,
    ci_level: float = 0.99,
    cutoff: int | None = None,
) -> LimitSeriesResult:
    """V_bar_k by the inclusion-exclusion series over first-level cube subsets.

    For |T| = t retained cubes meeting in a u-face G, the intersection of their
    level-n subpopulations is the intersection of t independent closed traces
    on G, each a u-dimensional percolation n-1 levels deep, scaled by 1/M.  Its
    cellwise part is a percolation with retention p^t; lower-dimensional
    contacts between neighbouring cells add to V_k for k < u.  Expectations are
    evaluated exactly by face-class sums (``trace_intersection_mean``); with
    ``force_mc`` they are estimated from simulated traces instead, using
    per-replication partial sums of the series.

    Exact groups are summed until their tail bound drops below machine
    precision.  Monte Carlo groups stop at the first N whose tail bound is
    below ``tolerance * q_{d,k}``, or earlier if ``mc_cell_budget`` runs out.
    The result is flagged not converged when the total tail bound or the CI
    half-width exceeds ``tolerance * q_{d,k}``.
    """
    d, M, p = params.d, params.M, params.p
    if not 0 <= k <= d:
        raise ValueError(f"k must lie in 0..{d}")
    q_dk = comb(d, k)
    D = math.log(M**d * p) / math.log(M)
    groups = sorted(intersection_groups(d, M).items())
    notes = []

    plan = []
    for gi, ((t, u), cnt) in enumerate(groups):
        if u < k:
            plan.append((gi, t, u, cnt, "zero", 0, 0.0))
            continue
        tails = _group_tails(d, M, p, k, t, u, cnt, max_levels)
        # a vertex trace is a single point: nothing to sample beyond its survival probability
        mc = force_mc and u > 0
        goal = tolerance * q_dk / len(groups) if mc else 1e-17 * q_dk
        if cutoff is not None:
            n_g = cutoff
        else:
            ok = np.flatnonzero(tails <= goal)
            n_g = int(ok[0]) if ok.size else max_levels
        if mc and cutoff is None:
            growth = M**u * p  # each trace is a p-percolation
            depth = n_g
            while depth > 1 and t * replications * growth ** (depth - 1) > mc_cell_budget:
                depth -= 1
            if depth < n_g:
                notes.append(f"cell budget limits Monte Carlo depth to {depth} levels for |T|={t}, u={u}")
                n_g = depth
        tail = float(tails[n_g]) if n_g < tails.size else math.inf
        plan.append((gi, t, u, cnt, "mc" if mc else "closed", n_g, tail))

    terms = []
    closed_total = 0.0
    per_rep = None
    tail_total = 0.0
    for gi, t, u, cnt, method, n_g, tail in plan:
        if method == "zero":
            terms.append(SeriesTerm(t, u, cnt, "zero", 0.0))
            continue
        tail_total += tail
        sign = -1.0 if t % 2 == 0 else 1.0
        n = np.arange(1, n_g + 1)
        w = sign * cnt * p**t * M ** (-k) * np.exp(n * (k - D) * math.log(M))
        if method == "mc":
            vals = _mc_levels(u, k, M, p, t, n_g, replications, params.seed ^ (0x5EED + 7919 * gi))
            contrib = vals @ w
            per_rep = contrib if per_rep is None else per_rep + contrib
            se_g = float(contrib.std(ddof=1) / math.sqrt(replications)) if replications > 1 else math.inf
            terms.append(SeriesTerm(t, u, cnt, "mc", float(contrib.mean()), se_g))
        else:
            val = math.fsum(w * _exact_expectations(u, k, M, p, t, n_g)) if n_g else 0.0
            closed_total += val
            terms.append(SeriesTerm(t, u, cnt, "closed", val))

    if per_rep is not None:
        total = per_rep + closed_total + q_dk
        value = float(total.mean())
        se = float(total.std(ddof=1) / math.sqrt(replications)) if replications > 1 else math.inf
        reps = replications
    else:
        value = q_dk + closed_total
        se = 0.0
        reps = 0
    half = float(norm.ppf(0.5 + ci_level / 2) * se)
    converged = tail_total <= tolerance * q_dk and half <= tolerance * q_dk
    if not converged:
        notes.append("tolerance not reached within budget")
    n_report = max([pl[5] for pl in plan], default=0)
    return LimitSeriesResult(k, value, n_report, tail_total, se, half, ci_level, reps, converged, terms,
                             "; ".join(notes))


@dataclass
class LimitFunctionals:
    params: ModelParams
    Vbar: list[float]
    var_W: float
    cov: np.ndarray
    series: list[LimitSeriesResult]


def limit_covariance(params: ModelParams, Vbar) -> np.ndarray:
    """Cov(Z_inf^k, Z_inf^l) = Vbar_k Vbar_l Var W_inf."""
    _, var_w = w_infinity_moments(params)
    v = np.asarray(Vbar, dtype=float)
    return np.outer(v, v) * var_w


def limit_functionals(params: ModelParams, **series_kw) -> LimitFunctionals:
    _require_supercritical(params)
    series = [limit_functional_series(params, k, **series_kw) for k in range(params.d + 1)]
    vbar = [s.value for s in series]
    return LimitFunctionals(params, vbar, w_infinity_moments(params)[1], limit_covariance(params, vbar), series)


# ---------------------------------------------------------------------------
# convergence rates


@dataclass(frozen=True)
class RatePrediction:
    k: int
    n: int
    mean_gap: float
    variance_gap: float
    rate: float  # geometric rate of the governing gap


def convergence_rate_predictions(params: ModelParams, n: int, k: int) -> RatePrediction:
    """Gaps E Z_n^k - V_bar_k and Var Z_n^k - Var Z_inf^k for k in {d-1, d}."""
    _require_supercritical(params)
    d, M, p = params.d, params.M, params.p
    m = params.mean_offspring
    if k == d:
        var_gap = (1 - p) / (m - 1) * m ** (-n)
        return RatePrediction(k, n, 0.0, var_gap, 1 / m)
    if k == d - 1:
        mean_gap = d * p * (M - 1) / (M - p) * (p / M) ** n
        if d >= 2:
            beta = surface_variance_exact(params, n).Var_X
            var_gap = beta / (M * p) ** (2 * n) - surface_constants(params).c_bar_2
        else:
            var_gap = math.nan
        return RatePrediction(k, n, mean_gap, var_gap, p / M)
    raise ValueError(f"rate predictions cover k in {{d-1, d}}, got k={k}")
