"""Monte Carlo harness for the rescaled functionals Z_n^k and W_n."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from . import minkowski, theory
from .percolation import ModelParams, check_budget, generate_batch, replication_seeds
from .streaming import StreamingMoments

CHUNK_CELLS = 2**22
EXPERIMENT_COLUMNS = ["d", "M", "p", "n", "R", "k", "stat", "value", "se", "target", "zscore"]


def worker_count() -> int:
    env = os.environ.get("FRACPERC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ReplicationPlan:
    params: ModelParams
    R: int
    functionals: tuple[int, ...] | None = None
    record_trajectories: bool = False
    condition_nonextinct: bool = False
    levels: tuple[int, ...] | None = None
    keep_terminal: bool = True

    def __post_init__(self):
        if self.R < 1:
            raise ValueError("R must be >= 1")
        d = self.params.d
        ks = tuple(k for k in range(d + 1) if minkowski.supported(d)[k]) if self.functionals is None else tuple(self.functionals)
        if not ks:
            raise ValueError("functionals must be nonempty")
        for k in ks:
            if not 0 <= k <= d:
                raise ValueError(f"functional {k} outside 0..{d}")
            if not minkowski.supported(d)[k]:
                raise ValueError(f"V_{k} is not supported in dimension {d}")
        object.__setattr__(self, "functionals", ks)
        lv = tuple(range(self.params.n_max + 1)) if self.levels is None else tuple(sorted(set(self.levels)))
        if any(not 0 <= n <= self.params.n_max for n in lv):
            raise ValueError("levels must lie in 0..n_max")
        object.__setattr__(self, "levels", lv)


@dataclass
class TrajectoryRecord:
    """One replication: W_n and Z_n[k] for the measured levels."""

    replication: int
    seed: int
    levels: list[int]
    N: list[int]
    W: list[float]
    Z: dict[int, list[float]]

    def to_json(self) -> str:
        return json.dumps({"replication": self.replication, "seed": self.seed, "levels": self.levels,
                           "N": self.N, "W": self.W, "Z": {str(k): v for k, v in self.Z.items()}})


@dataclass
class RunResult:
    plan: ReplicationPlan
    seeds: np.ndarray
    moments: dict[int, StreamingMoments]
    conditional: dict[int, StreamingMoments] | None
    terminal: np.ndarray | None  # (R, 1 + K): W, Z_k at n_max
    N: np.ndarray | None = None  # (R, L) when trajectories are recorded
    Z: np.ndarray | None = None  # (R, L, 1 + K)
    extinct: int = 0

    @property
    def components(self) -> list:
        return ["W"] + list(self.plan.functionals)

    def column(self, k) -> int:
        return self.components.index(k)

    def trajectory(self, r: int) -> TrajectoryRecord:
        if self.Z is None:
            raise ValueError("trajectories were not recorded")
        lv = list(self.plan.levels)
        return TrajectoryRecord(r, int(self.seeds[r]), lv, self.N[r].tolist(), self.Z[r, :, 0].tolist(),
                                {k: self.Z[r, :, i + 1].tolist() for i, k in enumerate(self.plan.functionals)})

    def trajectories(self) -> Iterable[TrajectoryRecord]:
        for r in range(self.plan.R):
            yield self.trajectory(r)


def rescale(v: minkowski.MinkowskiVector, n: int, params: ModelParams) -> list:
    """Z_n[k] = M^((k-D) n) v[k] = v[k] M^(kn) / (M^d p)^n."""
    out = []
    m = params.mean_offspring
    for k, vk in enumerate(v.values):
        if vk is None:
            out.append(None)
            continue
        try:
            scaled = float(Fraction(vk) * params.M ** (k * n))
            denom = m**n
            if math.isinf(denom):
                raise OverflowError
            out.append(scaled / denom)
        except OverflowError:
            if vk == 0:
                out.append(0.0)
                continue
            logz = math.log(abs(float(vk))) + n * (k * math.log(params.M) - math.log(m))
            out.append(math.copysign(math.exp(logz), float(vk)))
    return out


def _chunk_size(plan: ReplicationPlan) -> int:
    prm = plan.params
    deepest = max(plan.levels)
    expected = max(1.0, prm.mean_offspring ** deepest)
    return int(max(1, min(plan.R, CHUNK_CELLS // max(1, math.ceil(expected)))))


def _run_chunk(plan: ReplicationPlan, seeds: np.ndarray):
    prm = plan.params
    d, M = prm.d, prm.M
    ks = plan.functionals
    need_geometry = any(k != d for k in ks)
    L = len(plan.levels)
    out = np.zeros((seeds.size, L, 1 + len(ks)))
    counts = np.zeros((seeds.size, L), np.int64)
    pos = {n: i for i, n in enumerate(plan.levels)}
    m = prm.mean_offspring
    deepest = max(plan.levels)
    for lb in generate_batch(d, M, prm.p, deepest, seeds, sort=False, count_last=not need_geometry):
        if lb.level not in pos:
            continue
        i = pos[lb.level]
        scale = m**lb.level
        cnt = lb.counts
        counts[:, i] = cnt
        out[:, i, 0] = cnt / scale
        if need_geometry:
            cb = minkowski.measure_batch(lb.offsets, lb.indices, d, M, lb.level, sorted_segments=False)
            for j, k in enumerate(ks):
                out[:, i, j + 1] = cb.numerators[:, k] / cb.denominators[k] / scale
        else:
            for j, k in enumerate(ks):
                out[:, i, j + 1] = cnt / scale
    return counts, out


def run(plan: ReplicationPlan, cell_budget: int | None = None) -> RunResult:
    """Generate R replications with seeds hash(master, index), stream moments per level."""
    prm = plan.params
    if cell_budget is not None:
        check_budget(prm, cell_budget)
    else:
        check_budget(prm)
    seeds = replication_seeds(prm.seed, 0, plan.R)
    size = _chunk_size(plan)
    bounds = [(s, min(plan.R, s + size)) for s in range(0, plan.R, size)]
    K = 1 + len(plan.functionals)
    moments = {n: StreamingMoments(K) for n in plan.levels}
    cond = {n: StreamingMoments(K) for n in plan.levels} if plan.condition_nonextinct else None
    terminal = np.zeros((plan.R, K)) if plan.keep_terminal and prm.n_max in plan.levels else None
    N_all = np.zeros((plan.R, len(plan.levels)), np.int64) if plan.record_trajectories else None
    Z_all = np.zeros((plan.R, len(plan.levels), K)) if plan.record_trajectories else None
    extinct = 0
    last = plan.levels[-1]

    def work(b):
        return _run_chunk(plan, seeds[b[0]:b[1]])

    workers = min(worker_count(), len(bounds))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = ex.map(work, bounds)
            _collect = list(results)
    else:
        _collect = (work(b) for b in bounds)
    for (lo, hi), (counts, vals) in zip(bounds, _collect):
        alive = counts[:, -1] > 0
        extinct += int((~alive).sum()) if last == prm.n_max else 0
        for i, n in enumerate(plan.levels):
            moments[n].update(vals[:, i, :])
            if cond is not None:
                cond[n].update(vals[alive, i, :])
        if terminal is not None:
            terminal[lo:hi] = vals[:, -1, :]
        if N_all is not None:
            N_all[lo:hi] = counts
            Z_all[lo:hi] = vals
    return RunResult(plan, seeds, moments, cond, terminal, N_all, Z_all, extinct)


# ---------------------------------------------------------------------------
# checks


@dataclass
class FactorizationReport:
    k: int
    vbar: float
    levels: list[int]
    residuals: np.ndarray  # (R, L)
    median_abs_terminal: float
    quantiles_abs_terminal: dict
    threshold: float
    n0: int
    frac_below_all: float
    frac_below_nonextinct: float
    frac_below_extinct: float
    envelope: list[float]  # median |r_n| over nonextinct trajectories
    envelope_fit: "RateFit | None"
    max_abs_residual: float


def factorization_check(result: RunResult, Vbar: Sequence[float], k: int,
                        threshold: float = 0.05, n0: int | None = None) -> FactorizationReport:
    """Residuals r_n = Z_n[k] - Vbar[k] W_n per trajectory."""
    if result.Z is None:
        raise ValueError("factorization_check needs recorded trajectories")
    _require_limit(result.plan.params)
    j = result.column(k)
    Z = result.Z[:, :, j]
    W = result.Z[:, :, 0]
    vbar = float(Vbar[k])
    r = Z - vbar * W
    levels = list(result.plan.levels)
    n0 = levels[len(levels) // 2] if n0 is None else n0
    tail = [i for i, n in enumerate(levels) if n >= n0]
    ok = np.all(np.abs(r[:, tail]) < threshold, axis=1)
    alive = result.N[:, -1] > 0
    a = np.abs(r[:, -1])

    def frac(mask):
        return float(ok[mask].mean()) if mask.any() else math.nan

    env = [float(np.median(np.abs(r[alive, i]))) if alive.any() else 0.0 for i in range(len(levels))]
    fit = None
    fit_idx = [i for i, n in enumerate(levels) if n >= 1]
    if len(fit_idx) >= 4:
        fit = rate_fit([env[i] for i in fit_idx], [levels[i] for i in fit_idx])
    return FactorizationReport(
        k, vbar, levels, r, float(np.median(a)),
        {q: float(np.quantile(a, q)) for q in (0.5, 0.9, 0.99)},
        threshold, n0, frac(np.ones_like(alive)), frac(alive), frac(~alive), env, fit,
        float(np.max(np.abs(r))),
    )


def _require_limit(params: ModelParams):
    if not params.supercritical:
        raise theory.SubcriticalError(
            f"limit checks need M^d p > 1, got {params.mean_offspring:g}")


@dataclass
class CVCheck:
    k: int
    n: int
    statistic: float
    ci_low: float
    ci_high: float
    target: float
    contains: bool
    flag: str = ""


def _cv2(x: np.ndarray) -> float:
    mu = x.mean()
    return float(x.var(ddof=1) / mu**2)


def cv_limit_check(result: RunResult, B: int = 1000, level: float = 0.99, seed: int = 0) -> list[CVCheck]:
    """Squared coefficient of variation of Z_n[k] at n_max against Var W_inf, with a percentile bootstrap CI."""
    prm = result.plan.params
    _require_limit(prm)
    if result.terminal is None:
        raise ValueError("terminal samples were not kept")
    target = theory.w_infinity_moments(prm)[1]
    rng = np.random.default_rng(seed)
    R = result.plan.R
    idx = [rng.integers(0, R, R) for _ in range(B)]
    out = []
    for k in result.plan.functionals:
        x = result.terminal[:, result.column(k)]
        mu, sd = x.mean(), x.std()
        if abs(mu) <= 1e-12 * max(1.0, sd):
            out.append(CVCheck(k, prm.n_max, math.nan, math.nan, math.nan, target, False, "degenerate mean"))
            continue
        if sd == 0:
            stat = 0.0
            lo = hi = 0.0
        else:
            stat = _cv2(x)
            boots = np.array([_cv2(x[i]) for i in idx])
            lo, hi = np.quantile(boots, [(1 - level) / 2, (1 + level) / 2])
        out.append(CVCheck(k, prm.n_max, stat, float(lo), float(hi), target, bool(lo <= target <= hi)))
    return out


@dataclass
class CorrelationCheck:
    n: int
    components: list
    corr: np.ndarray
    flags: list[str] = field(default_factory=list)


def correlation_check(result: RunResult) -> list[CorrelationCheck]:
    """Pairwise sample correlations of the Z_n[k] per level; zero-variance components flagged."""
    out = []
    ks = list(result.plan.functionals)
    for n, mom in result.moments.items():
        corr = mom.correlation()[1:, 1:]
        flags = [f"zero variance for k={k}" for i, k in enumerate(ks) if mom.variance[i + 1] == 0]
        np.fill_diagonal(corr, [1.0 if mom.variance[i + 1] > 0 else np.nan for i in range(len(ks))])
        out.append(CorrelationCheck(n, ks, corr, flags))
    return out


@dataclass
class RateFit:
    rate: float
    slope: float
    intercept: float
    n_points: int
    skipped: bool = False
    diagnostic: str = ""

    def rel_error(self, predicted: float) -> float:
        return abs(self.rate / predicted - 1)


def rate_fit(gaps: Sequence[float], ns: Sequence[int] | None = None) -> RateFit:
    """Least-squares slope of log|gap| against n; exp(slope) is the geometric rate.

    Needs at least 4 levels whose gaps are nonzero and share one sign.
    """
    g = np.asarray(gaps, dtype=float)
    n = np.arange(g.size) if ns is None else np.asarray(ns, dtype=float)
    if g.size < 4:
        return RateFit(math.nan, math.nan, math.nan, int(g.size), True, "fewer than 4 levels")
    if np.any(~np.isfinite(g)) or np.any(g == 0) or not (np.all(g > 0) or np.all(g < 0)):
        return RateFit(math.nan, math.nan, math.nan, int(g.size), True, "gaps are zero or change sign")
    slope, intercept = np.polyfit(n, np.log(np.abs(g)), 1)
    return RateFit(float(math.exp(slope)), float(slope), float(intercept), int(g.size))


def theory_gaps(params: ModelParams, k: int, ns: Sequence[int], kind: str) -> list[float]:
    """Predicted gaps from the theory module: kind is 'mean' or 'variance'."""
    preds = [theory.convergence_rate_predictions(params, n, k) for n in ns]
    return [p.mean_gap if kind == "mean" else p.variance_gap for p in preds]


def variance_increments(result: RunResult, k) -> tuple[list[int], list[float], list[float]]:
    """Successive differences s^2_n - s^2_{n-1} of the sample variance of Z_n[k].

    For k = d these are (Var W_inf)(M^d p - 1)(M^d p)^(-n), so their decay rate is the
    rate of the variance gap itself.  SEs treat the two levels as independent
    (conservative: positively correlated levels reduce the true SE).
    """
    j = result.column(k)
    lv = list(result.plan.levels)
    ns, inc, se = [], [], []
    for a, b in zip(lv[:-1], lv[1:]):
        if b != a + 1:
            continue
        ma, mb = result.moments[a], result.moments[b]
        ns.append(b)
        inc.append(float(mb.variance[j] - ma.variance[j]))
        se.append(float(math.hypot(mb.se_variance[j], ma.se_variance[j])))
    return ns, inc, se


# ---------------------------------------------------------------------------
# output


def summary_rows(result: RunResult) -> list[dict]:
    prm = result.plan.params
    d, M, p = prm.d, prm.M, prm.p
    R = result.plan.R
    rows = []
    var_inf = theory.w_infinity_moments(prm)[1] if prm.supercritical else None

    def row(n, k, stat, value, se=None, target=None):
        z = None
        if se is not None and target is not None and se > 0 and math.isfinite(se):
            z = (value - target) / se
        rows.append({"d": d, "M": M, "p": p, "n": n, "R": R, "k": k, "stat": stat, "value": value,
                     "se": se, "target": target, "zscore": z})

    for n, mom in result.moments.items():
        for i, k in enumerate(result.plan.functionals):
            j = i + 1
            mean_t = var_t = None
            if k == d:
                mean_t, var_t = 1.0, theory.w_moments(prm, n).variance
            elif k == d - 1:
                mean_t = theory.surface_mean(prm, n) / (M * p) ** n
                if d >= 2:
                    var_t = theory.surface_variance_exact(prm, n).Var_X / (M * p) ** (2 * n)
            row(n, k, "mean", float(mom.mean[j]), float(mom.se_mean[j]), mean_t)
            row(n, k, "variance", float(mom.variance[j]), float(mom.se_variance[j]), var_t)
            mu = mom.mean[j]
            cv2 = float(mom.variance[j] / mu**2) if mu != 0 else math.nan
            row(n, k, "cv2", cv2, None, var_inf)
        if result.conditional is not None:
            cm = result.conditional[n]
            for i, k in enumerate(result.plan.functionals):
                j = i + 1
                row(n, k, "mean|nonextinct", float(cm.mean[j]), float(cm.se_mean[j]))
                row(n, k, "variance|nonextinct", float(cm.variance[j]), float(cm.se_variance[j]))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] = EXPERIMENT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def trajectories_ndjson(result: RunResult) -> str:
    return "".join(t.to_json() + "\n" for t in result.trajectories())
