"""The acceptance experiments, shared by the test-suite and ``fracperc verify``."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from . import experiments as ex
from . import minkowski, theory
from .streaming import StreamingMoments
from .percolation import (ModelParams, generate, generate_intersection, literal_intersection,
                          replication_seeds)

# replication counts per profile; "smoke" caps the Monte Carlo items at 10^4
PROFILES = {
    "full": {"R3": 10**5, "R4": 10**5, "R5": 10**5, "R6": 10**4, "R7": 10**4, "R8": 10**6,
             "R9": 50_000, "R10": 10**5},
    "smoke": {"R3": 10**4, "R4": 10**4, "R5": 10**4, "R6": 10**4, "R7": 10**4, "R8": 10**6,
              "R9": 50_000, "R10": 10**4},
}
Z_MAX = 4.0


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    checks: list[tuple[str, bool, str]] = field(default_factory=list)  # (label, ok, detail)
    seconds: float = 0.0

    def line(self) -> str:
        bad = [c[0] for c in self.checks if not c[1]]
        tail = "" if not bad else " (failed: " + ", ".join(bad) + ")"
        return f"{'PASS' if self.passed else 'FAIL'} criterion {self.number}: {self.name}{tail}"

    def to_dict(self) -> dict:
        return {"criterion": self.number, "name": self.name, "passed": self.passed, "seconds": round(self.seconds, 2),
                "checks": [{"check": a, "ok": b, "detail": c} for a, b, c in self.checks]}


class _Checks:
    def __init__(self):
        self.items = []

    def add(self, label, ok, detail=""):
        self.items.append((label, bool(ok), detail))

    def within(self, label, value, target, se, z_max):
        z = (value - target) / se if se > 0 else (0.0 if value == target else math.inf)
        self.add(label, abs(z) <= z_max, f"value={value:.6g} target={target:.6g} se={se:.3g} z={z:+.2f}")
        return z


def _zeta(z_max):
    return Z_MAX if z_max is None else z_max


# ---------------------------------------------------------------------------
# enumeration oracles


def level_one_configurations(d: int, M: int):
    """All 2^(M^d) level-1 configurations as (retained cell tuple, count)."""
    cells = list(itertools.product(range(M), repeat=d))
    for mask in range(2 ** len(cells)):
        kept = [c for i, c in enumerate(cells) if mask >> i & 1]
        yield kept


def level_one_surface_moments(d: int, M: int, p: float) -> tuple[float, float]:
    """E and Var of V_{d-1}(F_1) by exhaustive enumeration, with exact geometry."""
    n_cells = M**d
    e1 = e2 = 0.0
    for kept in level_one_configurations(d, M):
        prob = p ** len(kept) * (1 - p) ** (n_cells - len(kept))
        v = float(minkowski.surface(minkowski.grid_from_cells(kept, d, M, 1), exact=True)) if kept else 0.0
        e1 += prob * v
        e2 += prob * v * v
    return e1, e2 - e1 * e1


# ---------------------------------------------------------------------------
# criteria


def criterion_1(profile="full", z_max=None, seed=1):
    chk = _Checks()
    rng = np.random.default_rng(seed)
    bad = 0
    combos = [(d, M) for d in (1, 2, 3) for M in (2, 3)]
    for i in range(100):
        d, M = combos[i % len(combos)]
        n = min(8, int(math.log(2**21) / (d * math.log(M))))
        p = float(rng.uniform(max(0.3, M**-d), 1.0))
        r = generate(ModelParams(d, M, p, n, seed=int(rng.integers(2**62))))
        for level, grid in enumerate(r.grids):
            if minkowski.volume(grid, exact=True) != Fraction(grid.count, M ** (d * level)):
                bad += 1
    chk.add("V_d(F_n) == N_n M^(-dn) for 100 realizations", bad == 0, f"{bad} mismatching levels")
    return chk


def criterion_2(profile="full", z_max=None, seed=2):
    chk = _Checks()
    rng = np.random.default_rng(seed)
    exact_bad = float_bad = 0
    worst = 0.0
    for _ in range(1000):
        d = int(rng.choice([2, 3]))
        M = int(rng.choice([2, 3]))
        level = int(rng.integers(1, 3))
        side = M**level
        k = int(rng.integers(1, 13))
        lin = rng.choice(side**d, size=min(k, side**d), replace=False)
        cells = [tuple(int(x) for x in np.unravel_index(j, (side,) * d)) for j in lin]
        grid = minkowski.grid_from_cells(cells, d, M, level)
        oracle = minkowski.brute_force_intrinsic(cells, d, Fraction(1, side))
        exact = minkowski.intrinsic_all(grid, exact=True)
        fl = minkowski.intrinsic_all(grid)
        if tuple(exact.values) != tuple(oracle.values):
            exact_bad += 1
        err = max(abs(float(a) - float(b)) for a, b in zip(fl.values, oracle.values))
        worst = max(worst, err)
        if err > 1e-12:
            float_bad += 1
    chk.add("rational mode equals brute force", exact_bad == 0, f"{exact_bad}/1000 mismatches")
    chk.add("float mode within 1e-12", float_bad == 0, f"max abs error {worst:.2e}")
    return chk


def criterion_3(profile="full", z_max=None, seed=3):
    chk = _Checks()
    zm = _zeta(z_max)
    prm = ModelParams(2, 3, 0.6, 5, seed=seed)
    res = ex.run(ex.ReplicationPlan(prm, PROFILES[profile]["R3"], functionals=(2,), levels=(5,)))
    mom = res.moments[5]
    j = res.column(2)
    scale = prm.p**5  # V_d = p^n W_n
    target = theory.volume_moments(prm, 5)
    chk.within("mean V_2(F_5)", mom.mean[j] * scale, target.mean, mom.se_mean[j] * scale, zm)
    chk.within("variance V_2(F_5)", mom.variance[j] * scale**2, target.variance, mom.se_variance[j] * scale**2, zm)
    return chk


def criterion_4(profile="full", z_max=None, seed=4):
    chk = _Checks()
    zm = _zeta(z_max)
    prm = ModelParams(2, 2, 0.7, 6, seed=seed)
    e1, _ = level_one_surface_moments(2, 2, 0.7)
    chk.add("level-1 enumeration equals 1.82", abs(e1 - 1.82) < 1e-12 and abs(theory.surface_mean(prm, 1) - e1) < 1e-12,
            f"enumeration={e1!r} closed form={theory.surface_mean(prm, 1)!r}")
    res = ex.run(ex.ReplicationPlan(prm, PROFILES[profile]["R4"], functionals=(1,), levels=(6,)))
    mom = res.moments[6]
    j = res.column(1)
    scale = (prm.M * prm.p) ** 6  # Z^1 = V_1 / (Mp)^n in the plane
    chk.within("mean V_1(F_6)", mom.mean[j] * scale, theory.surface_mean(prm, 6), mom.se_mean[j] * scale, zm)
    return chk


def criterion_5(profile="full", z_max=None, seed=5):
    chk = _Checks()
    zm = _zeta(z_max)
    for p in (0.5, 0.7, 0.9):
        _, var1 = level_one_surface_moments(2, 2, p)
        rec = theory.surface_variance_exact(ModelParams(2, 2, p), 1).Var_X
        chk.add(f"n=1 recursion equals enumeration (p={p})", abs(rec - var1) < 1e-12, f"recursion={rec!r} enumeration={var1!r}")
    prm = ModelParams(2, 2, 0.8, 5, seed=seed)
    res = ex.run(ex.ReplicationPlan(prm, PROFILES[profile]["R5"], functionals=(1,)))
    j = res.column(1)
    for n in range(1, 6):
        mom = res.moments[n]
        scale = (prm.M * prm.p) ** (2 * n)
        chk.within(f"variance V_1(F_{n})", mom.variance[j] * scale, theory.surface_variance_exact(prm, n).Var_X,
                   mom.se_variance[j] * scale, zm)
    beta = theory.surface_variance_exact(prm, 20).Var_X
    c2 = theory.surface_constants(prm).c_bar_2
    ratio = beta / (c2 * (prm.M * prm.p) ** 40)
    chk.add("beta_20 / (c2 (Mp)^40) within 1e-3 of 1", abs(ratio - 1) < 1e-3, f"ratio={ratio:.8f}")
    return chk


def criterion_6(profile="full", z_max=None, seed=6):
    chk = _Checks()
    zm = _zeta(z_max)
    prm = ModelParams(2, 2, 0.8, 10, seed=seed)
    res = ex.run(ex.ReplicationPlan(prm, PROFILES[profile]["R6"], functionals=(2,), levels=(10,)))
    mom = res.moments[10]
    target = theory.w_infinity_moments(prm)[1]
    chk.within("mean W_10", mom.mean[0], 1.0, mom.se_mean[0], zm)
    rel = mom.variance[0] / target - 1
    chk.add("variance W_10 within 10% of 1/11", abs(rel) <= 0.10, f"variance={mom.variance[0]:.5f} rel={rel:+.3%}")
    return chk


def criterion_7(profile="full", z_max=None, seed=7):
    chk = _Checks()
    prm = ModelParams(2, 2, 0.8, 8, seed=seed)
    res = ex.run(ex.ReplicationPlan(prm, PROFILES[profile]["R7"], record_trajectories=True))
    for c in ex.cv_limit_check(res, B=1000, level=0.99, seed=seed):
        chk.add(f"CV^2 of Z_8[{c.k}] bootstrap 99% CI holds 1/11", c.contains,
                f"stat={c.statistic:.5f} CI=[{c.ci_low:.5f}, {c.ci_high:.5f}] target={c.target:.5f} {c.flag}".rstrip())
    corr = [c for c in ex.correlation_check(res) if c.n == 8][0]
    r12 = corr.corr[corr.components.index(1), corr.components.index(2)]
    chk.add("Corr(Z_8[1], Z_8[2]) >= 0.99", r12 >= 0.99, f"corr={r12:.5f}")
    vbar = [None, None, 1.0]
    fac = ex.factorization_check(res, vbar, 2)
    chk.add("k=d factorization residual identically 0", fac.max_abs_residual == 0.0, f"max |r|={fac.max_abs_residual}")
    return chk


def criterion_8(profile="full", z_max=None, seed=8):
    chk = _Checks()
    prm = ModelParams(2, 2, 0.8, 6, seed=seed)
    ns = list(range(1, 11))
    m = prm.mean_offspring
    f = ex.rate_fit(ex.theory_gaps(prm, 2, ns, "variance"), ns)
    chk.add("theory k=d variance gaps: rate (M^d p)^-1", f.rel_error(1 / m) < 1e-10, f"rate={f.rate!r}")
    f = ex.rate_fit(ex.theory_gaps(prm, 1, ns, "mean"), ns)
    chk.add("theory k=d-1 mean gaps: rate p/M", f.rel_error(prm.p / prm.M) < 1e-10, f"rate={f.rate!r}")
    res = ex.run(ex.ReplicationPlan(prm, PROFILES[profile]["R8"], functionals=(2,), keep_terminal=False))
    sn, inc, _ = ex.variance_increments(res, 2)
    f = ex.rate_fit(inc, sn)
    ok = not f.skipped and f.rel_error(1 / m) <= 0.15
    chk.add("simulated k=d variance rate within 15% of 1/3.2", ok, f"rate={f.rate:.5f} {f.diagnostic}".rstrip())
    return chk


def criterion_9(profile="full", z_max=None, seed=9):
    chk = _Checks()
    R = PROFILES[profile]["R9"]
    for M, p in itertools.product((2, 3), (0.7, 0.9)):
        prm = ModelParams(2, M, p, seed=seed)
        vd = theory.limit_functional_series(prm, 2)
        chk.add(f"V_bar_2 == 1 (M={M}, p={p})", vd.value == 1.0, f"value={vd.value!r}")
        c1 = theory.surface_constants(prm).c_bar_1
        ex1 = theory.limit_functional_series(prm, 1)
        chk.add(f"exact V_bar_1 == c1 (M={M}, p={p})", abs(ex1.value - c1) < 1e-12, f"value={ex1.value!r} c1={c1!r}")
        mc = theory.limit_functional_series(prm, 1, force_mc=True, replications=R)
        lo, hi = mc.ci
        rel = mc.ci_halfwidth / abs(mc.value)
        chk.add(f"Monte Carlo V_bar_1 CI holds c1, half-width <= 1% (M={M}, p={p})", lo <= c1 <= hi and rel <= 0.01,
                f"value={mc.value:.5f} CI=[{lo:.5f}, {hi:.5f}] c1={c1:.5f} half-width={rel:.3%}")
    return chk


def criterion_10(profile="full", z_max=None, seed=10):
    chk = _Checks()
    zm = _zeta(z_max)
    R = PROFILES[profile]["R10"]
    n = 3
    base = ModelParams(2, 2, 0.8, n)
    lit_n1 = np.empty(R, np.int64)
    fast_n1 = np.empty(R, np.int64)
    vol = np.empty(R)
    lit_seeds = replication_seeds(seed, 0, R)
    fast_seeds = replication_seeds(seed + 1, 0, R)
    for i in range(R):
        r = literal_intersection(ModelParams(2, 2, 0.8, n, seed=int(lit_seeds[i])), 2)
        lit_n1[i] = r.grids[1].count
        vol[i] = r.grids[n].count / 4**n
        fast_n1[i] = generate_intersection(ModelParams(2, 2, 0.8, 1, seed=int(fast_seeds[i])), 2).grids[1].count
    support = np.arange(5)
    table = np.array([[np.sum(lit_n1 == k) for k in support], [np.sum(fast_n1 == k) for k in support]])
    table = table[:, table.sum(axis=0) > 0]
    _, pval, _, _ = stats.chi2_contingency(table)
    chk.add("N_1 literal vs p^2 percolation (chi-square, 1%)", pval > 0.01, f"p-value={pval:.4f}")
    target = theory.intersection_volume_moments(base, 2, n)
    sm = StreamingMoments.from_samples(vol)
    chk.within(f"mean V_2 of intersection at n={n}", sm.mean[0], target.mean, sm.se_mean[0], zm)
    chk.within(f"variance V_2 of intersection at n={n}", sm.variance[0], target.variance, sm.se_variance[0], zm)
    return chk


CRITERIA = {
    1: ("exact volume identity", criterion_1),
    2: ("Minkowski oracle equivalence", criterion_2),
    3: ("volume moments", criterion_3),
    4: ("surface mean", criterion_4),
    5: ("surface variance recursion", criterion_5),
    6: ("W_inf moment targets", criterion_6),
    7: ("factorization and covariance structure", criterion_7),
    8: ("convergence rates", criterion_8),
    9: ("limit functional series", criterion_9),
    10: ("intersection law", criterion_10),
}


def run_criterion(number: int, profile: str = "full", z_max: float | None = None) -> CriterionResult:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    name, fn = CRITERIA[number]
    t0 = time.perf_counter()
    chk = fn(profile, z_max)
    ok = all(c[1] for c in chk.items)
    return CriterionResult(number, name, ok, chk.items, time.perf_counter() - t0)


def run_all(profile: str = "smoke", only=None, z_max: float | None = None, echo=None) -> list[CriterionResult]:
    out = []
    for k in sorted(CRITERIA if only is None else only):
        res = run_criterion(k, profile, z_max)
        if echo is not None:
            echo(res.line())
        out.append(res)
    return out
