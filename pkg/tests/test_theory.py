import itertools
import math

import numpy as np
import pytest

from fracperc import acceptance, experiments as ex, minkowski as mk, theory
from fracperc.percolation import ModelParams

from oracles import exact_surface_moments


def P(d, M, p, n=0, seed=0):
    return ModelParams(d, M, p, n, seed=seed)


def test_dimension_and_gw():
    assert theory.dimension(P(2, 2, 0.5)) == pytest.approx(1.0)
    g = theory.gw_moments(P(2, 2, 0.7), 2)
    assert g.mean == pytest.approx(7.84)
    # (1-p)/(m-1) m^n (m^n - 1) at m = 2.8, n = 2
    assert g.variance == pytest.approx(8.9376, rel=1e-12)
    assert theory.w_moments(P(2, 2, 0.8), 0).variance == 0


def test_volume_moments():
    v = theory.volume_moments(P(2, 2, 0.7), 1)
    assert v.mean == pytest.approx(0.7)
    assert v.variance == pytest.approx(0.0525, rel=1e-12)
    assert theory.volume_moments(P(2, 3, 0.6), 5).mean == pytest.approx(0.07776)
    for args in [(2, 2, 0.7), (3, 3, 0.2), (1, 2, 0.5), (2, 2, 0.25)]:
        for n in range(0, 12):
            assert theory.volume_moments(P(*args), n).variance == pytest.approx(
                theory.volume_variance_sum_form(P(*args), n), rel=1e-12, abs=1e-300)
    assert theory.volume_moments(P(2, 2, 1.0), 4).variance == 0


def test_volume_variance_continuous_at_criticality():
    # M^d p = 1 exactly and just off it
    crit = theory.volume_moments(P(2, 2, 0.25), 6).variance
    near = theory.volume_moments(P(2, 2, 0.25 * (1 + 1e-9)), 6).variance
    assert near == pytest.approx(crit, rel=1e-7)


def test_w_infinity_requires_supercritical():
    assert theory.w_infinity_moments(P(2, 2, 0.8)) == (1.0, pytest.approx(1 / 11))
    with pytest.raises(theory.SubcriticalError):
        theory.w_infinity_moments(P(2, 2, 0.25))


def test_surface_mean_forms_agree():
    for args in [(2, 2, 0.7), (3, 2, 0.5), (2, 3, 0.9), (3, 3, 0.2), (1, 2, 0.6)]:
        for n in range(10):
            a = theory.surface_mean_recursion(P(*args), n)
            b = theory.surface_mean_closed(P(*args), n)
            assert a == pytest.approx(b, rel=1e-11)
    assert theory.surface_mean(P(2, 2, 0.7), 1) == pytest.approx(1.82, abs=1e-12)
    assert theory.surface_mean(P(2, 2, 1.0), 5) == pytest.approx(2.0)


def test_level_one_enumeration():
    e1, var1 = acceptance.level_one_surface_moments(2, 2, 0.7)
    assert e1 == pytest.approx(1.82, abs=1e-12)
    assert var1 == pytest.approx(theory.surface_variance_exact(P(2, 2, 0.7), 1).Var_X, abs=1e-12)
    # 3d, M = 2: 256 configurations
    e1, var1 = acceptance.level_one_surface_moments(3, 2, 0.6)
    assert e1 == pytest.approx(theory.surface_mean(P(3, 2, 0.6), 1), abs=1e-12)
    assert var1 == pytest.approx(theory.surface_variance_exact(P(3, 2, 0.6), 1).Var_X, abs=1e-12)


@pytest.mark.parametrize("d,M,p,n", [(2, 2, 0.7, 2), (2, 2, 0.7, 3), (2, 2, 0.5, 4), (2, 3, 0.6, 2),
                                     (2, 3, 0.6, 3), (3, 2, 0.7, 2), (3, 2, 0.8, 3), (2, 4, 0.5, 2), (3, 3, 0.5, 2)])
def test_surface_variance_recursion_matches_exact_oracle(d, M, p, n):
    var, mean = exact_surface_moments(d, M, p, n)
    st = theory.surface_variance_exact(P(d, M, p), n)
    assert st.E_X == pytest.approx(mean, rel=1e-12)
    assert st.Var_X == pytest.approx(var, rel=1e-11)


def test_surface_variance_oracle_value():
    assert theory.surface_variance_exact(P(2, 2, 0.7), 3).Var_X == pytest.approx(0.8249371, abs=5e-8)


def test_surface_constants_and_asymptotics():
    c = theory.surface_constants(P(2, 2, 0.8))
    assert c.c_bar_1 == pytest.approx(2 * 2 * 0.2 / 1.2)
    assert c.c_bar_2 == pytest.approx(c.c_bar_1**2 / 11)
    assert theory.surface_constants(P(2, 2, 0.2)).c_bar_2 is None
    beta = theory.surface_variance_exact(P(2, 2, 0.8), 20).Var_X
    assert beta / (c.c_bar_2 * 1.6**40) == pytest.approx(1, abs=1e-3)
    assert theory.surface_variance_asymptotic(P(2, 2, 0.8), 3).regime == "upper"
    assert theory.surface_variance_asymptotic(P(2, 2, math.sqrt(0.5)), 3).regime == "log"
    assert theory.surface_variance_asymptotic(P(2, 2, 0.6), 3).regime == "lower"
    assert theory.surface_variance_asymptotic(P(3, 2, 0.5), 3).regime == "log"


@pytest.mark.parametrize("regime_p", [0.8, math.sqrt(0.5), 0.6])
def test_asymptotic_ratio_tends_to_one(regime_p):
    prm = P(2, 2, regime_p)
    c2 = theory.surface_constants(prm).c_bar_2
    r = [theory.surface_variance_exact(prm, n).Var_X / (c2 * (2 * regime_p) ** (2 * n)) for n in (20, 40, 80)]
    assert abs(r[-1] - 1) < abs(r[0] - 1) or abs(r[-1] - 1) < 1e-9
    assert abs(r[-1] - 1) < 0.05


def test_intersection_groups_small():
    g = theory.intersection_groups(2, 2)
    # 4 facet pairs, 2 diagonal pairs, 4 triples, 1 quadruple
    assert g == {(2, 1): 4, (2, 0): 2, (3, 0): 4, (4, 0): 1}
    g3 = theory.intersection_groups(3, 2)
    assert sum(g3.values()) == 2**8 - 1 - 8
    assert g3[(2, 2)] == 12


def _trace_enumeration(u, M, p, t, k):
    """E V_k of the intersection of t independent level-1 traces on the unit u-cube."""
    cells = list(itertools.product(range(M), repeat=u))
    configs = list(itertools.product([0, 1], repeat=len(cells)))
    probs = [p ** sum(c) * (1 - p) ** (len(c) - sum(c)) for c in configs]
    total = 0.0
    for combo in itertools.product(range(len(configs)), repeat=t):
        sets = [[cells[i] for i, b in enumerate(configs[j]) if b] for j in combo]
        if any(not s for s in sets):
            continue
        from oracles import cube_set_intersection_intrinsic
        v = cube_set_intersection_intrinsic(sets, u)[k] / M**k
        total += math.prod(probs[j] for j in combo) * float(v)
    return total


@pytest.mark.parametrize("u,M,t,k", [(1, 2, 2, 0), (1, 3, 2, 0), (1, 2, 3, 0), (2, 2, 2, 0), (2, 2, 2, 1)])
def test_trace_intersection_mean_by_enumeration(u, M, t, k):
    p = 0.7
    assert theory.trace_intersection_mean(u, k, M, p, t, 1) == pytest.approx(_trace_enumeration(u, M, p, t, k), abs=1e-12)


def test_single_trace_reproduces_surface_mean():
    for M, p in [(2, 0.7), (3, 0.55)]:
        for m in range(6):
            assert theory.trace_intersection_mean(2, 1, M, p, 1, m) == pytest.approx(
                theory.surface_mean(P(2, M, p), m), rel=1e-10)


def test_trace_intersection_mean_monte_carlo():
    from fracperc.theory import _mc_levels
    R = 4000
    vals = _mc_levels(2, 0, 2, 0.8, 2, 5, R, seed=3)
    for m in range(5):
        mean, se = vals[:, m].mean(), vals[:, m].std(ddof=1) / math.sqrt(R)
        exact = theory.trace_intersection_mean(2, 0, 2, 0.8, 2, m)
        assert abs(mean - exact) <= 4 * se + 1e-12


def test_limit_series_known_values():
    for d, M, p in [(2, 2, 0.7), (2, 3, 0.9), (3, 2, 0.8), (3, 3, 0.5), (1, 3, 0.7)]:
        prm = P(d, M, p)
        assert theory.limit_functional_series(prm, d).value == 1.0
        c1 = theory.surface_constants(prm).c_bar_1
        assert theory.limit_functional_series(prm, d - 1).value == pytest.approx(c1, rel=1e-12)
    # full cube: every boundary term cancels
    assert theory.limit_functional_series(P(2, 2, 1.0), 0).value == pytest.approx(0, abs=1e-14)
    # the series itself is defined below criticality as well
    sub = theory.limit_functional_series(P(2, 2, 0.2), 1)
    assert sub.converged and math.isfinite(sub.value)
    assert sub.value == pytest.approx(theory.surface_constants(P(2, 2, 0.2)).c_bar_1, rel=1e-12)


def test_series_partial_sums_equal_expected_rescaled_functionals():
    # cutting the series at n gives E Z_n^k exactly
    prm = P(2, 2, 0.8, 4, seed=31)
    res = ex.run(ex.ReplicationPlan(prm, 6000))
    for k in (0, 1):
        j = res.column(k)
        for n in range(1, 5):
            exp = theory.limit_functional_series(P(2, 2, 0.8), k, cutoff=n).value
            mom = res.moments[n]
            assert abs(mom.mean[j] - exp) <= 4 * mom.se_mean[j]


def test_forced_monte_carlo_series_agrees():
    prm = P(2, 3, 0.7, seed=5)
    exact = theory.limit_functional_series(prm, 0).value
    mc = theory.limit_functional_series(prm, 0, force_mc=True, replications=3000)
    lo, hi = mc.ci
    assert lo <= exact <= hi
    assert mc.replications == 3000 and mc.se > 0


def test_limit_functionals_covariance():
    lf = theory.limit_functionals(P(2, 2, 0.8))
    assert lf.cov[2, 2] == pytest.approx(1 / 11)
    assert lf.cov[1, 1] == pytest.approx(theory.surface_constants(P(2, 2, 0.8)).c_bar_2)
    assert lf.cov[0, 1] == pytest.approx(lf.Vbar[0] * lf.Vbar[1] / 11)


def test_rate_predictions():
    prm = P(2, 2, 0.8)
    r = theory.convergence_rate_predictions(prm, 3, 2)
    assert r.variance_gap == pytest.approx(1 / 11 * 3.2**-3)
    assert r.mean_gap == 0
    r = theory.convergence_rate_predictions(prm, 3, 1)
    assert r.mean_gap == pytest.approx(theory.surface_mean(prm, 3) / 1.6**3 - theory.surface_constants(prm).c_bar_1)
    with pytest.raises(ValueError):
        theory.convergence_rate_predictions(prm, 3, 0)


def test_intersection_volume_moments():
    m = theory.intersection_volume_moments(P(2, 2, 0.8), 2, 3)
    assert m.mean == pytest.approx(0.64**3)
    assert m.variance == pytest.approx(theory.volume_moments(P(2, 2, 0.64), 3).variance)
