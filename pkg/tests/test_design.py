import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from mrpkit.cells import CellTable, CovariateSchema, Microdata, build_cell_table, stack_samples
from mrpkit.design import (
    EstimateSummary,
    dr_mean,
    fit_inclusion_model,
    greg_mean,
    greg_weights,
    ipw_mean,
    jackknife_se,
    logistic_irls,
    poststratified_mean,
    rake_weights,
    raking_mean,
    trim_weights,
    unweighted_mean,
)
from mrpkit.errors import DataError, SeparationError

from conftest import random_microdata
from oracles import unit_estimates


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_unw_and_ps_match_unit_oracle(seed):
    rng = np.random.default_rng(seed)
    schema = CovariateSchema([("a", list("abc")), ("b", list("xyzw"))])
    n = int(rng.integers(30, 200))
    codes = np.column_stack([rng.integers(0, 3, n), rng.integers(0, 4, n)])
    # every occupied cell gets at least two units so all variances exist
    codes = np.concatenate([codes, codes])
    y = rng.normal(size=codes.shape[0]) * 3 + codes[:, 0]
    data = Microdata(schema, codes, y)
    N = {c: int(rng.integers(200, 2000)) for c in range(schema.n_cells)}
    pop = CellTable(schema, list(N), list(N.values()), role="population")
    lin = schema.linear(codes).tolist()
    unw, var_unw, ps, var_ps = unit_estimates(lin, y.tolist(), N)
    tab = build_cell_table(data)
    u = unweighted_mean(tab, se="conditional")[0]
    srs = unweighted_mean(tab)[0]
    assert abs(srs.se**2 - np.var(y, ddof=1) / len(y)) < 1e-12
    p = poststratified_mean(tab, pop)[0]
    assert abs(u.estimate - unw) < 1e-12
    assert abs(u.se**2 - var_unw) < 1e-12
    assert abs(p.estimate - ps) < 1e-12
    assert abs(p.se**2 - var_ps) < 1e-12


def test_ps_renormalises_over_covered_cells(schema2):
    sample = CellTable(schema2, [0, 1], [2, 2], [1.0, 3.0], [1.0, 1.0])
    pop = CellTable(schema2, [0, 1, 2], [10, 30, 60], role="population")
    est = poststratified_mean(sample, pop)[0]
    assert est.estimate == pytest.approx((10 * 1 + 30 * 3) / 40)
    assert "uncovered_mass=0.6" in est.note


def test_ps_requires_overlap(schema2):
    sample = CellTable(schema2, [0], [2], [1.0], [1.0])
    pop = CellTable(schema2, [3], [10], role="population")
    with pytest.raises(DataError):
        poststratified_mean(sample, pop)


def test_summary_normal_interval():
    s = EstimateSummary.normal("overall", "X", 1.0, 0.5)
    assert s.ci_high - s.estimate == pytest.approx(1.959963984540054 * 0.5)


# ---------------------------------------------------------------------------
# raking and GREG


def _ipf_2x2_oracle(n, r, c):
    """Raked 2x2 table: same odds ratio as n, margins r and c (quadratic in t11)."""
    OR = n[0, 0] * n[1, 1] / (n[0, 1] * n[1, 0])
    # t11 (r2 - c1 + t11) = OR (r1 - t11)(c1 - t11)
    a = 1 - OR
    b = r[1] - c[0] + OR * (r[0] + c[0])
    cc = -OR * r[0] * c[0]
    roots = np.roots([a, b, cc]) if abs(a) > 1e-14 else np.array([-cc / b])
    lo, hi = max(0.0, c[0] - r[1]), min(r[0], c[0])
    t11 = float([x.real for x in roots if lo - 1e-9 <= x.real <= hi + 1e-9][0])
    return np.array([[t11, r[0] - t11], [c[0] - t11, r[1] - c[0] + t11]])


@pytest.mark.parametrize("counts, r, c", [
    ([[3, 1], [2, 4]], [40.0, 60.0], [55.0, 45.0]),
    ([[5, 5], [5, 5]], [30.0, 70.0], [20.0, 80.0]),
    ([[1, 6], [7, 2]], [500.0, 500.0], [100.0, 900.0]),
])
def test_raking_2x2_matches_closed_form(counts, r, c):
    schema = CovariateSchema([("u", ["0", "1"]), ("v", ["0", "1"])])
    counts = np.array(counts)
    codes = np.array([[i, j] for i in range(2) for j in range(2) for _ in range(counts[i, j])])
    data = Microdata(schema, codes, np.zeros(len(codes)))
    wv = rake_weights(data, {"u": r, "v": c})
    table = np.zeros((2, 2))
    np.add.at(table, (codes[:, 0], codes[:, 1]), wv.values)
    np.testing.assert_allclose(table, _ipf_2x2_oracle(counts, r, c), atol=1e-8)
    assert wv.converged


def test_raked_margins_hit_targets(rng):
    schema = CovariateSchema([("a", list("abc")), ("b", list("xyzw")), ("c", list("pq"))])
    data = random_microdata(schema, 400, rng)
    margins = {"a": [3000.0, 5000.0, 2000.0], "b": [1000.0, 2000.0, 3000.0, 4000.0], "c": [6000.0, 4000.0]}
    wv = rake_weights(data, margins)
    for j, (name, target) in enumerate(margins.items()):
        got = np.bincount(data.codes[:, j], weights=wv.values, minlength=len(target))
        np.testing.assert_allclose(got, target, rtol=0, atol=1e-8)


def test_single_margin_raking_and_saturated_greg_equal_ps(rng):
    schema = CovariateSchema([("g", list("abcde"))])
    data = random_microdata(schema, 300, rng)
    N = np.array([1200.0, 800.0, 3000.0, 500.0, 1500.0])
    pop = CellTable(schema, np.arange(5), N, role="population")
    ps = poststratified_mean(build_cell_table(data), pop)[0].estimate
    rk = raking_mean(data, {"g": N})[0].estimate
    gr = greg_mean(data, {"g": N})[0].estimate
    assert rk == ps
    assert abs(gr - ps) < 1e-10


def test_greg_weights_calibrate(rng):
    schema = CovariateSchema([("a", list("abc")), ("b", list("xy"))])
    data = random_microdata(schema, 200, rng)
    margins = {"a": [400.0, 300.0, 300.0], "b": [550.0, 450.0]}
    w, _ = greg_weights(data, margins)
    for j, (name, target) in enumerate(margins.items()):
        np.testing.assert_allclose(np.bincount(data.codes[:, j], weights=w), target, atol=1e-9)


def test_raking_structural_zero_and_inconsistent_totals(schema2):
    data = Microdata(schema2, np.array([[0, 0], [1, 0], [2, 0]]), np.zeros(3))
    with pytest.raises(DataError, match="structural zero"):
        rake_weights(data, {"b": [5.0, 5.0]})
    with pytest.raises(DataError, match="disagree"):
        rake_weights(data, {"a": [1.0, 1.0, 1.0], "b": [4.0, 0.0]})


# ---------------------------------------------------------------------------
# inclusion model, IPW, DR


def _negloglik(beta, X, s, t):
    eta = X @ beta
    return -(s @ eta - t @ np.logaddexp(0, eta))


def test_logistic_irls_matches_direct_optimiser(rng):
    X = np.column_stack([np.ones(40), rng.normal(size=(40, 2))])
    t = rng.integers(5, 30, 40).astype(float)
    p = 1 / (1 + np.exp(-(X @ [0.3, -0.8, 0.5])))
    s = rng.binomial(t.astype(int), p).astype(float)
    beta, cov, converged, _ = logistic_irls(X, s, t, ridge=0.0)
    ref = optimize.minimize(_negloglik, np.zeros(3), args=(X, s, t), method="BFGS", options={"gtol": 1e-10})
    assert converged
    np.testing.assert_allclose(beta, ref.x, atol=1e-5)


def test_inclusion_model_separation(schema2):
    codes = np.array([[0, 0]] * 5 + [[1, 0]] * 5 + [[0, 1]] * 5 + [[1, 1]] * 5)
    inc = np.array([1] * 10 + [0] * 10)
    data = Microdata(schema2, codes, included=inc)
    with pytest.raises(SeparationError):
        fit_inclusion_model(data, "b")


def test_ipw_hajek_is_scale_invariant(rng, schema2):
    data = random_microdata(schema2, 100, rng)
    psi = rng.uniform(0.1, 0.9, 100)
    a = ipw_mean(data, psi, groups="a")
    b = ipw_mean(data, psi * 0.01, groups="a")
    np.testing.assert_allclose([s.estimate for s in a], [s.estimate for s in b], rtol=1e-12)


def test_ipw_recovers_mean_under_known_propensity(rng):
    schema = CovariateSchema([("g", list("ab"))])
    N = 200_000
    g = rng.integers(0, 2, N)
    y = np.where(g == 1, 5.0, 1.0) + rng.normal(size=N)
    psi = np.where(g == 1, 0.02, 0.005)
    take = rng.random(N) < psi
    data = Microdata(schema, g[take, None], y[take])
    est = ipw_mean(data, psi[take])[0]
    assert abs(est.estimate - y.mean()) < 4 * est.se


def test_trim_weights():
    w = np.arange(1.0, 101.0)
    t = trim_weights(w, (0.05, 0.95))
    assert t.min() == pytest.approx(np.quantile(w, 0.05)) and t.max() == pytest.approx(np.quantile(w, 0.95))


def test_dr_exact_when_outcome_linear(rng):
    schema = CovariateSchema([("a", list("abc")), ("b", list("xy"))])
    pop_codes = np.column_stack([rng.integers(0, 3, 5000), rng.integers(0, 2, 5000)])
    y_pop = 1.0 + 2.0 * (pop_codes[:, 0] == 1) - 3.0 * (pop_codes[:, 0] == 2) + 0.5 * pop_codes[:, 1]
    pop = build_cell_table(Microdata(schema, pop_codes), role="population")
    take = rng.choice(5000, 300, replace=False)
    sample = Microdata(schema, pop_codes[take], y_pop[take])
    psi = rng.uniform(0.05, 0.5, 300)
    est = dr_mean(sample, psi, "a + b", pop)[0]
    assert est.estimate == pytest.approx(y_pop.mean(), abs=1e-10)


def test_fit_inclusion_model_on_stacked_samples(rng, schema2):
    s = random_microdata(schema2, 300, rng)
    r = random_microdata(schema2, 300, rng, outcome=False)
    fit = fit_inclusion_model(stack_samples(s, r), "a + b")
    assert fit.converged
    assert fit.cell_probability.shape == (schema2.n_cells,)
    assert np.all((fit.cell_probability > 0) & (fit.cell_probability < 1))
    np.testing.assert_array_equal(fit_inclusion_model(stack_samples(s, r)).cell_probability, fit.cell_probability)
    flat = fit_inclusion_model(stack_samples(s, r), "1").cell_probability
    np.testing.assert_allclose(flat, 300 / 600, rtol=1e-12)


# ---------------------------------------------------------------------------
# jackknife


def test_delete_one_jackknife_of_mean_is_classical_se(rng, schema2):
    data = random_microdata(schema2, 25, rng)
    jk = jackknife_se(lambda d: [d.outcome.mean()], data, n_groups=25)
    expected = data.outcome.std(ddof=1) / np.sqrt(25)
    assert jk.se[0] == pytest.approx(expected, rel=1e-12)
    assert not jk.failed


def test_jackknife_groups_are_seeded(rng, schema2):
    data = random_microdata(schema2, 60, rng)
    a = jackknife_se(lambda d: [np.median(d.outcome)], data, n_groups=10, rng_seed=3)
    b = jackknife_se(lambda d: [np.median(d.outcome)], data, n_groups=10, rng_seed=3)
    np.testing.assert_array_equal(a.replicates, b.replicates)


def test_jackknife_records_failed_replicates(schema2):
    data = Microdata(schema2, np.array([[0, 0]] * 10), np.arange(10.0))

    def est(d):
        if 0 not in d.outcome:
            raise DataError("boom")
        return [d.outcome.mean()]

    jk = jackknife_se(est, data, n_groups=10)
    assert len(jk.failed) == 1
