import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrpkit.cells import CellTable, CovariateSchema, Microdata, build_cell_table
from mrpkit.design import fit_inclusion_model, poststratified_mean
from mrpkit.errors import DataError
from mrpkit.hb import McmcConfig, OutcomeModelSpec, PosteriorDraws, PriorSpec, cell_means, mcse, sample_posterior_linear
from mrpkit.mrp import (
    VARIANTS,
    MrpVariant,
    _convergence_flag,
    build_psi_predictors,
    mrp_fit,
    poststratify_draws,
    shrinkage_estimate,
    shrinkage_factors,
)

from conftest import random_microdata
import oracles

SCHEMA = CovariateSchema([("a", ["0", "1", "2"]), ("b", ["x", "y"])])
DIFFUSE = PriorSpec(intercept_scale=1e3, coef_scale=1e3, sigma_rate=1e-3)


def test_variant_table():
    rows = {v.tag: (v.cell_source, v.count_source, v.psi_predictors) for v in VARIANTS}
    assert rows == {
        "S": ("sample", "known", False),
        "P": ("population", "known", False),
        "R": ("reference", "estimated", False),
        "INT": ("population", "known", True),
    }
    assert MrpVariant.from_tag("MRP-INT").method == "MRP-INT"
    with pytest.raises(ValueError):
        MrpVariant.from_tag("Q")


def _one_var_tables(n, ybar, s2, N):
    schema = CovariateSchema([("c", [str(j) for j in range(len(n))])])
    cells = np.arange(len(n))
    return (
        schema,
        CellTable(schema, cells, n, ybar, s2),
        CellTable(schema, cells, N, role="population"),
    )


def test_shrinkage_arithmetic_example():
    schema, sample, pop = _one_var_tables([4, 4], [2.0, -2.0], [1.0, 1.0], [10, 10])
    assert shrinkage_factors(sample, 0.5).tolist() == [1.0, 1.0]
    est = shrinkage_estimate(sample, 0.5, pop, groups="c")
    assert est[1].estimate == pytest.approx(1.0) and est[2].estimate == pytest.approx(-1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_shrinkage_matches_oracle(seed, exact):
    rng = np.random.default_rng(seed)
    J = int(rng.integers(1, 13))
    n = rng.integers(2, 30, J).astype(float)
    ybar = rng.normal(size=J) * 3
    s2 = rng.uniform(0.1, 4.0, J)
    N = rng.integers(50, 500, J).astype(float)
    sig = float(rng.uniform(0.05, 3))
    _, sample, pop = _one_var_tables(n, ybar, s2, N)
    _, est, se = oracles.shrinkage(n.tolist(), ybar.tolist(), s2.tolist(), sig, N.tolist(), exact)
    got = shrinkage_estimate(sample, sig, pop, exact=exact)[0]
    assert abs(got.estimate - est) < 1e-12
    assert abs(got.se - se) < 1e-12


def test_shrinkage_limits_and_monotonicity():
    rng = np.random.default_rng(1)
    n = rng.integers(2, 20, 6).astype(float)
    ybar = rng.normal(size=6)
    s2 = rng.uniform(0.5, 2, 6)
    N = rng.integers(100, 1000, 6).astype(float)
    _, sample, pop = _one_var_tables(n, ybar, s2, N)
    ps = float(N @ ybar / N.sum())
    assert shrinkage_estimate(sample, 1e8, pop)[0].estimate == pytest.approx(ps, abs=1e-12)
    ys = float(n @ ybar / n.sum())
    prev = None
    for sig in [0.01, 0.1, 0.3, 1, 3, 10]:
        theta = [shrinkage_estimate(sample, sig, pop, groups="c")[j + 1].estimate for j in range(6)]
        dist = np.abs(np.array(theta) - ybar)
        if prev is not None:
            assert np.all(dist <= prev + 1e-15)
            assert np.all(np.sign(np.array(theta) - ybar) * np.sign(ys - ybar) >= 0)
        prev = dist


def test_shrinkage_design_consistency_large_n():
    rng = np.random.default_rng(2)
    J = 8
    n = np.full(J, 1e6)
    ybar = rng.normal(size=J) * 5
    s2 = rng.uniform(0.5, 4, J)
    N = rng.integers(1000, 100000, J).astype(float)
    _, sample, pop = _one_var_tables(n, ybar, s2, N)
    ps = poststratified_mean(sample, pop)[0].estimate
    assert abs(shrinkage_estimate(sample, 0.5, pop)[0].estimate - ps) < 1e-3


def test_shrinkage_scale_invariant_in_population_counts():
    _, sample, pop = _one_var_tables([3, 5, 9], [1.0, 2.0, -1.0], [1.0, 2.0, 0.5], [10, 20, 70])
    _, _, pop2 = _one_var_tables([3, 5, 9], [1.0, 2.0, -1.0], [1.0, 2.0, 0.5], [1000, 2000, 7000])
    a = shrinkage_estimate(sample, 0.7, pop)[0]
    b = shrinkage_estimate(sample, 0.7, pop2)[0]
    assert abs(a.estimate - b.estimate) < 1e-12 and abs(a.se - b.se) < 1e-12


def test_shrinkage_rejects_empty_cell():
    _, sample, pop = _one_var_tables([3, 0], [1.0, np.nan], [1.0, np.nan], [10, 10])
    with pytest.raises(DataError):
        shrinkage_estimate(sample, 1.0, pop)


# ---------------------------------------------------------------------------
# psi predictors


def test_psi_grouping_examples():
    p = build_psi_predictors(np.array([0.12, 0.14, 0.31]))
    assert p.members() == {0.1: [0, 1], 0.3: [2]}
    assert len(build_psi_predictors(np.full(5, 0.42)).group_values) == 1
    with pytest.raises(DataError):
        build_psi_predictors(np.array([0.1, np.nan]), cells=[1])


def test_psi_grouping_matches_string_rounding_oracle():
    rng = np.random.default_rng(3)
    v = rng.uniform(0.001, 0.999, 200)
    p = build_psi_predictors(v)
    oracle = {}
    for j, x in enumerate(v):
        oracle.setdefault(f"{x:.1f}", set()).add(j)
    got = {f"{k:.1f}": set(m) for k, m in p.members().items()}
    assert got == oracle
    assert len(p.group_values) <= len(v)


def test_psi_from_point_fit():
    rng = np.random.default_rng(4)
    s = random_microdata(SCHEMA, 300, rng, outcome=False)
    data = s.with_(included=(rng.random(300) < 0.3).astype(int))
    fit = fit_inclusion_model(data, "a + b")
    p = build_psi_predictors(fit)
    np.testing.assert_array_equal(p.values, fit.cell_probability)


# ---------------------------------------------------------------------------
# poststratification of draws


def test_poststratify_draws_cases():
    rng = np.random.default_rng(5)
    theta = rng.normal(size=(40, 6))
    masks = [np.ones(6, bool), np.array([1, 1, 0, 0, 0, 0], bool)]
    eq = poststratify_draws(theta, np.ones(6), masks)
    np.testing.assert_allclose(eq[:, 0], theta.mean(axis=1), atol=1e-14)
    single = poststratify_draws(theta, rng.uniform(1, 5, 6), [np.eye(6, dtype=bool)[2]])
    np.testing.assert_allclose(single[:, 0], theta[:, 2], rtol=1e-15, atol=0)
    W = rng.uniform(0, 5, (40, 6))
    got = poststratify_draws(theta, W, masks)
    for g, m in enumerate(masks):
        oracle = np.einsum("dj,dj->d", W * m, theta) / (W @ m)
        np.testing.assert_allclose(got[:, g], oracle, atol=1e-12, rtol=0)
    with pytest.raises(DataError):
        poststratify_draws(theta, np.r_[0, 0, 1, 1, 1, 1.0], [masks[1]])
    with pytest.raises(DataError):
        poststratify_draws(theta, -np.ones(6), masks)


# ---------------------------------------------------------------------------
# full MRP


def _big_sample(per_cell, rng):
    codes = np.repeat(SCHEMA.all_keys(), per_cell, axis=0)
    y = 1.0 + codes[:, 0] * 0.8 - codes[:, 1] * 0.5 + 0.3 * codes[:, 0] * codes[:, 1] + rng.normal(size=len(codes))
    return Microdata(SCHEMA, codes, y)


def test_mrp_p_design_consistent_with_ps():
    rng = np.random.default_rng(6)
    sample = _big_sample(20000, rng)
    pop = CellTable(SCHEMA, np.arange(6), [500, 1500, 800, 2000, 700, 4500], role="population")
    res = mrp_fit("P", sample, pop, spec=OutcomeModelSpec("a*b", DIFFUSE), cfg=McmcConfig(iterations=600, warmup=200, seed=1))
    ps = poststratified_mean(build_cell_table(sample), pop)[0].estimate
    assert abs(res.summaries[0].estimate - ps) < 1e-2
    assert not res.flagged and res.max_rhat < 1.05


def test_mrp_s_equals_p_when_sample_covers_population():
    rng = np.random.default_rng(7)
    sample = random_microdata(SCHEMA, 400, rng)
    pop = CellTable(SCHEMA, np.arange(6), [100, 200, 300, 400, 500, 600], role="population")
    cfg = McmcConfig(iterations=800, warmup=300, seed=2)
    p = mrp_fit("P", sample, pop, spec="a + b", cfg=cfg, groups="a")
    s = mrp_fit("S", sample, pop, spec="a + b", cfg=cfg, groups="a")
    for x, y in zip(p.summaries, s.summaries):
        assert x.group == y.group
        assert x.estimate == pytest.approx(y.estimate, abs=1e-12)
    assert [x.group for x in p.summaries] == ["overall", "a:0", "a:1", "a:2"]


def test_mrp_s_drops_unsampled_cells():
    rng = np.random.default_rng(8)
    sample = random_microdata(SCHEMA, 200, rng)
    sample = sample.subset(np.flatnonzero(sample.codes[:, 0] < 2))
    pop = CellTable(SCHEMA, np.arange(6), np.full(6, 100.0), role="population")
    res = mrp_fit("S", sample, pop, spec="a + b", cfg=McmcConfig(iterations=400, warmup=200), groups="a")
    assert set(res.cells.tolist()) == {0, 1, 2, 3}
    assert np.isnan(res.summaries[-1].estimate)


def test_mrp_r_uses_estimated_counts():
    rng = np.random.default_rng(9)
    sample = random_microdata(SCHEMA, 300, rng)
    reference = random_microdata(SCHEMA, 400, rng, outcome=False)
    cfg = McmcConfig(iterations=600, warmup=200, seed=3)
    r = mrp_fit("R", sample, None, reference=reference, spec="a + b", cfg=cfg, L=20, N=4000)
    pop = build_cell_table(reference.with_(weight=np.full(400, 10.0)), role="population")
    pop = CellTable(SCHEMA, pop.cells, np.bincount(reference.cells, minlength=6)[pop.cells] * 10.0, role="population")
    p = mrp_fit("P", sample, pop, spec="a + b", cfg=cfg, draws=r.draws)
    assert abs(r.summaries[0].estimate - p.summaries[0].estimate) < 3 * r.summaries[0].se
    assert r.summaries[0].se >= p.summaries[0].se


def test_mrp_int_runs_and_records_psi():
    rng = np.random.default_rng(10)
    sample = random_microdata(SCHEMA, 300, rng)
    reference = random_microdata(SCHEMA, 300, rng, outcome=False)
    pop = CellTable(SCHEMA, np.arange(6), np.full(6, 1000.0), role="population")
    res = mrp_fit("INT", sample, pop, reference=reference, spec="a + b", cfg=McmcConfig(iterations=600, warmup=200))
    assert res.psi is not None and res.psi.values.shape == (6,)
    assert "psi" in res.draws.names and any(n.startswith("u[psi]") for n in res.draws.names)


def test_int_model_with_psi_terms_switched_off_reproduces_p_model():
    rng = np.random.default_rng(11)
    sample = random_microdata(SCHEMA, 400, rng)
    psi = np.array([0.1, 0.15, 0.3, 0.32, 0.5, 0.8])
    groups = build_psi_predictors(psi)
    cfg = McmcConfig(iterations=3000, warmup=500, seed=4)
    p_spec = OutcomeModelSpec("a + b", PriorSpec(0.0, 10.0, 2.5, 1.0, 1.0))
    int_spec = OutcomeModelSpec(
        "a + b + psi + (1|psi)", PriorSpec(0.0, 10.0, (2.5, 2.5, 2.5, 1e-9), 1.0, 1.0),
        psi_values=groups.values, psi_groups=groups.groups, tau_fixed=1e-9,
    )
    dp = sample_posterior_linear(p_spec, sample, cfg)
    di = sample_posterior_linear(int_spec, sample, cfg)
    mp = cell_means(dp, p_spec, SCHEMA)
    mi = cell_means(di, int_spec, SCHEMA)
    for j in range(6):
        err = np.hypot(mcse(mp[:, j].reshape(2, -1)), mcse(mi[:, j].reshape(2, -1)))
        assert abs(mp[:, j].mean() - mi[:, j].mean()) < 4 * err


def test_mrp_input_errors():
    rng = np.random.default_rng(12)
    sample = random_microdata(SCHEMA, 50, rng)
    with pytest.raises(DataError):
        mrp_fit("P", sample, None, spec="a")
    with pytest.raises(DataError):
        mrp_fit("R", sample, None, spec="a")
    with pytest.raises(DataError):
        mrp_fit("P", sample.with_(outcome=None), CellTable(SCHEMA, [0], [1.0], role="population"), spec="a")


def test_convergence_flag_rules():
    chain = np.repeat([0, 1], 100)
    ok = PosteriorDraws(["b"], np.random.default_rng(0).normal(size=(200, 1)), chain, 0,
                        {"fixed_names": ["b"], "coef_scale": np.array([1.0])})
    assert _convergence_flag(ok, {"b": 1.01}) == ""
    assert "rhat" in _convergence_flag(ok, {"b": 1.3})
    big = PosteriorDraws(["b"], np.full((200, 1), 50.0), chain, 0, {"fixed_names": ["b"], "coef_scale": np.array([1.0])})
    assert "coefficient" in _convergence_flag(big, {"b": 1.0})
