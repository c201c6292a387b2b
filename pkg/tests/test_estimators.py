import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from mcpanel.errors import ConfigError, EmptySplitError, InestimableError
from mcpanel.estimators import (
    PLACEBO,
    TREATED,
    EstimatorSpec,
    combine_apply_estimate,
    combine_apply_grid,
    cy_estimate,
    cy_split,
    did_estimate,
    fit_twfe_pooled,
    full_mc_estimate,
)
from mcpanel.lowrank import soft_impute
from mcpanel.panel import SimConfig, build_mask, simulate_panel

from conftest import make_panel, rms

LAM = 2e-3
SOLVER = dict(tol=1e-9, max_iter=20000)


def treated_values(grid):
    return np.array([v for c, v in grid.estimates.items() if grid.kinds[c] == TREATED])


# ---------------------------------------------------------------------------
# CY splits


def test_cy_split_examples(toy4):
    m = build_mask(toy4)
    s = cy_split(toy4, m, 3, 3)
    assert (s.treated_rows, s.control_rows, s.columns) == ((0,), (1, 2, 3), (1, 2, 3))
    s = cy_split(toy4, m, 4, 3)
    assert (s.treated_rows, s.control_rows, s.columns) == ((0,), (2, 3), (1, 2, 4))
    s = cy_split(toy4, m, 5, 4)
    assert (s.treated_rows, s.control_rows, s.columns) == ((1,), (2, 3), (1, 2, 3, 5))


def test_cy_split_errors(toy4):
    m = build_mask(toy4)
    with pytest.raises(EmptySplitError):
        cy_split(toy4, m, 3, 2)
    with pytest.raises(ConfigError):
        cy_split(toy4, m, 3, 4)
    p = make_panel(np.zeros((2, 4)), [2, 3])
    with pytest.raises(EmptySplitError):
        cy_split(p, build_mask(p), 3, 2)


def test_cy_split_block_missingness(toy4):
    m = build_mask(toy4)
    for t0, g in [(3, 3), (4, 3), (5, 3), (4, 4), (5, 4)]:
        s = cy_split(toy4, m, t0, g)
        obs = s.observed()
        assert not obs[: len(s.treated_rows), -1].any()
        assert obs[: len(s.treated_rows), :-1].all() and obs[len(s.treated_rows) :].all()
        cols = [c - 1 for c in s.columns]
        d = m.treated[np.ix_(s.rows, cols)]
        assert np.array_equal(d, ~obs)


# ---------------------------------------------------------------------------
# Simulation oracles


def test_full_mc_zero_effect(lowrank_sim):
    p, tau = lowrank_sim
    g = full_mc_estimate(p, build_mask(p), LAM, **SOLVER)
    assert np.max(np.abs(treated_values(g))) < 1e-3 * rms(p.outcomes)
    g.check(build_mask(p))


def test_full_mc_constant_effect():
    p, tau = simulate_panel(SimConfig(n_units=24, n_periods=20, rank=2, seed=1, treated_fraction=0.25,
                                      earliest_adoption=14, effect=5.0))
    g = full_mc_estimate(p, build_mask(p), LAM, **SOLVER)
    assert_allclose(treated_values(g), 5.0, atol=1e-2)


def test_full_mc_no_treated_units():
    p = make_panel(np.random.default_rng(0).normal(size=(3, 4)), [None] * 3)
    g = full_mc_estimate(p, build_mask(p), 0.1)
    assert len(g) == 0 and g.estimator_tag == "full-mc" and g.lambda_used == 0.1


def test_cy_zero_effect(lowrank_sim):
    p, _ = lowrank_sim
    m = build_mask(p)
    g = cy_estimate(p, m, LAM, **SOLVER)
    assert not g.inestimable
    assert np.max(np.abs(list(g.estimates.values()))) < 1e-3 * rms(p.outcomes)
    g.check(m)


def test_combine_apply_zero_effect(lowrank_sim):
    p, _ = lowrank_sim
    m = build_mask(p)
    g = combine_apply_grid(p, m, LAM, **SOLVER)
    assert np.max(np.abs(list(g.estimates.values()))) < 1e-3 * rms(p.outcomes)
    G = p.adoption
    cohort = int(np.nanmin(np.where(np.isfinite(G), G, np.nan)))
    att = combine_apply_estimate(p, m, LAM, cohort, cohort, **SOLVER)
    assert abs(att) < 1e-3 * rms(p.outcomes)


def test_cy_single_treated_cell_equals_full_mc():
    p, _ = simulate_panel(SimConfig(n_units=12, n_periods=8, rank=2, noise_scale=0.3, treated_fraction=0.0, seed=2))
    adoption = p.adoption.copy()
    adoption[4] = 8
    p = p.replace(adoption=adoption)
    m = build_mask(p)
    cy = cy_estimate(p, m, 0.5, placebo=False)
    full = full_mc_estimate(p, m, 0.5)
    assert cy.cells(TREATED) == [(4, 8)] == full.cells(TREATED)
    # same matrix up to a row permutation
    assert cy.estimates[(4, 8)] == pytest.approx(full.estimates[(4, 8)], abs=1e-10)


def test_combine_apply_single_unit_cohort_equals_cy(toy4):
    m = build_mask(toy4)
    cy = cy_estimate(toy4, m, 0.05, placebo=False)
    for t0 in (3, 4, 5):
        assert combine_apply_estimate(toy4, m, 0.05, t0, 3) == pytest.approx(cy.estimates[(0, t0)], abs=1e-12)


def test_combine_apply_identical_rows_matches_cy_average():
    p, _ = simulate_panel(SimConfig(n_units=16, n_periods=14, rank=1, treated_fraction=0.0, seed=6))
    y = p.outcomes.copy()
    y[1] = y[0]
    adoption = p.adoption.copy()
    adoption[[0, 1]] = 12
    p = p.replace(outcomes=y, adoption=adoption)
    m = build_mask(p)
    cy = cy_estimate(p, m, 1e-4, placebo=False, **SOLVER)
    assert cy.estimates[(0, 12)] == pytest.approx(cy.estimates[(1, 12)], abs=1e-12)
    ca = combine_apply_estimate(p, m, 1e-4, 12, 12, **SOLVER)
    assert ca == pytest.approx(np.mean([cy.estimates[(0, 12)], cy.estimates[(1, 12)]]), abs=1e-3 * rms(y))


def test_cy_inestimable_cells_are_reported():
    # the last cohort has no not-yet-treated unit at its own adoption period
    rng = np.random.default_rng(3)
    p = make_panel(rng.normal(size=(3, 6)), [4, 5, 6])
    m = build_mask(p)
    g = cy_estimate(p, m, 0.1)
    bad = {(i, t) for i, t, _ in g.inestimable}
    assert (2, 6) in bad and (0, 6) in bad
    assert (0, 4) in g.estimates


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3))
def test_cy_partition_of_treated_cells(seed, group_size):
    rng = np.random.default_rng(seed)
    n, T = int(rng.integers(3, 8)), int(rng.integers(3, 8))
    adoption = [None if rng.random() < 0.3 else int(rng.integers(1, T + 1)) for _ in range(n)]
    p = make_panel(rng.normal(size=(n, T)), adoption)
    m = build_mask(p)
    g = cy_estimate(p, m, 100.0, group_size=group_size, placebo=False)
    est = set(g.cells(TREATED))
    bad = [(i, t) for i, t, _ in g.inestimable]
    assert len(bad) == len(set(bad))
    assert est.isdisjoint(bad)
    treated = {(int(i), int(j) + 1) for i, j in zip(*np.nonzero(m.treated))}
    assert est | set(bad) == treated


def test_cy_group_size_batches_focal_periods(lowrank_sim):
    p, _ = lowrank_sim
    m = build_mask(p)
    g1 = cy_estimate(p, m, LAM, placebo=False, **SOLVER)
    g3 = cy_estimate(p, m, LAM, group_size=3, placebo=False, **SOLVER)
    assert set(g1.cells()) == set(g3.cells())
    assert np.max(np.abs(treated_values(g3))) < 1e-2 * rms(p.outcomes)


def test_cy_parallel_matches_serial(toy4):
    m = build_mask(toy4)
    a = cy_estimate(toy4, m, 0.1)
    b = cy_estimate(toy4, m, 0.1, n_jobs=4)
    assert a.estimates == b.estimates and a.inestimable == b.inestimable


# ---------------------------------------------------------------------------
# DiD and pooled TWFE


def test_did_2x2():
    p = make_panel([[1.0, 2.0], [3.0, 5.0]], [None, 2])
    g = did_estimate(p, build_mask(p))
    assert g.estimates == {(1, 2): 1.0}


def test_did_additive_zero(additive_sim):
    p, _ = additive_sim
    g = did_estimate(p, build_mask(p))
    assert len(g) > 0
    assert np.max(np.abs(list(g.estimates.values()))) < 1e-9


def test_did_hand_formula(toy4):
    y = toy4.outcomes
    g = did_estimate(toy4, build_mask(toy4))
    # unit 0 (G=3), t=4: controls G>4 are units 2, 3; baseline period 2
    want = (y[0, 3] - y[0, 1]) - np.mean(y[[2, 3], 3] - y[[2, 3], 1])
    assert g.estimates[(0, 4)] == pytest.approx(want, abs=1e-12)
    # unit 1 (G=4) placebo at t=1, baseline period 3, controls untreated through 3 outside the cohort
    want = (y[1, 0] - y[1, 2]) - np.mean(y[[2, 3], 0] - y[[2, 3], 2])
    assert g.estimates[(1, 1)] == pytest.approx(want, abs=1e-12)
    assert g.kinds[(1, 1)] == PLACEBO
    assert (1, 3) not in g.estimates  # the baseline period itself


def test_did_placebo_detects_factor_confounding():
    cfg = SimConfig(n_units=40, n_periods=30, rank=2, seed=5, treated_fraction=0.3, earliest_adoption=20,
                    adoption_mechanism="factor-selected", selection_strength=3.0)
    p, _ = simulate_panel(cfg)
    m = build_mask(p)
    did = did_estimate(p, m)
    mc = full_mc_estimate(p, m, 1e-2)
    scale = rms(p.outcomes)
    did_pl = np.array([v for c, v in did.estimates.items() if did.kinds[c] == PLACEBO])
    mc_pl = np.array([v for c, v in mc.estimates.items() if mc.kinds[c] == PLACEBO])
    assert np.mean(np.abs(did_pl)) > 0.1 * scale
    assert np.max(np.abs(mc_pl)) < 1e-2 * scale


def test_did_invariant_to_fixed_effect_removal():
    p, _ = simulate_panel(SimConfig(n_units=20, n_periods=15, noise_scale=1.0, fe_scale=5.0, seed=7,
                                    earliest_adoption=4))
    lev = EstimatorSpec("did").estimate(p)
    res = EstimatorSpec("did", residualize=True).estimate(p)
    assert lev.cells() == res.cells()
    for c in lev.cells():
        assert lev.estimates[c] == pytest.approx(res.estimates[c], abs=1e-9)


@pytest.mark.parametrize("name", ["full-mc", "cy", "combine-apply", "did"])
def test_translation_equivariance_with_residualizing(name):
    p, _ = simulate_panel(SimConfig(n_units=14, n_periods=10, noise_scale=0.5, seed=8, earliest_adoption=6,
                                    treated_fraction=0.3))
    spec = EstimatorSpec(name, lam=None if name == "did" else 0.3, residualize=True)
    a = spec.estimate(p)
    b = spec.estimate(p.replace(outcomes=p.outcomes + 123.0))
    assert a.cells() == b.cells()
    for c in a.cells():
        assert a.estimates[c] == pytest.approx(b.estimates[c], abs=1e-9)


def twfe_oracle(y, d):
    n, T = y.shape
    rows, cols = np.indices((n, T))
    X = np.zeros((n * T, 1 + (n - 1) + (T - 1) + 1))
    X[:, 0] = 1
    for i in range(1, n):
        X[:, i] = (rows.ravel() == i)
    for t in range(1, T):
        X[:, n - 1 + t] = (cols.ravel() == t)
    X[:, -1] = d.ravel()
    return np.linalg.lstsq(X, y.ravel(), rcond=None)[0][-1]


def test_twfe_2x2_and_additive(additive_sim):
    p = make_panel([[1.0, 2.0], [3.0, 5.0]], [None, 2])
    assert fit_twfe_pooled(p, build_mask(p)) == pytest.approx(1.0, abs=1e-12)
    q, _ = additive_sim
    assert fit_twfe_pooled(q, build_mask(q)) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_twfe_matches_least_squares(seed):
    rng = np.random.default_rng(seed)
    adoption = [None, 2, 3, 5, None]
    p = make_panel(rng.normal(size=(5, 5)), adoption)
    m = build_mask(p)
    assert fit_twfe_pooled(p, m) == pytest.approx(twfe_oracle(p.outcomes, m.treated.astype(float)), abs=1e-8)


def test_twfe_collinear():
    p = make_panel(np.zeros((2, 3)), [1, 1])
    with pytest.raises(InestimableError):
        fit_twfe_pooled(p, build_mask(p))


def test_estimator_spec_validation():
    with pytest.raises(ConfigError):
        EstimatorSpec("full-mc")
    with pytest.raises(ConfigError):
        EstimatorSpec("twfe-pooled")
    with pytest.raises(ConfigError):
        EstimatorSpec("magic", lam=1.0)


def test_effect_grid_csv(toy4):
    g = did_estimate(toy4, build_mask(toy4))
    buf = io.StringIO()
    g.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "unit,period,event_time,cell_kind,estimate,estimator_tag"
    assert len(lines) == 1 + len(g)
    first = lines[1].split(",")
    assert first[0] == "s0" and first[5] == "did"
    assert float(first[4]) == g.estimates[g.cells()[0]]


def test_soft_impute_fill_follows_residualized_flag():
    p, _ = simulate_panel(SimConfig(n_units=10, n_periods=8, noise_scale=0.2, seed=9, earliest_adoption=5))
    m = build_mask(p)
    spec = EstimatorSpec("full-mc", lam=0.2, residualize=True)
    work, _ = spec.prepare(p)
    direct = soft_impute(work.outcomes, m.untreated, 0.2, fill="zero").completed
    g = spec.estimate(p)
    i, t = g.cells(TREATED)[0]
    assert g.estimates[(i, t)] == pytest.approx(work.outcomes[i, t - 1] - direct[i, t - 1], abs=1e-12)
