import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcpanel.aggregate import (
    EventStudy,
    EventTimeEntry,
    aggregate_calendar,
    aggregate_event,
    bootstrap_ci,
    mean_post_effect,
)
from mcpanel.errors import ConfigError, EmptyAggregateError
from mcpanel.estimators import PLACEBO, TREATED, EffectGrid, EstimatorSpec
from mcpanel.panel import SimConfig, simulate_panel

from conftest import make_panel


def grid_from(adoption, values, T):
    """EffectGrid with ``values[(i, t)]``; kinds follow the adoption times."""
    g = EffectGrid("toy", None, tuple(f"u{i}" for i in range(len(adoption))), np.arange(1, T + 1),
                   np.array([np.inf if a is None else a for a in adoption], float))
    for (i, t), v in values.items():
        g.add(i, t, v, TREATED if t >= g.adoption[i] else PLACEBO)
    return g


def random_grid(rng, n=None, T=None, holes=0.0):
    n = n or int(rng.integers(2, 7))
    T = T or int(rng.integers(2, 9))
    adoption = [None if rng.random() < 0.3 else int(rng.integers(1, T + 1)) for _ in range(n)]
    vals = {}
    for i, a in enumerate(adoption):
        if a is None:
            continue
        for t in range(1, T + 1):
            if rng.random() >= holes:
                vals[(i, t)] = float(rng.normal())
    return grid_from(adoption, vals, T), adoption, vals, T


def test_calendar_examples():
    g = grid_from([2, None], {(0, 2): 7.0}, 3)
    a = aggregate_calendar(g, 2)
    assert (a.estimate, a.n_treated) == (7.0, 1)
    g = grid_from([2, 1], {(0, 2): 2.0, (1, 2): 4.0}, 2)
    a = aggregate_calendar(g, 2)
    assert (a.estimate, a.n_treated) == (3.0, 2)


def test_calendar_brute_force():
    rng = np.random.default_rng(0)
    g, adoption, vals, T = random_grid(rng, n=4, T=5)
    for t0 in range(1, T + 1):
        terms = [vals[(i, t0)] for i, a in enumerate(adoption) if a is not None and t0 >= a]
        if not terms:
            with pytest.raises(EmptyAggregateError):
                aggregate_calendar(g, t0)
            continue
        a = aggregate_calendar(g, t0)
        assert a.n_treated == len(terms)
        assert abs(a.estimate - sum(terms) / len(terms)) < 1e-12


def test_calendar_counts_inestimable():
    g = grid_from([1, 1], {(0, 1): 1.0}, 1)
    g.mark_inestimable(1, 1, "no controls")
    a = aggregate_calendar(g, 1)
    assert (a.n_treated, a.n_inestimable) == (1, 1)


def test_event_single_unit_is_its_path():
    vals = {(0, t): float(t * t) for t in range(1, 7)}
    g = grid_from([4, None], vals, 6)
    es = aggregate_event(g, -10, 10)
    assert {k: e.estimate for k, e in es.entries.items()} == {t - 4: float(t * t) for t in range(1, 7)}
    assert all(e.n_units == 1 for e in es.entries.values())


def test_event_two_cohorts_brute_force():
    rng = np.random.default_rng(1)
    adoption = [3, 3, 5, None]
    vals = {(i, t): float(rng.normal()) for i in range(3) for t in range(1, 7)}
    g = grid_from(adoption, vals, 6)
    es = aggregate_event(g, -4, 3)
    for k in range(-4, 4):
        terms = [vals[(i, a + k)] for i, a in enumerate(adoption) if a is not None and 1 <= a + k <= 6]
        if not terms:
            assert k not in es.entries
            continue
        assert es.entries[k].n_units == len(terms)
        assert abs(es.entries[k].estimate - np.mean(terms)) < 1e-12


def test_event_range_and_errors():
    g = grid_from([2], {(0, 1): 1.0, (0, 2): 2.0}, 2)
    assert list(aggregate_event(g, 0, 0).entries) == [0]
    with pytest.raises(ConfigError):
        aggregate_event(g, 1, 0)


def test_mean_post_effect_examples():
    es = EventStudy({k: EventTimeEntry(5.0, 3) for k in range(11)}, "t")
    assert mean_post_effect(es) == 5.0
    es = EventStudy({-1: EventTimeEntry(100.0, 1), 0: EventTimeEntry(2.0, 1), 1: EventTimeEntry(4.0, 3)}, "t")
    assert mean_post_effect(es) == 3.0
    assert mean_post_effect(es, weighted=True) == pytest.approx((2.0 + 12.0) / 4)
    with pytest.raises(EmptyAggregateError):
        mean_post_effect(EventStudy({-1: EventTimeEntry(1.0, 1)}, "t"))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_counting_identity(seed):
    g, adoption, vals, T = random_grid(np.random.default_rng(seed))
    cal = 0.0
    for t0 in range(1, T + 1):
        try:
            a = aggregate_calendar(g, t0)
        except EmptyAggregateError:
            continue
        cal += a.n_treated * a.estimate
    es = aggregate_event(g, -T, T)
    ev = sum(e.n_units * e.estimate for k, e in es.entries.items() if k >= 0)
    total = sum(v for c, v in g.estimates.items() if g.kinds[c] == TREATED)
    assert abs(cal - ev) < 1e-9
    assert abs(cal - total) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_single_cohort_event_equals_calendar(seed):
    rng = np.random.default_rng(seed)
    T, g0 = 7, int(rng.integers(1, 8))
    adoption = [g0, g0, g0, None]
    vals = {(i, t): float(rng.normal()) for i in range(3) for t in range(1, T + 1)}
    g = grid_from(adoption, vals, T)
    es = aggregate_event(g, -T, T)
    for k, e in es.entries.items():
        if k >= 0:
            assert e.estimate == aggregate_calendar(g, g0 + k).estimate


def test_event_study_csv():
    es = EventStudy({-1: EventTimeEntry(0.5, 2), 0: EventTimeEntry(1.0, 3, -0.25, 2.0)}, "cy")
    buf = io.StringIO()
    es.to_csv(buf)
    assert buf.getvalue().splitlines() == [
        "k,estimate,n_units,ci_low,ci_high,estimator_tag",
        "-1,0.5,2,,,cy",
        "0,1,3,-0.25,2,cy",
    ]


# ---------------------------------------------------------------------------
# Bootstrap


@pytest.fixture(scope="module")
def noisy_panel():
    p, _ = simulate_panel(SimConfig(n_units=24, n_periods=12, rank=1, factor_scale=0.0, fe_scale=1.0,
                                    noise_scale=1.0, effect=2.0, seed=12, earliest_adoption=5))
    return p


def test_bootstrap_deterministic(noisy_panel):
    spec = EstimatorSpec("did")
    a = bootstrap_ci(noisy_panel, spec, 30, seed=3, k_min=-3, k_max=3)
    b = bootstrap_ci(noisy_panel, spec, 30, seed=3, k_min=-3, k_max=3, n_jobs=4)
    ba, bb = io.StringIO(), io.StringIO()
    a.to_csv(ba)
    b.to_csv(bb)
    assert ba.getvalue() == bb.getvalue()
    c = bootstrap_ci(noisy_panel, spec, 30, seed=4, k_min=-3, k_max=3)
    assert any(a.entries[k].ci_low != c.entries[k].ci_low for k in a.entries)


def test_bootstrap_identical_units_zero_width():
    y = np.tile(np.linspace(0, 3, 6), (6, 1))
    p = make_panel(y, [4, 4, 4, None, None, None])
    spec = EstimatorSpec("did")
    es = bootstrap_ci(p, spec, 2, seed=0, k_min=-3, k_max=2)
    assert es.entries
    with_ci = [e for e in es.entries.values() if e.ci_low is not None]
    assert with_ci
    for e in with_ci:
        assert e.ci_low == e.ci_high == e.estimate == 0.0


def test_bootstrap_level_monotone(noisy_panel):
    spec = EstimatorSpec("did")
    narrow = bootstrap_ci(noisy_panel, spec, 60, level=0.8, seed=1, k_min=-2, k_max=2)
    wide = bootstrap_ci(noisy_panel, spec, 60, level=0.95, seed=1, k_min=-2, k_max=2)
    for k in narrow.entries:
        n, w = narrow.entries[k], wide.entries[k]
        assert w.ci_low <= n.ci_low <= n.ci_high <= w.ci_high


def test_bootstrap_suppresses_thin_event_times():
    rng = np.random.default_rng(2)
    # one early adopter appears in about 63% of resamples: ~16 of 25, below the 20 needed
    adoption = [2] + [6] * 5 + [None] * 14
    p = make_panel(rng.normal(size=(20, 8)), adoption)
    es = bootstrap_ci(p, EstimatorSpec("did"), 25, seed=0, k_min=-6, k_max=6)
    k_far = 5  # only the early adopter reaches k=5 (and 6)
    assert es.entries[k_far].ci_low is None
    assert es.entries[k_far].n_replicates < 20
    assert any(f"k={k_far}" in w for w in es.warnings)


def test_bootstrap_validation(noisy_panel):
    with pytest.raises(ConfigError):
        bootstrap_ci(noisy_panel, EstimatorSpec("did"), 1)
    with pytest.raises(ConfigError):
        bootstrap_ci(noisy_panel, EstimatorSpec("did"), 10, level=1.0)
