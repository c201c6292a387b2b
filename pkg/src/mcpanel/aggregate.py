"""Calendar-time and event-time aggregation, and unit-resampling bootstrap CIs."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyAggregateError, McPanelError
from .estimators import PLACEBO, TREATED, EffectGrid, EstimatorSpec
from .panel import Panel

logger = logging.getLogger(__name__)


@dataclass
class EventTimeEntry:
    estimate: float
    n_units: int
    ci_low: float | None = None
    ci_high: float | None = None
    n_replicates: int | None = None


@dataclass
class EventStudy:
    entries: dict
    estimator_tag: str
    level: float | None = None
    warnings: list = field(default_factory=list)

    def ks(self) -> list:
        return sorted(self.entries)

    def estimates(self) -> np.ndarray:
        return np.array([self.entries[k].estimate for k in self.ks()])

    def to_csv(self, dest) -> None:
        own = isinstance(dest, (str, os.PathLike))
        fh = open(dest, "w", newline="") if own else dest

        def fmt(x):
            return "" if x is None else f"{x:.17g}"

        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "estimate", "n_units", "ci_low", "ci_high", "estimator_tag"])
            for k in self.ks():
                e = self.entries[k]
                w.writerow([k, fmt(e.estimate), e.n_units, fmt(e.ci_low), fmt(e.ci_high), self.estimator_tag])
        finally:
            if own:
                fh.close()


@dataclass
class CalendarATT:
    period: int
    estimate: float
    n_treated: int
    n_inestimable: int = 0
    ci_low: float | None = None
    ci_high: float | None = None


def aggregate_calendar(grid: EffectGrid, t0: int) -> CalendarATT:
    """Unweighted mean of the treated-cell estimates in period position ``t0``."""
    if not 1 <= t0 <= len(grid.period_labels):
        raise ConfigError(f"period position {t0} outside 1..{len(grid.period_labels)}")
    vals = [v for (i, t), v in grid.estimates.items() if t == t0 and grid.kinds[(i, t)] == TREATED]
    n_bad = sum(1 for i, t, _ in grid.inestimable if t == t0 and t >= grid.adoption[i])
    if not vals:
        raise EmptyAggregateError(f"no estimable treated cells at period position {t0}")
    return CalendarATT(period=t0, estimate=float(np.mean(vals)), n_treated=len(vals), n_inestimable=n_bad)


def aggregate_event(grid: EffectGrid, k_min: int, k_max: int) -> EventStudy:
    """Average effects over eventually-treated units at each event time.

    Event time ``k`` uses the treated cell ``G_i + k`` for ``k >= 0`` and the
    placebo cell for ``k < 0``. Event times without contributors are omitted.
    """
    if k_min > k_max:
        raise ConfigError("k_min must not exceed k_max")
    T = len(grid.period_labels)
    sums: dict = {}
    for (i, t), v in grid.estimates.items():
        g = grid.adoption[i]
        if not np.isfinite(g):
            continue
        k = int(t - g)
        if not k_min <= k <= k_max:
            continue
        want = TREATED if k >= 0 else PLACEBO
        if grid.kinds[(i, t)] != want or not 1 <= t <= T:
            continue
        sums.setdefault(k, []).append(v)
    entries = {k: EventTimeEntry(estimate=float(np.mean(v)), n_units=len(v)) for k, v in sorted(sums.items())}
    return EventStudy(entries=entries, estimator_tag=grid.estimator_tag)


def mean_post_effect(study: EventStudy, weighted: bool = False) -> float:
    """Average of the event-study estimates over ``k >= 0``.

    Event times get equal weight unless ``weighted``, which weights by the
    number of contributing units.
    """
    post = [(k, e) for k, e in study.entries.items() if k >= 0]
    if not post:
        raise EmptyAggregateError("event study has no post-treatment entries")
    est = np.array([e.estimate for _, e in post])
    if weighted:
        w = np.array([e.n_units for _, e in post], dtype=float)
        return float(np.sum(w * est) / w.sum())
    return float(est.mean())


def _resample(panel: Panel, rng: np.random.Generator) -> Panel:
    rows = rng.integers(0, panel.n_units, size=panel.n_units)
    rows.sort()
    ids = [f"{panel.unit_ids[r]}#{j}" for j, r in enumerate(rows)]
    return panel.take_units(rows, unit_ids=ids)


def bootstrap_ci(
    panel: Panel,
    spec: EstimatorSpec,
    B: int,
    level: float = 0.95,
    seed: int = 0,
    k_min: int = -20,
    k_max: int = 10,
    n_jobs: int = 1,
    point: EventStudy | None = None,
) -> EventStudy:
    """Percentile bootstrap intervals from resampling whole units.

    Each replicate draws ``N`` units with replacement (keeping each unit's
    full series and adoption time) and reruns ``spec`` with its penalty held
    fixed. Replicate ``b`` uses the generator seeded by ``(seed, b)``, so the
    output does not depend on execution order. An event time needs at least
    ``min(B, max(20, B / 10))`` valid replicates, otherwise its interval is
    suppressed and a warning recorded.
    """
    if B < 2:
        raise ConfigError("bootstrap needs B >= 2")
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    if point is None:
        point = aggregate_event(spec.estimate(panel), k_min, k_max)

    def replicate(b):
        rng = np.random.default_rng([seed, b])
        try:
            grid = spec.estimate(_resample(panel, rng))
        except McPanelError as e:
            return b, None, str(e)
        study = aggregate_event(grid, k_min, k_max)
        return b, {k: e.estimate for k, e in study.entries.items()}, None

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            reps = list(ex.map(replicate, range(B)))
    else:
        reps = [replicate(b) for b in range(B)]
    reps.sort(key=lambda r: r[0])

    failed = [(b, msg) for b, est, msg in reps if est is None]
    warnings = [f"replicate {b} failed: {msg}" for b, msg in failed]
    need = min(B, max(20, B / 10))
    q = ((1 - level) / 2, 1 - (1 - level) / 2)
    entries = {}
    for k, e in point.entries.items():
        draws = np.array([est[k] for _, est, _ in reps if est is not None and k in est])
        lo = hi = None
        if draws.size >= need:
            lo, hi = (float(x) for x in np.quantile(draws, q))
        else:
            warnings.append(f"k={k}: only {draws.size} valid replicates (< {need:g}); interval suppressed")
        entries[k] = EventTimeEntry(e.estimate, e.n_units, lo, hi, int(draws.size))
    for w in warnings:
        logger.warning(w)
    return EventStudy(entries=entries, estimator_tag=point.estimator_tag, level=level, warnings=warnings)
