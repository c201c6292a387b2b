"""Effect estimators that return per-cell effect grids.

All estimators report ``observed - imputed counterfactual`` per cell. Treated
cells carry ``kind="treated"``; pre-treatment cells of eventually-treated
units carry ``kind="placebo-pre"`` and feed the negative event times of an
event study.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptySplitError, InestimableError, RankDeficiencyError
from .lowrank import MCFit, soft_impute
from .panel import Panel, TreatmentMask, build_mask, fit_fixed_effects, residualize

logger = logging.getLogger(__name__)

TREATED = "treated"
PLACEBO = "placebo-pre"
ESTIMATORS = ("full-mc", "cy", "combine-apply", "did", "twfe-pooled")
GRID_ESTIMATORS = ("full-mc", "cy", "combine-apply", "did")


@dataclass
class EffectGrid:
    """Sparse map from ``(unit row, period position)`` to an effect estimate.

    Period positions are 1-based. ``inestimable`` lists cells the estimator
    could not identify as ``(unit row, period, reason)``.
    """

    estimator_tag: str
    lambda_used: float | None
    unit_ids: tuple
    period_labels: np.ndarray
    adoption: np.ndarray
    estimates: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)
    inestimable: list = field(default_factory=list)
    fit: MCFit | None = field(default=None, repr=False)

    @classmethod
    def for_panel(cls, panel: Panel, tag: str, lam: float | None) -> "EffectGrid":
        return cls(
            estimator_tag=tag,
            lambda_used=lam,
            unit_ids=panel.unit_ids,
            period_labels=panel.period_labels,
            adoption=panel.adoption,
        )

    def add(self, i: int, t: int, value: float, kind: str) -> None:
        key = (int(i), int(t))
        self.estimates[key] = float(value)
        self.kinds[key] = kind

    def mark_inestimable(self, i: int, t: int, reason: str) -> None:
        self.inestimable.append((int(i), int(t), reason))

    def event_time(self, i: int, t: int) -> int:
        return int(t - self.adoption[i])

    def cells(self, kind: str | None = None) -> list:
        return sorted(c for c in self.estimates if kind is None or self.kinds[c] == kind)

    def __len__(self) -> int:
        return len(self.estimates)

    def check(self, mask: TreatmentMask) -> None:
        """Assert the cell-kind invariants against ``mask``."""
        for (i, t), kind in self.kinds.items():
            d = mask.treated[i, t - 1]
            if kind == TREATED and not d:
                raise AssertionError(f"treated estimate at untreated cell {(i, t)}")
            if kind == PLACEBO and (d or not np.isfinite(self.adoption[i])):
                raise AssertionError(f"placebo estimate at invalid cell {(i, t)}")

    def to_csv(self, dest) -> None:
        own = isinstance(dest, (str, os.PathLike))
        fh = open(dest, "w", newline="") if own else dest
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit", "period", "event_time", "cell_kind", "estimate", "estimator_tag"])
            for i, t in self.cells():
                w.writerow(
                    [
                        self.unit_ids[i],
                        int(self.period_labels[t - 1]),
                        self.event_time(i, t),
                        self.kinds[(i, t)],
                        f"{self.estimates[(i, t)]:.17g}",
                        self.estimator_tag,
                    ]
                )
        finally:
            if own:
                fh.close()


def _fill_for(panel: Panel) -> str:
    return "zero" if panel.residualized else "colmean"


# ---------------------------------------------------------------------------
# Full-matrix completion


def full_mc_estimate(
    panel: Panel,
    mask: TreatmentMask,
    lam: float,
    tol: float = 1e-7,
    max_iter: int = 2000,
) -> EffectGrid:
    """Complete the whole panel from its untreated cells and difference out.

    Treated cells give effect estimates; pre-treatment cells of
    eventually-treated units give in-sample placebo residuals.
    """
    if lam < 0:
        raise ConfigError("lambda must be nonnegative")
    grid = EffectGrid.for_panel(panel, "full-mc", lam)
    if not mask.treated.any():
        return grid
    fit = soft_impute(panel.outcomes, mask.untreated, lam, tol=tol, max_iter=max_iter, fill=_fill_for(panel))
    grid.fit = fit
    gap = panel.outcomes - fit.completed
    for i in np.flatnonzero(panel.eventually_treated):
        for j in range(panel.n_periods):
            grid.add(i, j + 1, gap[i, j], TREATED if mask.treated[i, j] else PLACEBO)
    return grid


# ---------------------------------------------------------------------------
# Split-apply-combine matrix completion


@dataclass(frozen=True)
class CYSplit:
    """Submatrix for one cohort and one or more focal periods.

    ``columns`` lists 1-based period positions: the cohort's pre-period
    ``1..g-1`` followed by the focal period(s). Missing cells are exactly
    ``treated_rows x focal_periods``.
    """

    cohort: int
    focal_periods: tuple
    treated_rows: tuple
    control_rows: tuple
    columns: tuple
    placebo: bool = False

    @property
    def focal_period(self) -> int:
        return self.focal_periods[0]

    @property
    def rows(self) -> tuple:
        return self.treated_rows + self.control_rows

    def observed(self) -> np.ndarray:
        obs = np.ones((len(self.rows), len(self.columns)), dtype=bool)
        focal_pos = [self.columns.index(t) for t in self.focal_periods]
        obs[np.ix_(range(len(self.treated_rows)), focal_pos)] = False
        return obs

    def submatrix(self, panel: Panel) -> np.ndarray:
        return panel.outcomes[np.ix_(self.rows, [c - 1 for c in self.columns])]


def _make_split(panel: Panel, g: int, focal: tuple, placebo: bool = False) -> CYSplit:
    G = panel.adoption
    treated = tuple(int(i) for i in np.flatnonzero(G == g))
    if placebo:
        # every focal column lies inside the cohort's own pre-period
        controls = tuple(int(i) for i in np.flatnonzero((G > g - 1) & (G != g)))
        columns = tuple(range(1, g))
        columns = tuple(c for c in columns if c not in focal) + tuple(focal)
    else:
        last = max(focal)
        controls = tuple(int(i) for i in np.flatnonzero(G > last))
        columns = tuple(range(1, g)) + tuple(focal)
    if not treated:
        raise EmptySplitError(f"no unit adopts at period position {g}")
    if not controls:
        raise EmptySplitError(f"no not-yet-treated control units for cohort {g} at focal {focal}")
    return CYSplit(
        cohort=int(g),
        focal_periods=tuple(int(t) for t in focal),
        treated_rows=treated,
        control_rows=controls,
        columns=columns,
        placebo=placebo,
    )


def cy_split(panel: Panel, mask: TreatmentMask, t0: int, g: int) -> CYSplit:
    """Cohort ``g`` against units not yet treated at ``t0``, on columns ``1..g-1, t0``."""
    if g > t0:
        raise ConfigError(f"cohort {g} is after focal period {t0}")
    if not 1 <= t0 <= panel.n_periods:
        raise ConfigError(f"focal period {t0} outside 1..{panel.n_periods}")
    return _make_split(panel, g, (t0,))


def _solve_split(panel: Panel, split: CYSplit, lam: float, combine: bool, tol: float, max_iter: int):
    """Return ``{(row, t): observed - imputed}`` for the split's missing cells."""
    Y = split.submatrix(panel)
    obs = split.observed()
    n_tr = len(split.treated_rows)
    focal_pos = [split.columns.index(t) for t in split.focal_periods]
    if combine:
        Y = np.vstack([Y[:n_tr].mean(axis=0, keepdims=True), Y[n_tr:]])
        obs = np.vstack([obs[:1], obs[n_tr:]])
    fit = soft_impute(Y, obs, lam, tol=tol, max_iter=max_iter, fill=_fill_for(panel))
    gap = Y - fit.completed
    out = {}
    for r, unit in enumerate(split.treated_rows):
        src = 0 if combine else r
        for c, t in zip(focal_pos, split.focal_periods):
            out[(unit, t)] = gap[src, c]
    return out


def _focal_chunks(g: int, T: int, group_size: int):
    ts = list(range(g, T + 1))
    return [tuple(ts[k : k + group_size]) for k in range(0, len(ts), group_size)]


def _split_estimate(
    panel: Panel,
    mask: TreatmentMask,
    lam: float,
    tag: str,
    combine: bool,
    group_size: int = 1,
    placebo: bool = True,
    tol: float = 1e-7,
    max_iter: int = 2000,
    n_jobs: int = 1,
) -> EffectGrid:
    if group_size < 1:
        raise ConfigError("group_size must be >= 1")
    if lam < 0:
        raise ConfigError("lambda must be nonnegative")
    grid = EffectGrid.for_panel(panel, tag, lam)
    G = panel.adoption
    cohorts = sorted(int(g) for g in np.unique(G[np.isfinite(G)]))

    jobs = []  # (key, kind, cells, split or reason)
    for g in cohorts:
        members = np.flatnonzero(G == g)
        for focal in _focal_chunks(g, panel.n_periods, group_size):
            cells = [(i, t) for i in members for t in focal]
            try:
                jobs.append(((g, focal, TREATED), cells, _make_split(panel, g, focal)))
            except EmptySplitError as e:
                # a batched chunk can lose its controls at its last period; retry one period at a time
                if len(focal) > 1:
                    for t in focal:
                        sub_cells = [(i, t) for i in members]
                        try:
                            jobs.append(((g, (t,), TREATED), sub_cells, _make_split(panel, g, (t,))))
                        except EmptySplitError as e1:
                            jobs.append(((g, (t,), TREATED), sub_cells, str(e1)))
                else:
                    jobs.append(((g, focal, TREATED), cells, str(e)))
        if placebo:
            for p in range(1, g):
                cells = [(i, p) for i in members]
                try:
                    jobs.append(((g, (p,), PLACEBO), cells, _make_split(panel, g, (p,), placebo=True)))
                except EmptySplitError as e:
                    jobs.append(((g, (p,), PLACEBO), cells, str(e)))

    def work(job):
        key, cells, split = job
        if isinstance(split, str):
            return key, cells, split
        try:
            return key, cells, _solve_split(panel, split, lam, combine, tol, max_iter)
        except RankDeficiencyError as e:
            return key, cells, f"rank-deficient split: {e}"

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            results = list(ex.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    for key, cells, res in sorted(results, key=lambda r: (r[0][0], r[0][2], r[0][1])):
        kind = key[2]
        if isinstance(res, str):
            for i, t in cells:
                grid.mark_inestimable(i, t, res)
            continue
        for (i, t), v in res.items():
            grid.add(i, t, v, kind)
    if grid.inestimable:
        n_tr = sum(1 for i, t, _ in grid.inestimable if mask.treated[i, t - 1])
        logger.info("%s: %d inestimable cell(s) (%d treated)", tag, len(grid.inestimable), n_tr)
    return grid


def cy_estimate(
    panel: Panel,
    mask: TreatmentMask,
    lam: float,
    group_size: int = 1,
    placebo: bool = True,
    tol: float = 1e-7,
    max_iter: int = 2000,
    n_jobs: int = 1,
) -> EffectGrid:
    """Split-apply-combine matrix completion, one solve per (cohort, focal period).

    With ``group_size > 1`` consecutive focal periods of a cohort share a
    solve; controls must then be untreated through the last focal period.
    Cells without not-yet-treated controls are recorded in
    ``grid.inestimable``.
    """
    return _split_estimate(panel, mask, lam, "cy", False, group_size, placebo, tol, max_iter, n_jobs)


def combine_apply_estimate(
    panel: Panel,
    mask: TreatmentMask,
    lam: float,
    t0: int,
    g: int,
    tol: float = 1e-7,
    max_iter: int = 2000,
) -> float:
    """Cohort ATT at ``t0`` from a single averaged treated row."""
    split = cy_split(panel, mask, t0, g)
    res = _solve_split(panel, split, lam, True, tol, max_iter)
    return float(np.mean(list(res.values())))


def combine_apply_grid(
    panel: Panel,
    mask: TreatmentMask,
    lam: float,
    placebo: bool = True,
    tol: float = 1e-7,
    max_iter: int = 2000,
    n_jobs: int = 1,
) -> EffectGrid:
    """Combine-apply estimates laid out per cell.

    Every member of a cohort receives the cohort-average effect, so unit
    averages of the grid are cohort-size weighted averages of cohort ATTs.
    """
    return _split_estimate(panel, mask, lam, "combine-apply", True, 1, placebo, tol, max_iter, n_jobs)


# ---------------------------------------------------------------------------
# Difference in differences


def did_estimate(panel: Panel, mask: TreatmentMask) -> EffectGrid:
    """Split-apply-combine DiD against not-yet-treated units.

    For a unit adopting at ``g`` and period ``t``, the baseline is ``g-1``.
    Post-treatment cells compare with units having ``G_j > t``; placebo
    cells (``t < g-1``) compare with units untreated through ``g-1`` outside
    the cohort.
    """
    grid = EffectGrid.for_panel(panel, "did", None)
    Y = panel.outcomes
    G = panel.adoption
    for g in sorted(int(v) for v in np.unique(G[np.isfinite(G)])):
        members = np.flatnonzero(G == g)
        if g < 2:
            for i in members:
                for t in range(1, panel.n_periods + 1):
                    grid.mark_inestimable(i, t, "no pre-treatment period")
            continue
        base = g - 2  # 0-based column of period g-1
        pre_controls = np.flatnonzero((G > g - 1) & (G != g))
        for t in range(1, panel.n_periods + 1):
            if t == g - 1:
                continue
            controls = np.flatnonzero(G > t) if t >= g else pre_controls
            kind = TREATED if t >= g else PLACEBO
            if controls.size == 0:
                for i in members:
                    grid.mark_inestimable(i, t, "no not-yet-treated comparison units")
                continue
            ctrl = np.mean(Y[controls, t - 1] - Y[controls, base])
            for i in members:
                grid.add(i, t, (Y[i, t - 1] - Y[i, base]) - ctrl, kind)
    return grid


def fit_twfe_pooled(panel: Panel, mask: TreatmentMask) -> float:
    """Pooled two-way fixed effects coefficient on the treatment indicator.

    Fitted on all cells by Frisch-Waugh-Lovell on the balanced panel. With
    heterogeneous effects this coefficient need not be a convex average of
    the cell-level effects; it is provided for contrast with the
    split-apply-combine estimators.
    """
    D = mask.treated.astype(float)
    if D.all() or not D.any():
        raise InestimableError("pooled TWFE needs both treated and untreated cells")

    def within(a):
        return a - a.mean(axis=1, keepdims=True) - a.mean(axis=0, keepdims=True) + a.mean()

    Dw = within(D)
    ss = float(np.sum(Dw * Dw))
    if ss < 1e-12 * D.size:
        raise InestimableError("treatment indicator is collinear with the fixed effects")
    return float(np.sum(Dw * within(panel.outcomes)) / ss)


# ---------------------------------------------------------------------------
# Estimator specification (used by bootstrap, diagnostics and the CLI)


@dataclass(frozen=True)
class EstimatorSpec:
    """Everything needed to rerun an estimator on a resampled or shifted panel.

    ``lam`` is fixed; it is never re-tuned inside :meth:`estimate`.
    """

    name: str
    lam: float | None = None
    residualize: bool = False
    group_size: int = 1
    tol: float = 1e-7
    max_iter: int = 2000
    n_jobs: int = 1

    def __post_init__(self):
        if self.name not in GRID_ESTIMATORS:
            raise ConfigError(f"estimator {self.name!r} does not produce an effect grid; use one of {GRID_ESTIMATORS}")
        if self.name != "did" and (self.lam is None or self.lam < 0):
            raise ConfigError(f"estimator {self.name!r} needs a nonnegative lambda")

    def prepare(self, panel: Panel) -> tuple[Panel, TreatmentMask]:
        mask = build_mask(panel)
        if self.residualize:
            panel = residualize(panel, fit_fixed_effects(panel, mask))
        return panel, mask

    def estimate(self, panel: Panel) -> EffectGrid:
        panel, mask = self.prepare(panel)
        if self.name == "full-mc":
            return full_mc_estimate(panel, mask, self.lam, self.tol, self.max_iter)
        if self.name == "cy":
            return cy_estimate(
                panel, mask, self.lam, self.group_size, tol=self.tol, max_iter=self.max_iter, n_jobs=self.n_jobs
            )
        if self.name == "combine-apply":
            return combine_apply_grid(panel, mask, self.lam, tol=self.tol, max_iter=self.max_iter, n_jobs=self.n_jobs)
        return did_estimate(panel, mask)
