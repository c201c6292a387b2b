"""Credibility diagnostics: gap series, in-time placebos and pre-trend summaries."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .aggregate import EventStudy
from .errors import ConfigError, DataError, EmptyAggregateError
from .estimators import PLACEBO, TREATED, EffectGrid, EstimatorSpec
from .panel import Panel

OVERFIT_WARNING = (
    "near-zero placebo estimates from a matrix completion fit can reflect over-fitting "
    "rather than a valid model; compare against the in-time placebo"
)


def gap_series(grid: EffectGrid, unit: int) -> list[tuple[int, float]]:
    """Placebo and treated estimates of one unit ordered by event time."""
    g = grid.adoption[unit]
    if not np.isfinite(g):
        raise DataError(f"unit {grid.unit_ids[unit]} is never treated; it has no gap series")
    out = [
        (int(t - g), v)
        for (i, t), v in grid.estimates.items()
        if i == unit and grid.kinds[(i, t)] in (TREATED, PLACEBO)
    ]
    return sorted(out)


@dataclass
class PlaceboReport:
    """In-time placebo estimates for backdated adoption ``G - shift``.

    ``rows`` holds ``(unit row, k, estimate, true adoption position,
    placebo adoption position)`` with ``0 <= k < shift``; every scored cell
    precedes the unit's true adoption.
    """

    shift: int
    estimator_tag: str
    unit_ids: tuple
    period_labels: np.ndarray
    rows: list = field(default_factory=list)
    excluded: tuple = ()
    inestimable: int = 0
    warning: str = OVERFIT_WARNING

    def estimates(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows], dtype=float)

    @property
    def mean_abs(self) -> float:
        return float(np.mean(np.abs(self.estimates())))

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.estimates())))

    def per_k_means(self) -> dict:
        by_k: dict = {}
        for _, k, v, _, _ in self.rows:
            by_k.setdefault(k, []).append(v)
        return {k: float(np.mean(v)) for k, v in sorted(by_k.items())}

    def summary(self) -> dict:
        return {
            "shift": self.shift,
            "estimator": self.estimator_tag,
            "n_cells": len(self.rows),
            "mean_abs": self.mean_abs,
            "max_abs": self.max_abs,
            "per_k_mean": {str(k): v for k, v in self.per_k_means().items()},
            "excluded_units": list(self.excluded),
            "inestimable_cells": self.inestimable,
            "warning": self.warning,
        }

    def to_csv(self, dest) -> None:
        own = isinstance(dest, (str, os.PathLike))
        fh = open(dest, "w", newline="") if own else dest
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit", "k", "estimate", "true_adoption", "placebo_adoption"])
            for i, k, v, g, gp in self.rows:
                w.writerow(
                    [
                        self.unit_ids[i],
                        k,
                        f"{v:.17g}",
                        int(self.period_labels[g - 1]),
                        int(self.period_labels[gp - 1]),
                    ]
                )
        finally:
            if own:
                fh.close()


def in_time_placebo(panel: Panel, spec: EstimatorSpec, shift: int) -> PlaceboReport:
    """Backdate every adoption by ``shift`` periods and estimate the fake effects.

    Units whose placebo adoption would be at or before the first period are
    dropped and listed in ``excluded``. Only cells before each unit's true
    adoption are scored, so genuinely treated outcomes never enter the
    report; under the placebo mask they are also never used for fitting.
    """
    if shift < 1:
        raise ConfigError("placebo shift must be >= 1")
    G = panel.adoption
    shifted = np.where(np.isfinite(G), G - shift, G)
    drop = np.isfinite(G) & (shifted <= 1)
    keep = np.flatnonzero(~drop)
    if not np.isfinite(G[keep]).any():
        raise EmptyAggregateError(f"every treated unit has <= {shift} pre-periods; nothing to placebo-test")
    excluded = tuple(panel.unit_ids[i] for i in np.flatnonzero(drop))

    sub = panel.take_units(keep)
    placebo_panel = sub.replace(adoption=shifted[keep])
    grid = spec.estimate(placebo_panel)

    true_G = G[keep]
    rows = []
    for (i, t), v in sorted(grid.estimates.items()):
        if grid.kinds[(i, t)] != TREATED or t >= true_G[i]:
            continue
        rows.append((int(keep[i]), int(t - shifted[keep][i]), v, int(true_G[i]), int(shifted[keep][i])))
    n_bad = sum(1 for i, t, _ in grid.inestimable if shifted[keep][i] <= t < true_G[i])
    if not rows:
        raise EmptyAggregateError("in-time placebo produced no estimable cells")
    return PlaceboReport(
        shift=shift,
        estimator_tag=spec.name,
        unit_ids=panel.unit_ids,
        period_labels=panel.period_labels,
        rows=rows,
        excluded=excluded,
        inestimable=n_bad,
    )


def pretrend_summary(study: EventStudy) -> tuple[float, float]:
    """``(max |estimate|, mean |estimate|)`` over negative event times."""
    pre = np.array([e.estimate for k, e in study.entries.items() if k < 0])
    if pre.size == 0:
        raise EmptyAggregateError("event study has no pre-treatment entries")
    a = np.abs(pre)
    return float(a.max()), float(a.mean())
