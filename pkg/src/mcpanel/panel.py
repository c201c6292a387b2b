"""Panel data model, CSV ingestion, treatment masks and fixed-effect residualization.

Period positions are 1-based throughout the public API (``t = 1, ..., T``);
unit positions are 0-based row indices. Adoption times are stored as floats
so that never-treated units carry ``np.inf`` and comparisons such as
``t >= adoption`` work without special-casing.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptyPanelError,
    InestimableError,
    InvalidAdoptionError,
    PanelParseError,
    UnbalancedPanelError,
)

logger = logging.getLogger(__name__)

NEVER = np.inf
NEVER_MARKERS = frozenset({"", "inf", "+inf", "infinity"})

DEFAULT_SCHEMA = {"unit": "unit", "period": "period", "outcome": "outcome", "adoption": "adoption"}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Panel:
    """Balanced N x T outcome table with per-unit adoption times.

    Attributes
    ----------
    unit_ids : tuple of str
    period_labels : ndarray of int, shape (T,)
        Strictly increasing calendar labels (e.g. years).
    outcomes : ndarray, shape (N, T)
    adoption : ndarray of float, shape (N,)
        1-based adoption position, or ``inf`` for never-treated units.
    residualized : bool
        Set when fixed effects have been subtracted; controls the default
        soft-impute initialisation.
    """

    unit_ids: tuple
    period_labels: np.ndarray
    outcomes: np.ndarray
    adoption: np.ndarray
    residualized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "unit_ids", tuple(str(u) for u in self.unit_ids))
        labels = _frozen(np.asarray(self.period_labels, dtype=np.int64))
        y = _frozen(np.asarray(self.outcomes, dtype=float))
        g = _frozen(np.asarray(self.adoption, dtype=float))
        object.__setattr__(self, "period_labels", labels)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "adoption", g)

        if y.ndim != 2 or y.shape != (len(self.unit_ids), len(labels)):
            raise ValueError(
                f"outcomes shape {y.shape} does not match {len(self.unit_ids)} units x {len(labels)} periods"
            )
        if g.shape != (len(self.unit_ids),):
            raise ValueError("adoption must have one entry per unit")
        if len(labels) > 1 and np.any(np.diff(labels) <= 0):
            raise ValueError("period_labels must be strictly increasing")
        if not np.all(np.isfinite(y)):
            raise ValueError("outcomes must be finite (the raw panel is balanced)")
        finite = np.isfinite(g)
        if np.any(g[finite] != np.round(g[finite])) or np.any((g[finite] < 1) | (g[finite] > len(labels))):
            raise InvalidAdoptionError("adoption positions must be integers in 1..T or inf")
        if np.any(np.isnan(g)) or np.any(g == -np.inf):
            raise InvalidAdoptionError("adoption positions must be integers in 1..T or inf")

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[1]

    @property
    def eventually_treated(self) -> np.ndarray:
        return np.isfinite(self.adoption)

    def adoption_label(self, i: int):
        """Calendar label of unit ``i``'s adoption, or ``None`` if never treated."""
        g = self.adoption[i]
        return None if not np.isfinite(g) else int(self.period_labels[int(g) - 1])

    def replace(self, **changes) -> "Panel":
        kw = dict(
            unit_ids=self.unit_ids,
            period_labels=self.period_labels,
            outcomes=self.outcomes,
            adoption=self.adoption,
            residualized=self.residualized,
        )
        kw.update(changes)
        return Panel(**kw)

    def take_units(self, rows: Sequence[int], unit_ids: Sequence[str] | None = None) -> "Panel":
        rows = np.asarray(rows, dtype=int)
        ids = [self.unit_ids[r] for r in rows] if unit_ids is None else unit_ids
        return self.replace(unit_ids=ids, outcomes=self.outcomes[rows], adoption=self.adoption[rows])


@dataclass(frozen=True)
class TreatmentMask:
    """Absorbing treatment indicator ``treated[i, t-1] = (t >= G_i)``."""

    treated: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "treated", _frozen(np.asarray(self.treated, dtype=bool)))

    @property
    def untreated(self) -> np.ndarray:
        return ~self.treated

    @property
    def shape(self):
        return self.treated.shape


@dataclass(frozen=True)
class FixedEffects:
    unit_effects: np.ndarray
    time_effects: np.ndarray
    grand_mean: float
    sweeps: int = 0
    converged: bool = True

    def surface(self) -> np.ndarray:
        return self.grand_mean + self.unit_effects[:, None] + self.time_effects[None, :]


@dataclass(frozen=True)
class SimConfig:
    """Configuration for the synthetic factor-model panel generator.

    The treatment effect at event time ``k >= 0`` is
    ``effect + effect_slope * k``.
    """

    n_units: int = 40
    n_periods: int = 30
    rank: int = 2
    factor_scale: float = 1.0
    noise_scale: float = 0.0
    adoption_mechanism: str = "random-staggered"
    effect: float = 0.0
    effect_slope: float = 0.0
    seed: int = 0
    treated_fraction: float = 0.5
    earliest_adoption: int | None = None
    fe_scale: float = 0.0
    selection_strength: float = 2.0

    def __post_init__(self):
        if self.n_units < 1 or self.n_periods < 1:
            raise ConfigError("n_units and n_periods must be positive")
        if self.rank < 1 or self.rank > min(self.n_units, self.n_periods):
            raise ConfigError("rank must lie in 1..min(n_units, n_periods)")
        if self.factor_scale < 0 or self.noise_scale < 0 or self.fe_scale < 0:
            raise ConfigError("scales must be nonnegative")
        if self.adoption_mechanism not in ("random-staggered", "factor-selected"):
            raise ConfigError(f"unknown adoption_mechanism {self.adoption_mechanism!r}")
        if not 0.0 <= self.treated_fraction <= 1.0:
            raise ConfigError("treated_fraction must lie in [0, 1]")
        if self.earliest_adoption is not None and not 1 <= self.earliest_adoption <= self.n_periods:
            raise ConfigError("earliest_adoption must lie in 1..n_periods")


# ---------------------------------------------------------------------------
# CSV I/O


def _open_text(source) -> IO[str]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8")
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"), newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def _parse_adoption(raw: str, row_no: int):
    s = raw.strip()
    if s.lower() in NEVER_MARKERS:
        return None
    try:
        v = float(s)
    except ValueError:
        raise PanelParseError(f"row {row_no}: adoption {raw!r} is not numeric") from None
    if not math.isfinite(v) or v != int(v):
        raise InvalidAdoptionError(f"row {row_no}: adoption {raw!r} is not a period label")
    return int(v)


def load_panel(
    source,
    schema: Mapping[str, str] | None = None,
    early_adoption: str = "error",
) -> Panel:
    """Read a long-format CSV (one row per unit-period) into a :class:`Panel`.

    Parameters
    ----------
    source : path, bytes or file-like
    schema : mapping, optional
        Maps the logical columns ``unit``, ``period``, ``outcome`` and
        ``adoption`` to header names in the file.
    early_adoption : {"error", "clip"}
        How to treat adoption labels earlier than the first period. ``"clip"``
        maps them to position 1 (treated throughout the window).

    Raises
    ------
    UnbalancedPanelError, PanelParseError, InvalidAdoptionError
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    if early_adoption not in ("error", "clip"):
        raise ConfigError("early_adoption must be 'error' or 'clip'")

    fh = _open_text(source)
    try:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [cols[k] for k in ("unit", "period", "outcome", "adoption") if cols[k] not in header]
        if missing:
            raise PanelParseError(f"missing column(s) {missing} in header {header}")

        cells: dict[tuple[str, int], float] = {}
        adoption_raw: dict[str, tuple[int | None, int]] = {}
        for row_no, row in enumerate(reader, start=2):
            unit = row[cols["unit"]].strip()
            try:
                period = int(float(row[cols["period"]]))
            except (TypeError, ValueError):
                raise PanelParseError(f"row {row_no}: period {row[cols['period']]!r} is not an integer") from None
            try:
                y = float(row[cols["outcome"]])
            except (TypeError, ValueError):
                raise PanelParseError(f"row {row_no}: outcome {row[cols['outcome']]!r} is not numeric") from None
            if not math.isfinite(y):
                raise PanelParseError(f"row {row_no}: outcome {row[cols['outcome']]!r} is not finite")
            if (unit, period) in cells:
                raise PanelParseError(f"row {row_no}: duplicate cell ({unit}, {period})")
            cells[(unit, period)] = y
            g = _parse_adoption(row[cols["adoption"]] or "", row_no)
            if unit in adoption_raw and adoption_raw[unit][0] != g:
                raise InvalidAdoptionError(
                    f"row {row_no}: unit {unit} has inconsistent adoption ({adoption_raw[unit][0]} vs {g})"
                )
            adoption_raw.setdefault(unit, (g, row_no))
    finally:
        if isinstance(source, (str, os.PathLike)):
            fh.close()

    if not cells:
        raise EmptyPanelError("CSV contains no data rows")

    units = sorted(adoption_raw)
    labels = sorted({p for _, p in cells})
    pos = {p: j for j, p in enumerate(labels)}
    y = np.empty((len(units), len(labels)))
    for i, u in enumerate(units):
        for p in labels:
            try:
                y[i, pos[p]] = cells[(u, p)]
            except KeyError:
                raise UnbalancedPanelError(f"missing cell (unit={u}, period={p})") from None

    adoption = np.full(len(units), NEVER)
    for i, u in enumerate(units):
        g, row_no = adoption_raw[u]
        if g is None:
            continue
        if g in pos:
            adoption[i] = pos[g] + 1
        elif g < labels[0] and early_adoption == "clip":
            adoption[i] = 1
        else:
            raise InvalidAdoptionError(
                f"row {row_no}: adoption {g} of unit {u} is outside period labels {labels[0]}..{labels[-1]}"
            )
    return Panel(unit_ids=units, period_labels=labels, outcomes=y, adoption=adoption)


def write_panel(panel: Panel, dest, schema: Mapping[str, str] | None = None) -> None:
    """Write ``panel`` in the long format read by :func:`load_panel`."""
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    own = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([cols["unit"], cols["period"], cols["outcome"], cols["adoption"]])
        for i, u in enumerate(panel.unit_ids):
            g = panel.adoption_label(i)
            for j, p in enumerate(panel.period_labels):
                w.writerow([u, int(p), repr(float(panel.outcomes[i, j])), "Inf" if g is None else g])
    finally:
        if own:
            fh.close()


# ---------------------------------------------------------------------------
# Panel transformations


@dataclass(frozen=True)
class FilterReport:
    min_pre: int
    retained: tuple
    excluded: tuple = field(default_factory=tuple)


def filter_min_pretreatment(panel: Panel, min_pre: int) -> tuple[Panel, FilterReport]:
    """Drop eventually-treated units with fewer than ``min_pre`` pre-treatment periods."""
    if min_pre < 1:
        raise ConfigError("min_pre must be >= 1")
    g = panel.adoption
    keep = ~np.isfinite(g) | (np.where(np.isfinite(g), g, 0) - 1 >= min_pre)
    if not keep.any():
        raise EmptyPanelError(f"no unit has at least {min_pre} pre-treatment periods")
    rows = np.flatnonzero(keep)
    excluded = tuple(panel.unit_ids[i] for i in np.flatnonzero(~keep))
    if excluded:
        logger.info("excluded %d unit(s) with < %d pre-periods: %s", len(excluded), min_pre, ", ".join(excluded))
    out = panel.take_units(rows)
    return out, FilterReport(min_pre=min_pre, retained=out.unit_ids, excluded=excluded)


def build_mask(panel: Panel) -> TreatmentMask:
    t = np.arange(1, panel.n_periods + 1)
    return TreatmentMask(t[None, :] >= panel.adoption[:, None])


def fit_fixed_effects(
    panel: Panel,
    mask: TreatmentMask,
    tol: float = 1e-10,
    max_sweeps: int = 10_000,
) -> FixedEffects:
    """Two-way fixed effects fitted by least squares on untreated cells only.

    Alternates row and column demeaning of the untreated cells until the
    largest change in any effect falls below ``tol``. On a balanced grid one
    sweep is exact. Effects are normalised to sum to zero, with the level
    carried by ``grand_mean``.
    """
    obs = mask.untreated
    y = panel.outcomes
    n_row = obs.sum(axis=1)
    n_col = obs.sum(axis=0)
    if np.any(n_col == 0):
        t = int(np.flatnonzero(n_col == 0)[0])
        raise InestimableError(
            f"period {panel.period_labels[t]} (position {t + 1}) has no untreated cell; its time effect is inestimable"
        )
    if np.any(n_row == 0):
        i = int(np.flatnonzero(n_row == 0)[0])
        raise InestimableError(f"unit {panel.unit_ids[i]} has no untreated cell; its unit effect is inestimable")

    w = obs.astype(float)
    yw = np.where(obs, y, 0.0)
    a = np.zeros(y.shape[0])
    b = np.zeros(y.shape[1])
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        a_new = (yw - w * b[None, :]).sum(axis=1) / n_row
        b_new = (yw - w * a_new[:, None]).sum(axis=0) / n_col
        delta = max(np.max(np.abs(a_new - a)), np.max(np.abs(b_new - b)))
        a, b = a_new, b_new
        if delta < tol:
            converged = True
            break
    if not converged:
        logger.warning("fixed effects did not converge in %d sweeps (last change %.3g)", max_sweeps, delta)

    mu = a.mean() + b.mean()
    return FixedEffects(
        unit_effects=a - a.mean(),
        time_effects=b - b.mean(),
        grand_mean=float(mu),
        sweeps=sweeps,
        converged=converged,
    )


def residualize(panel: Panel, fe: FixedEffects) -> Panel:
    """Subtract the fitted fixed-effect surface from every cell."""
    if fe.unit_effects.shape != (panel.n_units,) or fe.time_effects.shape != (panel.n_periods,):
        raise ValueError(
            f"fixed effects sized ({fe.unit_effects.size}, {fe.time_effects.size}) "
            f"do not match panel ({panel.n_units}, {panel.n_periods})"
        )
    return panel.replace(outcomes=panel.outcomes - fe.surface(), residualized=True)


def simulate_panel(config: SimConfig) -> tuple[Panel, np.ndarray]:
    """Draw a factor-model panel with staggered adoption.

    Returns the panel and the N x T grid of true effects (zero on untreated
    cells). The untreated outcome is ``U V' + alpha_i + eta_t + noise``.
    """
    c = config
    rng = np.random.default_rng(c.seed)
    n, T = c.n_units, c.n_periods
    U = c.factor_scale * rng.standard_normal((n, c.rank))
    V = c.factor_scale * rng.standard_normal((T, c.rank))
    alpha = c.fe_scale * rng.standard_normal(n)
    eta = c.fe_scale * rng.standard_normal(T)
    noise = c.noise_scale * rng.standard_normal((n, T))

    earliest = c.earliest_adoption if c.earliest_adoption is not None else max(2, min(T, c.rank + 2))
    if c.adoption_mechanism == "random-staggered":
        p_treat = np.full(n, c.treated_fraction)
    else:
        loading = U[:, 0] / (c.factor_scale if c.factor_scale > 0 else 1.0)
        logit = c.selection_strength * loading
        base = np.log(c.treated_fraction / (1 - c.treated_fraction)) if 0 < c.treated_fraction < 1 else 0.0
        p_treat = 1.0 / (1.0 + np.exp(-(logit + base)))
        if c.treated_fraction in (0.0, 1.0):
            p_treat[:] = c.treated_fraction
    treated = rng.random(n) < p_treat
    adoption = np.full(n, NEVER)
    adoption[treated] = rng.integers(earliest, T + 1, size=int(treated.sum()))

    t = np.arange(1, T + 1)
    k = t[None, :] - adoption[:, None]
    tau = np.where(k >= 0, c.effect + c.effect_slope * np.where(k >= 0, k, 0), 0.0)
    y = U @ V.T + alpha[:, None] + eta[None, :] + noise + tau

    width = len(str(n - 1))
    units = [f"u{i:0{width}d}" for i in range(n)]
    panel = Panel(unit_ids=units, period_labels=np.arange(1, T + 1), outcomes=y, adoption=adoption)
    return panel, tau
