"""Nuclear-norm regularised matrix completion.

The solver is soft-impute: repeatedly fill the unobserved cells with the
current estimate and apply singular value soft-thresholding. Each step is a
majorise-minimise update, so the penalised objective never increases.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateFitError, RankDeficiencyError

logger = logging.getLogger(__name__)

SCHEMES = ("observed-kfold", "missing-fraction", "pre-period-holdout")


def _svt_parts(M: np.ndarray, lam: float):
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    s = np.maximum(s - lam, 0.0)
    return U, s, Vt


def svt(M, lam: float) -> np.ndarray:
    """Singular value soft-thresholding.

    Returns the unique minimiser of ``0.5 * ||X - M||_F^2 + lam * ||X||_*``.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("svt input contains non-finite entries")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return M.copy()
    U, s, Vt = _svt_parts(M, lam)
    r = int(np.count_nonzero(s))
    return (U[:, :r] * s[:r]) @ Vt[:r]


def nuclear_norm(X) -> float:
    return float(np.linalg.svd(np.asarray(X, dtype=float), compute_uv=False).sum())


def mc_objective(X, data, observed, lam: float) -> float:
    """``0.5 * ||P_obs(X - data)||_F^2 + lam * ||X||_*``."""
    r = np.where(observed, X - data, 0.0)
    return 0.5 * float(np.sum(r * r)) + lam * nuclear_norm(X)


@dataclass
class MCFit:
    completed: np.ndarray
    singular_values: np.ndarray
    lam: float
    iterations: int
    final_delta: float
    converged: bool
    objective: list = field(default_factory=list, repr=False)

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(self.singular_values > 0))


def check_coverage(observed: np.ndarray) -> None:
    rows = np.flatnonzero(~observed.any(axis=1))
    if rows.size:
        raise RankDeficiencyError(f"row {int(rows[0])} has no observed cell")
    cols = np.flatnonzero(~observed.any(axis=0))
    if cols.size:
        raise RankDeficiencyError(f"column {int(cols[0])} has no observed cell")


def initial_fill(data: np.ndarray, observed: np.ndarray, fill: str = "colmean") -> np.ndarray:
    if fill == "zero":
        return np.where(observed, data, 0.0)
    if fill == "colmean":
        n = observed.sum(axis=0)
        means = np.where(observed, data, 0.0).sum(axis=0) / np.maximum(n, 1)
        return np.where(observed, data, means[None, :])
    raise ValueError(f"unknown fill {fill!r}")


def soft_impute(
    data,
    observed,
    lam: float,
    tol: float = 1e-7,
    max_iter: int = 2000,
    init=None,
    fill: str = "colmean",
    track_objective: bool = False,
) -> MCFit:
    """Complete ``data`` from its ``observed`` cells by soft-impute.

    Iterates ``X <- svt(P_obs(data) + P_miss(X), lam)`` until the relative
    Frobenius change drops below ``tol``. Hitting ``max_iter`` is not an
    error; the returned fit has ``converged=False``.

    Parameters
    ----------
    data : array_like, shape (N, T)
        Values on unobserved cells are ignored.
    observed : array_like of bool, shape (N, T)
    lam : float
        Nuclear-norm penalty.
    init : array_like, optional
        Starting iterate. Defaults to the observed data with missing cells
        filled according to ``fill`` (``"zero"`` or ``"colmean"``).
    track_objective : bool
        Record the penalised objective at the start and after every step.
    """
    data = np.asarray(data, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if data.shape != observed.shape:
        raise ValueError("data and observed must have the same shape")
    check_coverage(observed)
    obs_data = np.where(observed, data, 0.0)
    if not np.all(np.isfinite(obs_data)):
        raise ValueError("observed data contain non-finite entries")

    X = initial_fill(data, observed, fill) if init is None else np.array(init, dtype=float)
    objective = [mc_objective(X, data, observed, lam)] if track_objective else []
    s = np.linalg.svd(X, compute_uv=False) if lam == 0 else None
    delta = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Z = np.where(observed, data, X)
        U, s, Vt = _svt_parts(Z, lam)
        r = int(np.count_nonzero(s))
        X_new = (U[:, :r] * s[:r]) @ Vt[:r]
        denom = np.linalg.norm(X)
        diff = np.linalg.norm(X_new - X)
        delta = diff / denom if denom > 0 else (0.0 if diff == 0 else np.inf)
        X = X_new
        if track_objective:
            objective.append(0.5 * float(np.sum(np.where(observed, X - data, 0.0) ** 2)) + lam * float(s.sum()))
        if delta < tol:
            converged = True
            break
    if not converged:
        logger.debug("soft_impute hit max_iter=%d (lam=%.4g, delta=%.3g)", max_iter, lam, delta)
    return MCFit(
        completed=X,
        singular_values=np.sort(s)[::-1],
        lam=float(lam),
        iterations=it,
        final_delta=float(delta),
        converged=converged,
        objective=objective,
    )


def condition_report(fit: MCFit, threshold: float | None = None) -> float:
    """Ratio of the largest singular value to the smallest one above ``threshold``.

    ``threshold`` defaults to ``1e-8`` times the largest singular value.
    """
    s = np.asarray(fit.singular_values, dtype=float)
    if s.size == 0 or s[0] <= 0:
        raise DegenerateFitError("fit has no positive singular value")
    if threshold is None:
        threshold = 1e-8 * s[0]
    kept = s[s > threshold]
    if kept.size == 0:
        raise DegenerateFitError(f"no singular value exceeds threshold {threshold:g}")
    return float(kept.max() / kept.min())


def lambda_max(data, observed) -> float:
    """Smallest penalty at which the completion is identically zero."""
    return float(np.linalg.svd(np.where(observed, data, 0.0), compute_uv=False)[0])


def default_lambda_grid(data, observed, n: int = 20, ratio: float = 1e-4) -> np.ndarray:
    top = lambda_max(data, observed)
    if top <= 0:
        return np.zeros(1)
    return np.geomspace(top, top * ratio, n)


# ---------------------------------------------------------------------------
# Cross-validation


@dataclass
class CVReport:
    lambda_grid: np.ndarray
    fold_errors: np.ndarray  # (n_lambda, n_folds)
    chosen_lambda: float
    scheme: str
    seed: int
    folds: int

    @property
    def mean_errors(self) -> np.ndarray:
        return self.fold_errors.mean(axis=1)

    def to_csv(self, dest) -> None:
        own = isinstance(dest, (str, os.PathLike))
        fh = open(dest, "w", newline="") if own else dest
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "fold", "error"])
            for i, lam in enumerate(self.lambda_grid):
                for f in range(self.fold_errors.shape[1]):
                    w.writerow([f"{lam:.17g}", f, f"{self.fold_errors[i, f]:.17g}"])
        finally:
            if own:
                fh.close()

    def summary(self) -> dict:
        return {"chosen_lambda": self.chosen_lambda, "scheme": self.scheme, "seed": self.seed, "folds": self.folds}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _valid_split(train: np.ndarray) -> bool:
    return bool(train.any(axis=1).all() and train.any(axis=0).all())


def _kfold_holdouts(observed, folds, rng):
    cells = np.flatnonzero(observed.ravel())
    for _ in range(10):
        perm = rng.permutation(cells)
        masks = []
        for chunk in np.array_split(perm, folds):
            h = np.zeros(observed.size, dtype=bool)
            h[chunk] = True
            masks.append(h.reshape(observed.shape))
        if all(_valid_split(observed & ~h) for h in masks):
            return masks
    raise RankDeficiencyError("could not draw folds that leave every row and column observed (10 attempts)")


def _fraction_holdouts(observed, repeats, rng, full_shape):
    cells = np.flatnonzero(observed.ravel())
    frac_missing = 1.0 - observed.sum() / float(np.prod(full_shape))
    size = max(1, int(round(frac_missing * cells.size)))
    masks = []
    for _ in range(repeats):
        for _attempt in range(10):
            h = np.zeros(observed.size, dtype=bool)
            h[rng.choice(cells, size=size, replace=False)] = True
            h = h.reshape(observed.shape)
            if _valid_split(observed & ~h):
                masks.append(h)
                break
        else:
            raise RankDeficiencyError("could not draw a holdout that leaves every row and column observed")
    return masks


def _pre_period_holdout(observed, adoption, h):
    if adoption is None:
        raise ConfigError("pre-period-holdout requires adoption times")
    hold = np.zeros_like(observed)
    for i, g in enumerate(adoption):
        if not np.isfinite(g):
            continue
        last_pre = int(g) - 1  # number of pre-periods
        if last_pre <= h:
            continue
        hold[i, last_pre - h : last_pre] = True
    hold &= observed
    if not hold.any():
        raise RankDeficiencyError(f"no eventually-treated unit has more than {h} pre-periods")
    if not _valid_split(observed & ~hold):
        raise RankDeficiencyError("pre-period holdout leaves a row or column unobserved")
    return [hold]


def _path_errors(data, train, hold, grid, fill, tol, max_iter):
    """Held-out MSE along a decreasing lambda path with warm starts."""
    errs = np.empty(len(grid))
    order = np.argsort(-np.asarray(grid))
    X = None
    for j in order:
        fit = soft_impute(data, train, grid[j], tol=tol, max_iter=max_iter, init=X, fill=fill)
        X = fit.completed
        r = (X - data)[hold]
        errs[j] = float(np.mean(r * r))
    return errs


def cross_validate(
    data,
    observed,
    lambda_grid=None,
    folds: int = 5,
    scheme: str = "observed-kfold",
    seed: int = 0,
    adoption=None,
    holdout_periods: int = 3,
    fill: str = "colmean",
    tol: float = 1e-7,
    max_iter: int = 2000,
    n_jobs: int = 1,
) -> CVReport:
    """Choose the nuclear-norm penalty by held-out squared error.

    Schemes
    -------
    observed-kfold
        Random partition of the observed cells into ``folds`` groups.
    missing-fraction
        ``folds`` random holdouts, each the same fraction of the observed
        cells as the overall missing fraction of the matrix.
    pre-period-holdout
        Masks the last ``holdout_periods`` pre-treatment periods of each
        eventually-treated unit (needs ``adoption``, 1-based).

    The chosen penalty minimises mean held-out error; ties go to the larger
    penalty.
    """
    data = np.asarray(data, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown CV scheme {scheme!r}; expected one of {SCHEMES}")
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(data, observed)
    grid = np.asarray(lambda_grid, dtype=float)
    if grid.size == 0:
        raise ConfigError("lambda_grid must be non-empty")
    if np.any(grid < 0):
        raise ConfigError("lambda_grid must be nonnegative")
    if scheme == "observed-kfold" and folds < 2:
        raise ConfigError("observed-kfold needs folds >= 2")
    check_coverage(observed)

    rng = np.random.default_rng(seed)
    if scheme == "observed-kfold":
        holds = _kfold_holdouts(observed, folds, rng)
    elif scheme == "missing-fraction":
        holds = _fraction_holdouts(observed, max(folds, 1), rng, observed.shape)
    else:
        holds = _pre_period_holdout(observed, adoption, holdout_periods)

    def work(h):
        return _path_errors(data, observed & ~h, h, grid, fill, tol, max_iter)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            cols = list(ex.map(work, holds))
    else:
        cols = [work(h) for h in holds]
    errors = np.column_stack(cols)

    means = errors.mean(axis=1)
    best = means.min()
    tied = np.flatnonzero(means <= best + 1e-12 * abs(best))
    chosen = float(grid[tied].max())
    logger.info("CV (%s, %d folds) chose lambda=%.6g", scheme, errors.shape[1], chosen)
    return CVReport(
        lambda_grid=grid, fold_errors=errors, chosen_lambda=chosen, scheme=scheme, seed=seed, folds=errors.shape[1]
    )
