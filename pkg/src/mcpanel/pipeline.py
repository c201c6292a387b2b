"""End-to-end analysis: load, filter, residualize, tune, estimate, aggregate, diagnose."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import EventStudy, aggregate_event, bootstrap_ci, mean_post_effect
from .diagnostics import in_time_placebo, pretrend_summary
from .errors import ConfigError, McPanelError
from .estimators import ESTIMATORS, GRID_ESTIMATORS, EstimatorSpec, fit_twfe_pooled
from .lowrank import CVReport, condition_report, cross_validate, default_lambda_grid, soft_impute
from .panel import FilterReport, Panel, build_mask, filter_min_pretreatment, fit_fixed_effects, load_panel, residualize

logger = logging.getLogger(__name__)

MC_ESTIMATORS = ("full-mc", "cy", "combine-apply")


@dataclass
class RunConfig:
    input: str | None = None
    schema: dict = field(default_factory=dict)
    early_adoption: str = "error"
    estimators: list = field(default_factory=lambda: ["full-mc", "cy", "did"])
    residualize: bool = False
    cv_scheme: str = "observed-kfold"
    cv_folds: int = 5
    lambda_grid: dict = field(default_factory=lambda: {"n": 20, "ratio": 1e-4})
    lam: float | None = None
    holdout_periods: int = 3
    k_min: int = -20
    k_max: int = 10
    bootstrap_B: int = 100
    bootstrap_level: float = 0.95
    placebo_shift: int = 5
    min_pre: int | None = None
    seed: int = 0
    out: str = "out"
    group_size: int = 1
    tol: float = 1e-7
    max_iter: int = 2000
    n_jobs: int = 1

    def validate(self) -> None:
        if not self.estimators:
            raise ConfigError("no estimators requested")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ConfigError(f"unknown estimator(s) {bad}; choose from {ESTIMATORS}")
        if self.k_min > self.k_max:
            raise ConfigError("k_min must not exceed k_max")
        if self.bootstrap_B < 0:
            raise ConfigError("bootstrap_B must be >= 0")
        if self.bootstrap_B == 1:
            raise ConfigError("bootstrap_B must be 0 (disabled) or >= 2")
        if self.placebo_shift < 1:
            raise ConfigError("placebo_shift must be >= 1")
        if self.min_pre is not None and self.min_pre < 1:
            raise ConfigError("min_pre must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        if self.input is None:
            raise ConfigError("no input file given")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        cfg = cls.from_dict(d)
        if cfg.input and not os.path.isabs(cfg.input):
            cfg.input = str(Path(path).parent / cfg.input)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(obj) -> str:
    import io

    buf = io.StringIO()
    obj.to_csv(buf)
    return buf.getvalue()


def summarize_data(panel: Panel, report: FilterReport | None = None) -> dict:
    """Descriptive statistics of a panel and its adoption timing."""
    y = panel.outcomes
    lo, hi = y.min(axis=1), y.max(axis=1)
    units = [
        {"unit": u, "min": float(lo[i]), "max": float(hi[i]), "range": float(hi[i] - lo[i]),
         "adoption": panel.adoption_label(i)}
        for i, u in enumerate(panel.unit_ids)
    ]
    treated = [(panel.adoption_label(i), u) for i, u in enumerate(panel.unit_ids) if panel.eventually_treated[i]]
    out = {
        "n_units": panel.n_units,
        "n_periods": panel.n_periods,
        "first_period": int(panel.period_labels[0]),
        "last_period": int(panel.period_labels[-1]),
        "mean_within_unit_range": float(np.mean(hi - lo)),
        "units": units,
        "n_eventually_treated": len(treated),
        "n_never_treated": panel.n_units - len(treated),
    }
    if treated:
        first = min(g for g, _ in treated)
        last = max(g for g, _ in treated)
        out["first_adoption"] = first
        out["last_adoption"] = last
        out["adoption_span"] = last - first
        out["first_adopters"] = sorted(u for g, u in treated if g == first)
        out["last_adopters"] = sorted(u for g, u in treated if g == last)
    if report is not None:
        out["min_pre"] = report.min_pre
        out["n_retained"] = len(report.retained)
        out["n_excluded"] = len(report.excluded)
        out["excluded_units"] = list(report.excluded)
    return out


def load_for_config(cfg: RunConfig) -> tuple[Panel, FilterReport | None]:
    panel = load_panel(cfg.input, cfg.schema, early_adoption=cfg.early_adoption)
    report = None
    if cfg.min_pre is not None:
        panel, report = filter_min_pretreatment(panel, cfg.min_pre)
    return panel, report


def working_panel(panel: Panel, resid: bool) -> Panel:
    if not resid:
        return panel
    return residualize(panel, fit_fixed_effects(panel, build_mask(panel)))


def run_cv(cfg: RunConfig, panel: Panel) -> CVReport:
    work = working_panel(panel, cfg.residualize)
    obs = build_mask(work).untreated
    grid_spec = cfg.lambda_grid or {}
    if "values" in grid_spec:
        grid = np.asarray(grid_spec["values"], dtype=float)
    else:
        grid = default_lambda_grid(work.outcomes, obs, int(grid_spec.get("n", 20)), float(grid_spec.get("ratio", 1e-4)))
    return cross_validate(
        work.outcomes,
        obs,
        grid,
        folds=cfg.cv_folds,
        scheme=cfg.cv_scheme,
        seed=cfg.seed,
        adoption=work.adoption,
        holdout_periods=cfg.holdout_periods,
        fill="zero" if work.residualized else "colmean",
        tol=cfg.tol,
        max_iter=cfg.max_iter,
        n_jobs=cfg.n_jobs,
    )


@dataclass
class RunResult:
    summary: dict
    studies: dict
    grids: dict
    cv: CVReport | None


def run(cfg: RunConfig) -> RunResult:
    """Execute the full pipeline and write all artefacts into ``cfg.out``."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    panel, report = load_for_config(cfg)
    summary: dict = {
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": {"cv": cfg.seed, "bootstrap": cfg.seed},
        "data": {k: v for k, v in summarize_data(panel, report).items() if k != "units"},
    }

    lam = cfg.lam
    cv = None
    if any(e in MC_ESTIMATORS for e in cfg.estimators) and lam is None:
        cv = run_cv(cfg, panel)
        lam = cv.chosen_lambda
        atomic_write_text(out / "cv_report.csv", _csv_text(cv))
        summary["cv"] = cv.summary()
    summary["chosen_lambda"] = lam

    grids, studies = {}, {}
    summary["mean_post_effect"] = {}
    summary["pretrend"] = {}
    summary["inestimable_cells"] = {}
    for name in cfg.estimators:
        if name == "twfe-pooled":
            work = working_panel(panel, cfg.residualize)
            summary["twfe_pooled"] = fit_twfe_pooled(work, build_mask(work))
            continue
        spec = EstimatorSpec(
            name,
            lam=lam if name in MC_ESTIMATORS else None,
            residualize=cfg.residualize,
            group_size=cfg.group_size,
            tol=cfg.tol,
            max_iter=cfg.max_iter,
            n_jobs=cfg.n_jobs,
        )
        grid = spec.estimate(panel)
        study = aggregate_event(grid, cfg.k_min, cfg.k_max)
        if cfg.bootstrap_B > 0:
            study = bootstrap_ci(
                panel, spec, cfg.bootstrap_B, cfg.bootstrap_level, cfg.seed, cfg.k_min, cfg.k_max,
                n_jobs=cfg.n_jobs, point=study,
            )
            if study.warnings:
                summary.setdefault("bootstrap_warnings", {})[name] = study.warnings
        grids[name], studies[name] = grid, study
        atomic_write_text(out / f"effects_{name}.csv", _csv_text(grid))
        atomic_write_text(out / f"event_study_{name}.csv", _csv_text(study))
        summary["inestimable_cells"][name] = len(grid.inestimable)
        try:
            summary["mean_post_effect"][name] = mean_post_effect(study)
        except McPanelError as e:
            summary["mean_post_effect"][name] = None
            logger.warning("%s: %s", name, e)
        try:
            mx, mn = pretrend_summary(study)
            summary["pretrend"][name] = {"max_abs": mx, "mean_abs": mn}
        except McPanelError:
            summary["pretrend"][name] = None

    if lam is not None and any(e in MC_ESTIMATORS for e in cfg.estimators):
        fit = grids["full-mc"].fit if "full-mc" in grids else None
        if fit is None:
            work = working_panel(panel, cfg.residualize)
            fit = soft_impute(
                work.outcomes, build_mask(work).untreated, lam, cfg.tol, cfg.max_iter,
                fill="zero" if work.residualized else "colmean",
            )
        try:
            summary["condition_number"] = condition_report(fit)
        except McPanelError as e:
            summary["condition_number"] = None
            logger.warning("condition number: %s", e)
        summary["fitted_rank"] = fit.rank

    grid_names = [e for e in cfg.estimators if e in GRID_ESTIMATORS]
    if grid_names:
        name = "full-mc" if "full-mc" in grid_names else grid_names[0]
        spec = EstimatorSpec(
            name, lam=lam if name in MC_ESTIMATORS else None, residualize=cfg.residualize,
            group_size=cfg.group_size, tol=cfg.tol, max_iter=cfg.max_iter, n_jobs=cfg.n_jobs,
        )
        try:
            placebo = in_time_placebo(panel, spec, cfg.placebo_shift)
            atomic_write_text(out / "placebo_report.csv", _csv_text(placebo))
            summary["placebo"] = placebo.summary()
        except McPanelError as e:
            summary["placebo"] = {"estimator": name, "error": str(e)}

    if studies:
        from .plotting import event_study_svg

        title = "event study (fixed effects removed)" if cfg.residualize else "event study"
        atomic_write_text(out / "event_study.svg", event_study_svg(studies, title))

    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return RunResult(summary=summary, studies=studies, grids=grids, cv=cv)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")
