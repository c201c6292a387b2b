"""Matrix completion and split-apply-combine estimators for staggered-adoption panels."""

__version__ = "0.1.0"

from .aggregate import (
    CalendarATT,
    EventStudy,
    EventTimeEntry,
    aggregate_calendar,
    aggregate_event,
    bootstrap_ci,
    mean_post_effect,
)
from .diagnostics import PlaceboReport, gap_series, in_time_placebo, pretrend_summary
from .estimators import (
    CYSplit,
    EffectGrid,
    EstimatorSpec,
    combine_apply_estimate,
    combine_apply_grid,
    cy_estimate,
    cy_split,
    did_estimate,
    fit_twfe_pooled,
    full_mc_estimate,
)
from .lowrank import CVReport, MCFit, condition_report, cross_validate, soft_impute, svt
from .panel import (
    FixedEffects,
    Panel,
    SimConfig,
    TreatmentMask,
    build_mask,
    filter_min_pretreatment,
    fit_fixed_effects,
    load_panel,
    residualize,
    simulate_panel,
    write_panel,
)
