"""Command-line entry point: ``mcpanel {run,summarize,simulate,cv}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, McPanelError
from .panel import SimConfig, simulate_panel, write_panel
from .pipeline import RunConfig, atomic_write_text, load_for_config, run, run_cv, summarize_data

logger = logging.getLogger("mcpanel")


def _config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if getattr(args, "input", None):
        cfg.input = args.input
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "estimators", None) is not None:
        cfg.estimators = [e.strip() for e in args.estimators.split(",") if e.strip()]
    if getattr(args, "residualize", False):
        cfg.residualize = True
    if getattr(args, "no_bootstrap", False):
        cfg.bootstrap_B = 0
    if getattr(args, "min_pre", None) is not None:
        cfg.min_pre = args.min_pre
    return cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    result = run(cfg)
    print(json.dumps({"out": cfg.out, "mean_post_effect": result.summary["mean_post_effect"],
                      "chosen_lambda": result.summary["chosen_lambda"]}, indent=2))
    return 0


def cmd_summarize(args) -> int:
    cfg = _config(args)
    if cfg.input is None:
        raise ConfigError("no input file given")
    panel, report = load_for_config(cfg)
    rep = summarize_data(panel, report)
    if not args.units:
        rep.pop("units")
    print(json.dumps(rep, indent=2))
    return 0


def cmd_simulate(args) -> int:
    fields = {}
    if args.config:
        with open(args.config) as fh:
            fields.update(json.load(fh))
    for name in ("n_units", "n_periods", "rank", "noise_scale", "effect", "effect_slope", "treated_fraction",
                 "earliest_adoption", "adoption_mechanism", "fe_scale", "factor_scale"):
        v = getattr(args, name, None)
        if v is not None:
            fields[name] = v
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        sim = SimConfig(**fields)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    panel, tau = simulate_panel(sim)
    out = Path(args.out or "simulated.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    import io

    buf = io.StringIO()
    write_panel(panel, buf)
    atomic_write_text(out, buf.getvalue())
    lines = ["unit,period,true_effect"]
    for i, u in enumerate(panel.unit_ids):
        for j in np.flatnonzero(tau[i] != 0):
            lines.append(f"{u},{int(panel.period_labels[j])},{tau[i, j]:.17g}")
    atomic_write_text(out.with_name(out.stem + "_effects.csv"), "\n".join(lines) + "\n")
    print(str(out))
    return 0


def cmd_cv(args) -> int:
    cfg = _config(args)
    cfg.validate()
    panel, _ = load_for_config(cfg)
    rep = run_cv(cfg, panel)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    import io

    buf = io.StringIO()
    rep.to_csv(buf)
    atomic_write_text(out / "cv_report.csv", buf.getvalue())
    atomic_write_text(out / "cv_summary.json", rep.to_json() + "\n")
    print(rep.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcpanel", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--input", help="long-format panel CSV (overrides config)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--min-pre", type=int, dest="min_pre")

    sp = sub.add_parser("run", help="full estimation pipeline")
    common(sp)
    sp.add_argument("--estimators", help="comma-separated subset of full-mc,cy,combine-apply,did,twfe-pooled")
    sp.add_argument("--residualize", action="store_true", help="remove unit and time fixed effects first")
    sp.add_argument("--no-bootstrap", action="store_true", dest="no_bootstrap")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("summarize", help="descriptive data report")
    common(sp)
    sp.add_argument("--units", action="store_true", help="include per-unit rows")
    sp.set_defaults(func=cmd_summarize)

    sp = sub.add_parser("simulate", help="write a synthetic factor-model panel")
    sp.add_argument("--config", help="JSON SimConfig fields")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="output CSV path")
    sp.add_argument("--n-units", type=int, dest="n_units")
    sp.add_argument("--n-periods", type=int, dest="n_periods")
    sp.add_argument("--rank", type=int)
    sp.add_argument("--noise-scale", type=float, dest="noise_scale")
    sp.add_argument("--factor-scale", type=float, dest="factor_scale")
    sp.add_argument("--fe-scale", type=float, dest="fe_scale")
    sp.add_argument("--effect", type=float)
    sp.add_argument("--effect-slope", type=float, dest="effect_slope")
    sp.add_argument("--treated-fraction", type=float, dest="treated_fraction")
    sp.add_argument("--earliest-adoption", type=int, dest="earliest_adoption")
    sp.add_argument("--adoption-mechanism", dest="adoption_mechanism",
                    choices=["random-staggered", "factor-selected"])
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("cv", help="cross-validate the nuclear-norm penalty only")
    common(sp)
    sp.add_argument("--residualize", action="store_true")
    sp.set_defaults(func=cmd_cv)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except McPanelError as e:
        err = {"error": type(e).__name__, "message": str(e), "exit_code": e.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        code = 3
        err = {"error": type(e).__name__, "message": str(e), "exit_code": code}
        print(json.dumps(err), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
