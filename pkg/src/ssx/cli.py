"""Command-line interface.

Subcommands:

* ``run`` executes a batch from a YAML config file or a named preset.
* ``fit-gp`` fits a lengthscale to a layout's dense safety sample.
* ``export-plots`` aggregates run outputs into CSV data and figures.
* ``validate-fixtures`` re-runs construction validation on every
  shipped layout.

Exit codes: 0 success, 1 configuration error, 2 fixture error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, FixtureError
from .harness import (
    ExperimentConfig,
    PRESETS,
    export_plot_data,
    fit_hyperparameters,
    list_fixtures,
    load_preset,
    load_world,
    run_batch,
)


def build_parser():
    p = argparse.ArgumentParser(prog="ssx", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a batch of seeded trials")
    run_p.add_argument("--config", help="YAML config file path")
    run_p.add_argument("--preset", choices=sorted(PRESETS), help="named preset")
    run_p.add_argument("--method", help="override method (ours|baseline)")
    run_p.add_argument("--workers", type=int, default=1)
    run_p.add_argument("--out", default="runs/out")
    run_p.add_argument("--seeds", help="override seeds, e.g. 0-9")
    run_p.add_argument("--layouts", help="override layouts, comma separated")

    fit_p = sub.add_parser("fit-gp", help="fit a GP lengthscale to a layout")
    fit_p.add_argument("--layout", required=True)
    fit_p.add_argument(
        "--mode", choices=["fixed", "optimized", "optimized-inc"], default="optimized"
    )
    fit_p.add_argument("--resolution", type=float, default=1.0)

    exp_p = sub.add_parser("export-plots", help="aggregate run outputs")
    exp_p.add_argument("--in", dest="run_dirs", nargs="+", required=True)
    exp_p.add_argument("--out", default="runs/plots")
    exp_p.add_argument("--no-render", action="store_true")

    sub.add_parser("validate-fixtures", help="validate all shipped layouts")
    return p


def _cmd_run(args) -> int:
    if bool(args.config) == bool(args.preset):
        raise ConfigError("provide exactly one of --config or --preset")
    overrides = {}
    if args.method:
        overrides["method"] = args.method
    if args.seeds:
        overrides["seeds"] = args.seeds
    if args.layouts:
        overrides["layouts"] = args.layouts.split(",")
    if args.preset:
        cfg = load_preset(args.preset, **overrides)
    else:
        cfg = ExperimentConfig.from_yaml(args.config)
        if overrides:
            doc = cfg.to_canonical()
            doc.update(overrides)
            cfg = ExperimentConfig.from_dict(doc)
    cfg.settings()  # validate before running
    _, summary = run_batch(cfg, out_dir=args.out, workers=args.workers)
    print(
        f"trials={summary.n_trials} success={summary.success_rate:.3f} "
        f"violation={summary.violation_rate:.3f} stuck={summary.stuck_rate:.3f} "
        f"states={summary.mean_states_explored:.1f}"
    )
    print(f"outputs in {args.out}")
    return 0


def _cmd_fit(args) -> int:
    value = fit_hyperparameters(
        args.layout, grid_resolution=args.resolution, mode=args.mode
    )
    print(f"{args.layout} {args.mode} lengthscale: {value:.4f}")
    return 0


def _cmd_export(args) -> int:
    path = export_plot_data(args.run_dirs, args.out, render=not args.no_render)
    print(f"wrote {path}")
    return 0


def _cmd_validate(args=None) -> int:
    from .environments import GroundWorld, validate_ground_world
    from .tabletop import validate_object_world

    for name in list_fixtures():
        world = load_world(name)
        if isinstance(world, GroundWorld):
            rep = validate_ground_world(world, 0.25, 1.75, 2.8)
            print(f"{name}: ok (audit worst q {rep['audit_worst_q']:.2f})")
        else:
            rep = validate_object_world(world)
            print(f"{name}: ok (heavy contacts {rep['heavy_contacts']})")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "fit-gp":
            return _cmd_fit(args)
        if args.command == "export-plots":
            return _cmd_export(args)
        if args.command == "validate-fixtures":
            return _cmd_validate(args)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FixtureError as exc:
        print(f"fixture error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
