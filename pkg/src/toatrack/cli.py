"""Command-line front end: calibrate, run, aggregate, dump-trajectory."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import __version__
from .harness import (
    ALGORITHMS,
    CalibrationError,
    NumericalError,
    RunConfig,
    aggregate,
    calibrate_einit,
    emit,
    read_records_csv,
    run_experiment,
    summary_text,
)
from .motion import generate_trajectory, write_trajectory_csv
from .optimizers import OptimizerParams
from .scenario import ConfigError, load_scenario


def _add_scenario_arg(p):
    p.add_argument("--scenario", required=True, help="scenario config file (YAML)")


def _add_param_args(p):
    p.add_argument("--pcrb-target", type=float, default=1.0, help="bound target (m^2)")
    p.add_argument("--e-min", type=float, default=0.0)
    p.add_argument("--e-max", type=float, default=256.0)
    p.add_argument("--de-max", type=float, default=5.0, help="per-step cap (greedy pass)")
    p.add_argument("--dpcrb-thr", type=float, default=0.05)
    p.add_argument("--ssw-step", type=float, default=5.0)
    p.add_argument("--ssw-m", type=int, default=10)
    p.add_argument(
        "--reference",
        choices=("posterior", "prior"),
        default="posterior",
        help="bound the allocators steer (posterior recommended)",
    )


def _params_from(args) -> OptimizerParams:
    return OptimizerParams(
        pcrb_target=args.pcrb_target,
        e_min=args.e_min,
        e_max=args.e_max,
        de_max=args.de_max,
        dpcrb_thr=args.dpcrb_thr,
        e_ssw_step=args.ssw_step,
        m_ssw=args.ssw_m,
        reference=args.reference,
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="toatrack", description=__doc__)
    ap.add_argument("--version", action="version", version=f"toatrack {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="find the uniform initial energy for an outage target")
    _add_scenario_arg(p)
    p.add_argument("--trajectories", type=int, default=50)
    p.add_argument("--outage", type=float, default=0.01)
    p.add_argument("--target", type=float, default=1.0, help="bound target (m^2)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("run", help="run one experiment and write records + summary")
    _add_scenario_arg(p)
    p.add_argument("--algorithm", choices=ALGORITHMS, default="none")
    p.add_argument("--mode", choices=("energy", "latency"), default="energy")
    p.add_argument("--link", choices=("downlink", "uplink"), default="downlink")
    p.add_argument("--e-init", type=float, required=True, help="initial per-anchor energy")
    p.add_argument("--trajectories", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--h-eval", choices=("true-state", "ekf-predicted"), default="true-state")
    p.add_argument("--fading-redraw", choices=("per-step", "per-trajectory"), default="per-step")
    p.add_argument("--symbol-time", type=float, default=1e-6)
    p.add_argument("--apply-mode", choices=("incremental", "exact"), default="incremental")
    _add_param_args(p)

    p = sub.add_parser("aggregate", help="summarize one or more records files")
    p.add_argument("--records", nargs="+", required=True)
    p.add_argument("--target", type=float, default=1.0)
    p.add_argument("--out", default=None, help="write summary here instead of stdout")

    p = sub.add_parser("dump-trajectory", help="write one seeded trajectory as CSV")
    _add_scenario_arg(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "calibrate":
            scen, _ = load_scenario(args.scenario)
            e_init = calibrate_einit(
                scen,
                n_traj=args.trajectories,
                target_outage=args.outage,
                pcrb_target=args.target,
                master_seed=args.seed,
            )
            print(f"e_init = {e_init}")
        elif args.command == "run":
            scen, anchor_spec = load_scenario(args.scenario)
            cfg = RunConfig(
                algorithm=args.algorithm,
                mode=args.mode,
                link=args.link,
                e_init=args.e_init,
                n_traj=args.trajectories,
                master_seed=args.seed,
                params=_params_from(args),
                h_eval=args.h_eval,
                fading_redraw=args.fading_redraw,
                symbol_time=args.symbol_time,
                apply_mode=args.apply_mode,
            )
            records = run_experiment(scen, cfg, anchor_spec)
            summary = aggregate(records, pcrb_target=args.pcrb_target)
            path = emit(summary, records, args.out, scen, cfg)
            print(f"wrote {path}")
        elif args.command == "aggregate":
            records = []
            for path in args.records:
                records.extend(read_records_csv(path))
            summary = aggregate(records, pcrb_target=args.target)
            text = summary_text(summary, scenario=None, cfg=None)
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text)
                print(f"wrote {args.out}")
            else:
                print(text, end="")
        elif args.command == "dump-trajectory":
            scen, _ = load_scenario(args.scenario)
            traj = generate_trajectory(scen, np.random.SeedSequence(args.seed, spawn_key=(1, 0)))
            write_trajectory_csv(traj, args.out)
            print(f"wrote {args.out}")
    except (ConfigError, CalibrationError, NumericalError, np.linalg.LinAlgError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
