"""``trainmpc`` command line: validate maps, compute references, simulate scenarios.

Exit codes: 0 success, 1 usage, 2 validation, 3 infeasible leg, 4 solver
fault, 5 I/O.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .dynamics import TrainParams
from .refsolve import InfeasibleLeg, NoConvergence, compute_reference, reference_to_csv
from .simloop import ScenarioError, read_scenario, run_scenario, write_results
from .trackmap import MapError, TractionCondition, leg_between, read_map
from .trackmpc import ControllerFault, MpcConfig

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_IO = range(6)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _positive(text):
    val = float(text)
    if not val > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return val


def _nonneg(text):
    val = float(text)
    if not val >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return val


def _posint(text):
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {text}")
    return val


def build_parser():
    p = _Parser(prog="trainmpc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a map file")
    v.add_argument("map", nargs="?")
    v.add_argument("--map", dest="map_flag")

    def common(sp):
        sp.add_argument("--map", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--tstep", type=_positive, default=1.0)
        sp.add_argument("--eps-terminal", type=_nonneg, default=None)
        sp.add_argument("--amax", type=_positive, default=None)
        sp.add_argument("--mass", type=_positive, default=None,
                        help="nominal mass used by the model [kg]")

    r = sub.add_parser("reference", help="compute leg references")
    common(r)
    r.add_argument("--condition", choices=["good", "bad"], default="good")
    r.add_argument("--legs", type=int, nargs="+", default=None,
                   help="station indices (default: all)")

    s = sub.add_parser("simulate", help="run a scenario in closed loop")
    common(s)
    s.add_argument("--scenario", required=True)
    s.add_argument("--horizon", type=_posint, default=20)
    s.add_argument("--rweight", type=_positive, default=0.01)
    s.add_argument("--qweight", type=_positive, default=1.0)
    s.add_argument("--condition", choices=["good", "bad"], default=None,
                   help="override the reference condition of the scenario")
    return p


def _params(args):
    return TrainParams().with_overrides(eps_terminal=args.eps_terminal, a_max=args.amax,
                                        m_nominal=args.mass)


def _load_map(path):
    try:
        return read_map(path), None
    except FileNotFoundError:
        return None, (EXIT_IO, f"cannot read map {path}: no such file")
    except OSError as exc:
        return None, (EXIT_IO, f"cannot read map {path}: {exc}")
    except MapError as exc:
        return None, (EXIT_VALIDATION, f"invalid map {path}: {exc}")


def cmd_validate(args):
    path = args.map_flag or args.map
    if path is None:
        print("trainmpc validate: a map path is required", file=sys.stderr)
        return EXIT_USAGE
    track, err = _load_map(path)
    if err:
        print(err[1], file=sys.stderr)
        return err[0]
    print(f"{path}: ok ({len(track.segments)} segments, {len(track.stations)} stations, "
          f"{track.total_length:g} m)")
    return EXIT_OK


def _solver_failure(exc):
    if isinstance(exc, InfeasibleLeg):
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(f"solver fault: {exc} (max defect {getattr(exc, 'defect', float('nan')):.3g})",
          file=sys.stderr)
    return EXIT_SOLVER


def cmd_reference(args):
    track, err = _load_map(args.map)
    if err:
        print(err[1], file=sys.stderr)
        return err[0]
    legs = range(len(track.stations)) if args.legs is None else args.legs
    for i in legs:
        if not 0 <= i < len(track.stations):
            print(f"leg index {i} out of range (0..{len(track.stations) - 1})", file=sys.stderr)
            return EXIT_USAGE
    try:
        params = _params(args)
    except ValueError as exc:
        print(f"invalid parameter: {exc}", file=sys.stderr)
        return EXIT_USAGE
    cond = TractionCondition.parse(args.condition)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_IO
    for i in legs:
        try:
            ref = compute_reference(leg_between(track, i), track, cond, params)
        except (InfeasibleLeg, NoConvergence) as exc:
            return _solver_failure(exc)
        try:
            (out / f"ref_leg{i}.csv").write_text(reference_to_csv(ref, args.tstep),
                                                 encoding="utf-8")
        except OSError as exc:
            print(f"cannot write reference: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"leg {i}: {ref.info['iterations']} SQP iterations, "
              f"max defect {ref.info['max_defect']:.2e}")
    return EXIT_OK


def cmd_simulate(args):
    track, err = _load_map(args.map)
    if err:
        print(err[1], file=sys.stderr)
        return err[0]
    try:
        scenario = read_scenario(args.scenario)
    except FileNotFoundError:
        print(f"unknown scenario file {args.scenario}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_IO
    except ScenarioError as exc:
        print(f"invalid scenario {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.condition:
        scenario = replace(scenario, reference=TractionCondition.parse(args.condition))
    try:
        params = _params(args)
        cfg = MpcConfig(horizon=args.horizon, t_step=args.tstep, r_weight=args.rweight,
                        q_weight=args.qweight, plant_dt=scenario.dt)
    except ValueError as exc:
        print(f"invalid parameter: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = run_scenario(scenario, track, params, cfg)
    except (InfeasibleLeg, NoConvergence) as exc:
        return _solver_failure(exc)
    except ControllerFault as exc:
        print(f"controller fault: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        write_results(result, args.out)
    except OSError as exc:
        print(f"cannot write results: {exc}", file=sys.stderr)
        return EXIT_IO
    m = result.metrics
    print(f"{scenario.name}: max|e_p| {m['max_abs_ep']:.3f} m, max|e_v| {m['max_abs_ev']:.3f} m/s, "
          f"max h {m['max_h']:.3g}, delays " + " ".join(f"{d:.1f}" for d in m["delays"]))
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    handler = {"validate": cmd_validate, "reference": cmd_reference,
               "simulate": cmd_simulate}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
