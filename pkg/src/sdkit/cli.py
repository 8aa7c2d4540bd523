"""``sdkit`` command line.

Exit codes: 0 success, 1 input or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Sequence

from .calibrate import InvalidProblem, calibrate
from .core import check_result, validate_model
from .engine import IntegratorKind, ModelError, RunConfig, SimulationError, run
from .experiment import (
    InputError,
    build_problem,
    check_observation_range,
    load_calibration_spec,
    load_experiment,
    load_model,
    params_fragment,
    read_observations,
    run_batch,
    validation_csv_text,
    validation_report,
    write_result_csv,
)
from .svg import emit_svg
from .syntax import SpecSyntaxError

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _overrides(pairs: Sequence[str]) -> dict[str, float]:
    out = {}
    for pair in pairs:
        name, sep, value = pair.partition("=")
        if not sep or not name.strip():
            raise InputError(f"--set expects name=value, got {pair!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise InputError(f"--set {name.strip()}: {value!r} is not a number") from None
    return out


def _run_config(args: argparse.Namespace, model) -> RunConfig:
    overrides = _overrides(args.set or [])
    unknown = [k for k in overrides if k not in model.parameters]
    if unknown:
        raise InputError(f"unknown parameter(s): {', '.join(unknown)}")
    return RunConfig(IntegratorKind(args.integrator), args.step, overrides)


def _load_checked(path: str):
    model = load_model(path)
    diags = validate_model(model)
    if diags:
        raise ModelError("\n".join(str(d) for d in diags), diags)
    return model


def cmd_check(args: argparse.Namespace) -> int:
    model = _load_checked(args.model)
    print(f"{args.model}: model {model.name} ok ({len(model.stocks)} stocks, {len(model.flows)} flows, "
          f"{len(model.parameters)} parameters, {len(model.lookups)} lookups, {len(model.outputs)} outputs)")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    model = _load_checked(args.model)
    config = _run_config(args, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    result = run(model, config)
    elapsed = time.perf_counter() - started
    csv_path = write_result_csv(out / f"{model.name}_{args.scenario}.csv", result, model.series_names)
    for name in args.report or model.series_names:
        if name not in result.series:
            raise InputError(f"unknown series {name!r}")
        emit_svg({name: (result.times, result.series[name])}, f"{model.name} ({args.scenario}): {name}",
                 out / f"{model.name}_{args.scenario}_{name}.svg")
    for diag in check_result(model, result):
        _err(str(diag))
    if result.extrapolated_lookups:
        _err(f"note: lookups held at their end values outside the data range: {', '.join(result.extrapolated_lookups)}")
    print(f"grid points: {len(result.times)}  wall time: {elapsed:.3f}s  -> {csv_path}")
    return EXIT_OK


def cmd_batch(args: argparse.Namespace) -> int:
    path = Path(args.experiment)
    spec = load_experiment(path)
    outcomes = run_batch(spec, path.parent, args.out, jobs=args.jobs)
    for oc in outcomes:
        status = "ok" if oc.ok else f"failed: {oc.error}"
        print(f"{oc.scenario.name}: {status}")
    print(f"wrote {Path(args.out) / 'comparison.csv'}")
    return EXIT_OK if any(oc.ok for oc in outcomes) else EXIT_RUNTIME


def _parse_obs(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise InputError(f"--obs expects name=file.csv, got {item!r}")
        out[name] = path
    return out


def cmd_validate(args: argparse.Namespace) -> int:
    model = _load_checked(args.model)
    config = _run_config(args, model)
    observations = {}
    for name, path in _parse_obs(args.obs).items():
        points = read_observations(path)
        check_observation_range(model, name, points)
        observations[name] = points
    result = run(model, config)
    rows = validation_report(result, observations, args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"{model.name}_validation.csv"
    report_path.write_text(validation_csv_text(rows), encoding="utf-8")
    print(f"{'series':<20} {'n':>5} {'rmse':>12} {'mae':>12} {'max':>12}  extrapolated")
    for r in rows:
        print(f"{r.series:<20} {r.n_points:>5} {r.rmse:>12.6g} {r.mae:>12.6g} {r.max_error:>12.6g}  "
              f"{'yes' if r.extrapolation_flag else 'no'}")
    if result.extrapolated_lookups:
        print(f"lookups held outside their data range: {', '.join(result.extrapolated_lookups)}")
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    model = _load_checked(args.model)
    spec_path = Path(args.spec)
    spec = load_calibration_spec(spec_path)
    problem = build_problem(model, spec, spec_path.parent)
    started = time.perf_counter()
    result = calibrate(problem, spec.options)
    elapsed = time.perf_counter() - started
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{model.name}_best_params.sdl").write_text(params_fragment(result.best_parameters), encoding="utf-8")
    trace = "evaluation,objective\n" + "".join(f"{i},{v!r}\n" for i, v in result.trace)
    (out / f"{model.name}_trace.csv").write_text(trace, encoding="utf-8")
    overrides = {**problem.run_config.parameter_overrides, **result.best_parameters}
    fitted = run(model, RunConfig(problem.run_config.integrator, problem.run_config.step_override, overrides))
    write_result_csv(out / f"{model.name}_fitted.csv", fitted, model.series_names)
    series = {f"{o.output_name} (fitted)": (fitted.times, fitted.series[o.output_name]) for o in problem.observations}
    observed = {o.output_name: ([t for t, _ in o.points], [v for _, v in o.points]) for o in problem.observations}
    emit_svg(series, f"{model.name}: fitted vs observed", out / f"{model.name}_fit.svg", observed)
    for name, value in result.best_parameters.items():
        print(f"{name} = {value!r}")
    print(f"objective: {result.objective_value!r}  evaluations: {result.evaluations}  "
          f"converged: {str(result.converged).lower()}  wall time: {elapsed:.3f}s")
    if not result.converged:
        _err("warning: calibration did not converge; reporting best point found")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdkit", description="Stock-and-flow simulation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="parse and validate a model")
    p.add_argument("model")
    p.set_defaults(func=cmd_check)

    def run_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--set", action="append", metavar="NAME=VALUE", help="override a parameter")
        p.add_argument("--integrator", choices=[k.value for k in IntegratorKind], default=IntegratorKind.RK4.value)
        p.add_argument("--step", type=float, default=None, help="override the model's time step")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--scenario", default="default", help="scenario label used in file names")

    p = sub.add_parser("run", help="simulate a model and write CSV + SVG")
    p.add_argument("model")
    run_options(p)
    p.add_argument("--report", action="append", help="series to chart (default: all)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("batch", help="run every scenario of an experiment file")
    p.add_argument("experiment")
    p.add_argument("--out", default="out")
    p.add_argument("--jobs", type=int, default=1, help="scenarios to run concurrently")
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("validate", help="compare a run against observed series")
    p.add_argument("model")
    p.add_argument("--obs", action="append", required=True, metavar="NAME=CSV")
    run_options(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("calibrate", help="fit parameters to observed series")
    p.add_argument("model")
    p.add_argument("spec")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except SpecSyntaxError as exc:
        for e in exc.errors:
            _err(e.format(exc.filename))
        return EXIT_INPUT
    except (ModelError, InputError, InvalidProblem) as exc:
        _err(f"error: {exc}")
        return EXIT_INPUT
    except SimulationError as exc:
        _err(f"runtime failure at t={exc.time!r}: {exc}")
        return EXIT_RUNTIME
    except OSError as exc:
        _err(f"error: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
