"""Loading models from disk, experiment and calibration specs, batch runs and
goodness-of-fit reports.

Experiment files (``.sdx``) and calibration files (``.sdc``) share the model
language's line syntax. Relative paths inside any of them resolve against the
directory of the file that mentions them.

Experiment file::

    experiment <ident>
    scenario <ident> model "<model.sdl>" [integrator euler|rk4] [step <real>] [set <ident> = <real>, ...]
    observe <ident> from "<obs.csv>"
    report <ident>, ...

Calibration file::

    free <ident> in <real> .. <real> guess <real>
    observe <ident> from "<obs.csv>" [weight <real>]
    set <ident> = <real>
    integrator euler|rk4
    step <real>
    option max_evaluations|simplex_tolerance|restarts|seed = <real>
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .calibrate import CalibrationOptions, CalibrationProblem, FreeParameter, ObservedSeries
from .core import RESERVED, LookupTable, Model, SimulationResult
from .engine import IntegratorKind, RunConfig, SimulationError, run, sample_result
from .sdl import parse_model
from .series_io import SeriesFormatError, read_series_csv
from .syntax import Cursor, ErrorCode, ParseError, SourceSpan, SpecSyntaxError, StatementError, format_real, iter_statements


class InputError(Exception):
    """Bad user input: unreadable files, malformed data, inconsistent specs."""


class InvalidExperiment(InputError):
    pass


# ---------------------------------------------------------------------------
# Models on disk
# ---------------------------------------------------------------------------


def load_model(path: str | Path) -> Model:
    """Parse a ``.sdl`` file and load its file-backed lookups.

    Raises SpecSyntaxError for parse errors and InputError for I/O or CSV problems.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: cannot read model: {exc}") from None
    parsed = parse_model(text)
    if isinstance(parsed, list):
        raise SpecSyntaxError(parsed, str(path))
    loaded = {}
    for name, table in parsed.lookups.items():
        if table.source is None:
            continue
        csv_path = path.parent / table.source
        try:
            points = read_series_csv(csv_path)
        except (OSError, UnicodeDecodeError) as exc:
            raise InputError(f"{path}: lookup {name}: cannot read {csv_path}: {exc}") from None
        except SeriesFormatError as exc:
            raise InputError(f"{path}: lookup {name}: {exc}") from None
        loaded[name] = LookupTable(tuple(points), source=table.source)
    return parsed.with_lookups(loaded) if loaded else parsed


def read_observations(path: str | Path) -> list[tuple[float, float]]:
    try:
        return read_series_csv(path)
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read observations {path}: {exc}") from None
    except SeriesFormatError as exc:
        raise InputError(str(exc)) from None


# ---------------------------------------------------------------------------
# Result CSV
# ---------------------------------------------------------------------------


def result_csv_text(result: SimulationResult, names: Sequence[str] | None = None) -> str:
    names = list(result.series) if names is None else list(names)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", *names])
    for i, t in enumerate(result.times):
        writer.writerow([repr(t), *(repr(result.series[n][i]) for n in names)])
    return buf.getvalue()


def write_result_csv(path: str | Path, result: SimulationResult, names: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.write_text(result_csv_text(result, names), encoding="utf-8")
    return path


def read_result_csv(path: str | Path) -> tuple[list[float], dict[str, list[float]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    times = [float(r[0]) for r in rows[1:]]
    series = {name: [float(r[j]) for r in rows[1:]] for j, name in enumerate(header[1:], start=1)}
    return times, series


# ---------------------------------------------------------------------------
# Validation report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationRow:
    scenario: str
    series: str
    rmse: float
    mae: float
    max_error: float
    n_points: int
    extrapolation_flag: bool


def fit_metrics(result: SimulationResult, series: str, points: Sequence[tuple[float, float]]) -> tuple[float, float, float, int]:
    """(RMSE, MAE, max |error|, n) of the simulated series against ``points``."""
    if not points:
        raise ValueError("no observation points")
    residuals = [sample_result(result, series, t) - v for t, v in points]
    n = len(residuals)
    rmse = math.sqrt(math.fsum(r * r for r in residuals) / n)
    mae = math.fsum(abs(r) for r in residuals) / n
    return rmse, mae, max(abs(r) for r in residuals), n


def validation_report(result: SimulationResult, observations: Mapping[str, Sequence[tuple[float, float]]],
                      scenario: str = "default") -> list[ValidationRow]:
    flag = bool(result.extrapolated_lookups)
    rows = []
    for name, points in observations.items():
        rmse, mae, mx, n = fit_metrics(result, name, points)
        rows.append(ValidationRow(scenario, name, rmse, mae, mx, n, flag))
    return rows


def validation_csv_text(rows: Sequence[ValidationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scenario", "series", "rmse", "mae", "max_error", "n_points", "extrapolation_flag"])
    for r in rows:
        writer.writerow([r.scenario, r.series, repr(r.rmse), repr(r.mae), repr(r.max_error), r.n_points,
                         str(r.extrapolation_flag).lower()])
    return buf.getvalue()


def check_observation_range(model: Model, name: str, points: Sequence[tuple[float, float]]) -> None:
    if name not in model.series_names:
        raise InputError(f"unknown series {name!r}; model records {', '.join(model.series_names)}")
    ts = model.time_spec
    for t, _ in points:
        if not ts.start <= t <= ts.end:
            raise InputError(f"observation time {t!r} for {name} outside [{ts.start!r}, {ts.end!r}]")


# ---------------------------------------------------------------------------
# Spec parsing helpers
# ---------------------------------------------------------------------------


def _integrator(cur: Cursor) -> IntegratorKind:
    tok = cur.expect_ident("integrator (euler or rk4)")
    try:
        return IntegratorKind(tok.text)
    except ValueError:
        raise cur.fail("integrator must be 'euler' or 'rk4'", tok) from None


def _step(cur: Cursor) -> float:
    value, span = cur.expect_real("step size")
    if not value > 0:
        raise StatementError(ParseError(span, ErrorCode.BAD_TIME_SPEC, f"step must be positive, got {format_real(value)}"))
    return value


def _assignments(cur: Cursor) -> dict[str, float]:
    out: dict[str, float] = {}
    while True:
        name = cur.expect_ident("parameter name", RESERVED)
        cur.expect_op("=")
        value, _ = cur.expect_real("parameter value")
        if name.text in out:
            raise StatementError(ParseError(name.span, ErrorCode.DUPLICATE_IDENTIFIER, f"{name.text!r} set twice"))
        out[name.text] = value
        if not cur.accept_op(","):
            return out


def _identifier_list(cur: Cursor, what: str) -> list[str]:
    names = [cur.expect_ident(what).text]
    while cur.accept_op(","):
        names.append(cur.expect_ident(what).text)
    return names


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    model_path: str
    parameter_overrides: Mapping[str, float] = field(default_factory=dict)
    run_config: RunConfig = RunConfig()


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    scenarios: tuple[Scenario, ...]
    observations: tuple[tuple[str, str], ...] = ()
    report_outputs: tuple[str, ...] = ()


def parse_experiment(text: str) -> ExperimentSpec | list[ParseError]:
    errors: list[ParseError] = []
    name = "experiment"
    scenarios: list[Scenario] = []
    seen: dict[str, SourceSpan] = {}
    observations: list[tuple[str, str]] = []
    report: list[str] = []
    for _, item in iter_statements(text):
        if isinstance(item, ParseError):
            errors.append(item)
            continue
        cur = Cursor(item)
        head = cur.tok
        try:
            if cur.accept_word("experiment"):
                name = cur.expect_ident("experiment name", RESERVED).text
                cur.expect_end()
            elif cur.accept_word("scenario"):
                ident = cur.expect_ident("scenario name", RESERVED)
                cur.expect_word("model")
                path = cur.expect_string("model path").value
                integrator, step, overrides = IntegratorKind.RK4, None, {}
                while cur.tok.kind != "EOL":
                    if cur.accept_word("integrator"):
                        integrator = _integrator(cur)
                    elif cur.accept_word("step"):
                        step = _step(cur)
                    elif cur.accept_word("set"):
                        overrides = _assignments(cur)
                    else:
                        raise cur.fail("expected 'integrator', 'step' or 'set'")
                if ident.text in seen:
                    raise StatementError(ParseError(ident.span, ErrorCode.DUPLICATE_IDENTIFIER,
                                                    f"scenario {ident.text!r} already defined"))
                seen[ident.text] = ident.span
                scenarios.append(Scenario(ident.text, str(path), overrides, RunConfig(integrator, step, overrides)))
            elif cur.accept_word("observe"):
                series = cur.expect_ident("series name", RESERVED).text
                cur.expect_word("from")
                path = cur.expect_string("CSV path").value
                cur.expect_end()
                observations.append((series, str(path)))
            elif cur.accept_word("report"):
                report.extend(_identifier_list(cur, "series name"))
                cur.expect_end()
            else:
                raise cur.fail("expected 'experiment', 'scenario', 'observe' or 'report'", head)
        except StatementError as exc:
            errors.append(exc.error)
    if errors:
        return errors
    return ExperimentSpec(name, tuple(scenarios), tuple(observations), tuple(report))


def load_experiment(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: cannot read experiment: {exc}") from None
    spec = parse_experiment(text)
    if isinstance(spec, list):
        raise SpecSyntaxError(spec, str(path))
    return spec


@dataclass
class ScenarioOutcome:
    scenario: Scenario
    model: Model
    result: SimulationResult | None = None
    error: str | None = None
    csv_path: Path | None = None

    @property
    def ok(self) -> bool:
        return self.result is not None


def run_scenario(scenario: Scenario, model: Model, out_dir: Path) -> ScenarioOutcome:
    outcome = ScenarioOutcome(scenario, model)
    try:
        outcome.result = run(model, scenario.run_config)
    except SimulationError as exc:
        outcome.error = str(exc)
        return outcome
    outcome.csv_path = write_result_csv(out_dir / f"{model.name}_{scenario.name}.csv", outcome.result, model.series_names)
    return outcome


def prepare_experiment(spec: ExperimentSpec, base_dir: Path) -> tuple[list[Model], dict[str, list[tuple[float, float]]]]:
    """Load every scenario model and observation file, checking consistency.

    Raises InvalidExperiment, InputError or SpecSyntaxError.
    """
    if not spec.scenarios:
        raise InvalidExperiment("experiment defines no scenarios")
    models = []
    for sc in spec.scenarios:
        model = load_model(base_dir / sc.model_path)
        unknown = [k for k in sc.parameter_overrides if k not in model.parameters]
        if unknown:
            raise InvalidExperiment(f"scenario {sc.name}: unknown parameter(s) {', '.join(unknown)}")
        missing = [r for r in spec.report_outputs if r not in model.series_names]
        if missing:
            raise InvalidExperiment(f"scenario {sc.name}: model {model.name} has no series {', '.join(missing)}")
        ts = model.time_spec
        step = sc.run_config.step_override
        if step is not None and step > ts.end - ts.start:
            raise InvalidExperiment(f"scenario {sc.name}: step {step!r} exceeds the simulated interval")
        models.append(model)
    observations = {}
    for series, rel in spec.observations:
        points = read_observations(base_dir / rel)
        for model in models:
            check_observation_range(model, series, points)
        observations[series] = points
    return models, observations


def comparison_csv_text(spec: ExperimentSpec, outcomes: Sequence[ScenarioOutcome],
                        observations: Mapping[str, Sequence[tuple[float, float]]]) -> str:
    obs_times = sorted({t for points in observations.values() for t, _ in points})
    header = ["scenario", "status", "error"]
    for r in spec.report_outputs:
        header.append(f"{r}_final")
        header += [f"{r}@{t!r}" for t in obs_times]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for oc in outcomes:
        if not oc.ok:
            writer.writerow([oc.scenario.name, "failed", oc.error] + [""] * (len(header) - 3))
            continue
        assert oc.result is not None
        row = [oc.scenario.name, "ok", ""]
        for r in spec.report_outputs:
            row.append(repr(oc.result.series[r][-1]))
            row += [repr(sample_result(oc.result, r, t)) for t in obs_times]
        writer.writerow(row)
    return buf.getvalue()


def run_batch(spec: ExperimentSpec, base_dir: str | Path, out_dir: str | Path, jobs: int = 1) -> list[ScenarioOutcome]:
    """Run every scenario, write one CSV each plus ``comparison.csv``.

    With ``jobs > 1`` scenarios run on a thread pool; output files are the
    same bytes either way.
    """
    base_dir, out_dir = Path(base_dir), Path(out_dir)
    models, observations = prepare_experiment(spec, base_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = list(zip(spec.scenarios, models))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(lambda p: run_scenario(p[0], p[1], out_dir), pairs))
    else:
        outcomes = [run_scenario(sc, m, out_dir) for sc, m in pairs]
    (out_dir / "comparison.csv").write_text(comparison_csv_text(spec, outcomes, observations), encoding="utf-8")
    return outcomes


# ---------------------------------------------------------------------------
# Calibration specs
# ---------------------------------------------------------------------------

_INT_OPTIONS = ("max_evaluations", "restarts", "seed")


@dataclass(frozen=True)
class CalibrationSpec:
    free_parameters: tuple[FreeParameter, ...]
    observations: tuple[tuple[str, str, float], ...]  # (series, csv path, weight)
    overrides: Mapping[str, float] = field(default_factory=dict)
    integrator: IntegratorKind = IntegratorKind.RK4
    step: float | None = None
    options: CalibrationOptions = CalibrationOptions()


def parse_calibration_spec(text: str) -> CalibrationSpec | list[ParseError]:
    errors: list[ParseError] = []
    free: list[FreeParameter] = []
    free_spans: dict[str, SourceSpan] = {}
    observations: list[tuple[str, str, float]] = []
    overrides: dict[str, float] = {}
    integrator, step = IntegratorKind.RK4, None
    options: dict[str, float] = {}
    for _, item in iter_statements(text):
        if isinstance(item, ParseError):
            errors.append(item)
            continue
        cur = Cursor(item)
        head = cur.tok
        try:
            if cur.accept_word("free"):
                ident = cur.expect_ident("parameter name", RESERVED)
                cur.expect_word("in")
                lo, _ = cur.expect_real("lower bound")
                cur.expect_op("..")
                hi, _ = cur.expect_real("upper bound")
                cur.expect_word("guess")
                guess, gspan = cur.expect_real("initial guess")
                cur.expect_end()
                if ident.text in free_spans:
                    raise StatementError(ParseError(ident.span, ErrorCode.DUPLICATE_IDENTIFIER,
                                                    f"{ident.text!r} already free"))
                if not lo < hi:
                    raise StatementError(ParseError(ident.span, ErrorCode.SYNTAX, "lower bound must be below upper bound"))
                if not lo <= guess <= hi:
                    raise StatementError(ParseError(gspan, ErrorCode.SYNTAX, "initial guess outside bounds"))
                free_spans[ident.text] = ident.span
                free.append(FreeParameter(ident.text, lo, hi, guess))
            elif cur.accept_word("observe"):
                series = cur.expect_ident("series name", RESERVED).text
                cur.expect_word("from")
                path = cur.expect_string("CSV path").value
                weight = 1.0
                if cur.accept_word("weight"):
                    weight, wspan = cur.expect_real("weight")
                    if not weight > 0:
                        raise StatementError(ParseError(wspan, ErrorCode.BAD_NUMBER, "weight must be positive"))
                cur.expect_end()
                observations.append((series, str(path), weight))
            elif cur.accept_word("set"):
                overrides.update(_assignments(cur))
                cur.expect_end()
            elif cur.accept_word("integrator"):
                integrator = _integrator(cur)
                cur.expect_end()
            elif cur.accept_word("step"):
                step = _step(cur)
                cur.expect_end()
            elif cur.accept_word("option"):
                key = cur.expect_ident("option name")
                if key.text not in ("max_evaluations", "simplex_tolerance", "restarts", "seed"):
                    raise cur.fail("unknown option", key)
                cur.expect_op("=")
                value, vspan = cur.expect_real("option value")
                cur.expect_end()
                if key.text in _INT_OPTIONS and (value != int(value) or value < 0):
                    raise StatementError(ParseError(vspan, ErrorCode.BAD_NUMBER, f"{key.text} must be a non-negative integer"))
                if key.text == "simplex_tolerance" and value < 0:
                    raise StatementError(ParseError(vspan, ErrorCode.BAD_NUMBER, "simplex_tolerance must be non-negative"))
                options[key.text] = value
            else:
                raise cur.fail("expected 'free', 'observe', 'set', 'integrator', 'step' or 'option'", head)
        except StatementError as exc:
            errors.append(exc.error)
    if not observations and not errors:
        errors.append(ParseError(SourceSpan(1, 1, 1), ErrorCode.SYNTAX, "calibration needs at least one 'observe' line"))
    if errors:
        return errors
    opts = CalibrationOptions(
        max_evaluations=int(options.get("max_evaluations", CalibrationOptions.max_evaluations)),
        simplex_tolerance=float(options.get("simplex_tolerance", CalibrationOptions.simplex_tolerance)),
        restarts=int(options.get("restarts", CalibrationOptions.restarts)),
        seed=int(options.get("seed", CalibrationOptions.seed)),
    )
    return CalibrationSpec(tuple(free), tuple(observations), overrides, integrator, step, opts)


def load_calibration_spec(path: str | Path) -> CalibrationSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: cannot read calibration spec: {exc}") from None
    spec = parse_calibration_spec(text)
    if isinstance(spec, list):
        raise SpecSyntaxError(spec, str(path))
    return spec


def build_problem(model: Model, spec: CalibrationSpec, base_dir: str | Path) -> CalibrationProblem:
    """Resolve observation files and check the spec against ``model``."""
    base_dir = Path(base_dir)
    unknown = [p.name for p in spec.free_parameters if p.name not in model.parameters]
    unknown += [k for k in spec.overrides if k not in model.parameters]
    if unknown:
        raise InputError(f"unknown parameter(s): {', '.join(unknown)}")
    observed = []
    for series, rel, weight in spec.observations:
        points = read_observations(base_dir / rel)
        check_observation_range(model, series, points)
        observed.append(ObservedSeries(series, tuple(points), weight))
    ts = model.time_spec
    if spec.step is not None and spec.step > ts.end - ts.start:
        raise InputError(f"step {spec.step!r} exceeds the simulated interval")
    config = RunConfig(spec.integrator, spec.step, dict(spec.overrides))
    return CalibrationProblem(model, spec.free_parameters, tuple(observed), config)


def params_fragment(best: Mapping[str, float]) -> str:
    return "".join(f"param {k} = {format_real(v)}\n" for k, v in best.items())

