"""Least-squares calibration of model parameters against observed series.

The objective is the weighted sum of squared differences between observations
and the simulated series, sampled by linear interpolation on the result grid.
A run that fails (diverges, divides by zero) scores ``inf``.

The optimizer is a box-bounded Nelder-Mead: every proposed vertex is clamped
coordinate-wise into the bounds before evaluation. It only ever compares
objective values, so scaling all weights by a positive constant leaves its
path unchanged.
"""

from __future__ import annotations

import itertools
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .core import Model
from .engine import RunConfig, SimulationError, run, sample_result

MAX_GRID_POINTS = 1_000_000

# reflection, expansion, contraction, shrink
ALPHA, GAMMA, RHO, SIGMA = 1.0, 2.0, 0.5, 0.5


class InvalidProblem(ValueError):
    pass


class GridTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class ObservedSeries:
    output_name: str
    points: tuple[tuple[float, float], ...]
    weight: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", tuple((float(t), float(v)) for t, v in self.points))


@dataclass(frozen=True)
class FreeParameter:
    name: str
    lower: float
    upper: float
    initial: float


@dataclass(frozen=True)
class CalibrationProblem:
    model: Model
    free_parameters: tuple[FreeParameter, ...]
    observations: tuple[ObservedSeries, ...]
    run_config: RunConfig = RunConfig()

    def __post_init__(self) -> None:
        object.__setattr__(self, "free_parameters", tuple(self.free_parameters))
        object.__setattr__(self, "observations", tuple(self.observations))

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.free_parameters]

    @property
    def lower(self) -> list[float]:
        return [p.lower for p in self.free_parameters]

    @property
    def upper(self) -> list[float]:
        return [p.upper for p in self.free_parameters]

    @property
    def initial(self) -> list[float]:
        return [p.initial for p in self.free_parameters]

    def problems(self) -> list[str]:
        out = []
        names = set()
        for p in self.free_parameters:
            if p.name not in self.model.parameters:
                out.append(f"free parameter {p.name!r} is not a model parameter")
            if p.name in names:
                out.append(f"free parameter {p.name!r} listed twice")
            names.add(p.name)
            if not all(math.isfinite(v) for v in (p.lower, p.upper, p.initial)):
                out.append(f"{p.name}: bounds and initial guess must be finite")
            elif not p.lower < p.upper:
                out.append(f"{p.name}: lower bound {p.lower!r} must be below upper bound {p.upper!r}")
            elif not p.lower <= p.initial <= p.upper:
                out.append(f"{p.name}: initial guess {p.initial!r} outside [{p.lower!r}, {p.upper!r}]")
        known = set(self.model.series_names)
        ts = self.model.time_spec
        for obs in self.observations:
            if obs.output_name not in known:
                out.append(f"observed series {obs.output_name!r} is neither a stock nor an output")
            if not (math.isfinite(obs.weight) and obs.weight > 0):
                out.append(f"{obs.output_name}: weight must be positive")
            if not obs.points:
                out.append(f"{obs.output_name}: no observation points")
            ts_ = [t for t, _ in obs.points]
            if any(b <= a for a, b in zip(ts_, ts_[1:])):
                out.append(f"{obs.output_name}: observation times must be strictly increasing")
            outside = [t for t in ts_ if not ts.start <= t <= ts.end]
            if outside:
                out.append(f"{obs.output_name}: observation time {outside[0]!r} outside [{ts.start!r}, {ts.end!r}]")
            if any(not math.isfinite(v) for _, v in obs.points):
                out.append(f"{obs.output_name}: observed values must be finite")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise InvalidProblem("; ".join(problems))


@dataclass(frozen=True)
class CalibrationOptions:
    max_evaluations: int = 1000
    simplex_tolerance: float = 1e-10
    restarts: int = 1
    seed: int = 0


@dataclass
class CalibrationResult:
    best_parameters: dict[str, float]
    objective_value: float
    evaluations: int
    converged: bool
    trace: list[tuple[int, float]]
    # every evaluated (clamped) candidate with its objective, in order
    history: list[tuple[tuple[float, ...], float]] = field(default_factory=list, repr=False)


def objective(problem: CalibrationProblem, candidate: Sequence[float]) -> float:
    """Weighted SSE of the run at ``candidate``; ``inf`` if the run fails."""
    if len(candidate) != len(problem.free_parameters):
        raise ValueError(f"expected {len(problem.free_parameters)} values, got {len(candidate)}")
    for p, v in zip(problem.free_parameters, candidate):
        if not p.lower <= v <= p.upper:
            raise ValueError(f"{p.name}={v!r} outside [{p.lower!r}, {p.upper!r}]")
    overrides = dict(problem.run_config.parameter_overrides)
    overrides.update({p.name: float(v) for p, v in zip(problem.free_parameters, candidate)})
    config = RunConfig(problem.run_config.integrator, problem.run_config.step_override, overrides)
    try:
        result = run(problem.model, config)
    except SimulationError:
        return math.inf
    total = 0.0
    for obs in problem.observations:
        for t, observed in obs.points:
            r = sample_result(result, obs.output_name, t) - observed
            total += obs.weight * (r * r)
    return total if math.isfinite(total) else math.inf


class _Budget(Exception):
    pass


class _Evaluator:
    def __init__(self, f: Callable[[list[float]], float], max_evaluations: int):
        self.f = f
        self.max_evaluations = max_evaluations
        self.count = 0
        self.best_x: list[float] | None = None
        self.best_f = math.inf
        self.trace: list[tuple[int, float]] = []
        self.history: list[tuple[tuple[float, ...], float]] = []

    def __call__(self, x: list[float]) -> float:
        if self.count >= self.max_evaluations:
            raise _Budget()
        self.count += 1
        fx = self.f(x)
        self.history.append((tuple(x), fx))
        if self.best_x is None or fx < self.best_f:
            self.best_x, self.best_f = list(x), fx
            self.trace.append((self.count, fx))
        return fx


def _clamp(x: Sequence[float], lower: Sequence[float], upper: Sequence[float]) -> list[float]:
    return [min(max(v, lo), hi) for v, lo, hi in zip(x, lower, upper)]


def _spread(fs: list[float]) -> float:
    lo, hi = fs[0], fs[-1]
    if not math.isfinite(lo):
        return math.inf
    if hi == lo:
        return 0.0
    return hi - lo if math.isfinite(hi - lo) else math.inf


def nelder_mead(
    evaluate: Callable[[list[float]], float],
    simplex: list[list[float]],
    lower: Sequence[float],
    upper: Sequence[float],
    tolerance: float,
    values: list[float] | None = None,
) -> tuple[list[list[float]], list[float], bool]:
    """Minimize from the given simplex until the objective spread drops below
    ``tolerance``. Returns (vertices, values, converged) sorted best first.

    ``evaluate`` may raise to stop early (budget); the exception propagates.
    """
    n = len(lower)
    if values is None:
        values = [evaluate(v) for v in simplex]
    pts = [list(v) for v in simplex]
    fs = list(values)
    while True:
        order = sorted(range(n + 1), key=lambda i: fs[i])
        pts = [pts[i] for i in order]
        fs = [fs[i] for i in order]
        if _spread(fs) < tolerance:
            return pts, fs, True
        centroid = [sum(p[j] for p in pts[:n]) / n for j in range(n)]
        worst = pts[n]
        xr = _clamp([c + ALPHA * (c - w) for c, w in zip(centroid, worst)], lower, upper)
        fr = evaluate(xr)
        if fr < fs[0]:
            xe = _clamp([c + GAMMA * (r - c) for c, r in zip(centroid, xr)], lower, upper)
            fe = evaluate(xe)
            pts[n], fs[n] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < fs[n - 1]:
            pts[n], fs[n] = xr, fr
            continue
        if fr < fs[n]:
            xc = _clamp([c + RHO * (r - c) for c, r in zip(centroid, xr)], lower, upper)
            fc = evaluate(xc)
            if fc <= fr:
                pts[n], fs[n] = xc, fc
                continue
        else:
            xc = _clamp([c + RHO * (w - c) for c, w in zip(centroid, worst)], lower, upper)
            fc = evaluate(xc)
            if fc < fs[n]:
                pts[n], fs[n] = xc, fc
                continue
        best = pts[0]
        for i in range(1, n + 1):
            pts[i] = _clamp([b + SIGMA * (p - b) for b, p in zip(best, pts[i])], lower, upper)
            fs[i] = evaluate(pts[i])


def initial_simplex(x0: Sequence[float], lower: Sequence[float], upper: Sequence[float],
                    scale: Sequence[float] | None = None) -> list[list[float]]:
    """``x0`` plus one vertex per coordinate, displaced by 10% of the bound
    range (times ``scale``), stepping inward when the outward step would hit a bound."""
    simplex = [list(x0)]
    for j in range(len(x0)):
        d = 0.1 * (upper[j] - lower[j]) * (scale[j] if scale else 1.0)
        v = list(x0)
        v[j] = x0[j] + d if x0[j] + d <= upper[j] else x0[j] - d
        simplex.append(_clamp(v, lower, upper))
    return simplex


def calibrate(problem: CalibrationProblem, options: CalibrationOptions = CalibrationOptions()) -> CalibrationResult:
    """Fit the free parameters by bounded Nelder-Mead with seeded restarts.

    Each restart rebuilds the simplex around the best point found so far,
    with per-coordinate displacements jittered by ``random.Random(seed)``.
    ``converged`` reports whether the final phase met ``simplex_tolerance``
    within ``max_evaluations``.
    """
    problem.validate()
    if options.max_evaluations < 1:
        raise InvalidProblem("max_evaluations must be at least 1")
    lower, upper = problem.lower, problem.upper
    ev = _Evaluator(lambda x: objective(problem, x), options.max_evaluations)
    x0 = list(problem.initial)
    converged = False
    if not x0:
        ev(x0)
        converged = True
    else:
        rng = random.Random(options.seed)
        try:
            _, _, converged = nelder_mead(ev, initial_simplex(x0, lower, upper), lower, upper, options.simplex_tolerance)
            for _ in range(options.restarts):
                assert ev.best_x is not None
                scale = [rng.uniform(0.5, 1.5) * rng.choice((-1.0, 1.0)) for _ in x0]
                start = initial_simplex(ev.best_x, lower, upper, scale)
                _, _, converged = nelder_mead(ev, start, lower, upper, options.simplex_tolerance)
        except _Budget:
            converged = False
    assert ev.best_x is not None
    return CalibrationResult(
        best_parameters=dict(zip(problem.names, ev.best_x)),
        objective_value=ev.best_f,
        evaluations=ev.count,
        converged=converged,
        trace=ev.trace,
        history=ev.history,
    )


def grid_points(problem: CalibrationProblem, resolution: int | Sequence[int]) -> list[tuple[float, ...]]:
    k = len(problem.free_parameters)
    res = [resolution] * k if isinstance(resolution, int) else list(resolution)
    if len(res) != k:
        raise ValueError(f"need {k} resolutions, got {len(res)}")
    if any(r < 2 for r in res):
        raise ValueError("resolution must be at least 2 per parameter")
    if math.prod(res) > MAX_GRID_POINTS:
        raise GridTooLarge(f"grid of {math.prod(res)} points exceeds {MAX_GRID_POINTS}")
    axes = []
    for p, r in zip(problem.free_parameters, res):
        width = p.upper - p.lower
        axes.append([p.lower + i * width / (r - 1) for i in range(r - 1)] + [p.upper])
    return list(itertools.product(*axes))


def grid_scan(problem: CalibrationProblem, resolution: int | Sequence[int],
              max_workers: int | None = None) -> list[tuple[tuple[float, ...], float]]:
    """Objective over the full Cartesian grid spanning the bounds, best first.

    Ties keep grid order, so the result does not depend on ``max_workers``.
    """
    problem.validate()
    points = grid_points(problem, resolution)
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            values = list(pool.map(lambda x: objective(problem, x), points))
    else:
        values = [objective(problem, x) for x in points]
    return sorted(zip(points, values), key=lambda pv: pv[1])


def problem_from_guess(problem: CalibrationProblem, guess: Sequence[float]) -> CalibrationProblem:
    """Same problem with new initial guesses, e.g. the head of a grid scan."""
    free = tuple(FreeParameter(p.name, p.lower, p.upper, float(g)) for p, g in zip(problem.free_parameters, guess))
    return CalibrationProblem(problem.model, free, problem.observations, problem.run_config)

