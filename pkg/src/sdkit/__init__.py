"""Stock-and-flow system dynamics: model language, fixed-step integration,
least-squares calibration and batch experiments."""

from .calibrate import (
    CalibrationOptions,
    CalibrationProblem,
    CalibrationResult,
    FreeParameter,
    GridTooLarge,
    InvalidProblem,
    ObservedSeries,
    calibrate,
    grid_scan,
    objective,
)
from .core import (
    BinOp,
    Call,
    Diagnostic,
    DivisionByZero,
    Flow,
    LookupTable,
    Model,
    Neg,
    NonFiniteResult,
    Num,
    Ref,
    SimulationResult,
    Stock,
    TimeSpec,
    UnboundIdentifier,
    eval_expression,
    interpolate_lookup,
    net_derivatives,
    validate_model,
)
from .engine import (
    EvaluationError,
    IntegratorKind,
    ModelError,
    NonFiniteState,
    OutOfRange,
    RunConfig,
    SimulationError,
    UnknownSeries,
    euler_step,
    rk4_step,
    run,
    sample_result,
)
from .sdl import parse_model, serialize_model
from .syntax import ErrorCode, ParseError, SourceSpan

__version__ = "0.1.0"
