from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdkit.core import (
    BinOp, Call, Flow, LookupTable, Model, Num, Ref, SimulationResult, Stock, TimeSpec, net_derivatives,
)
from sdkit.engine import (
    CompiledModel,
    EvaluationError,
    IntegratorKind,
    ModelError,
    NonFiniteState,
    OutOfRange,
    RunConfig,
    UnknownSeries,
    euler_step,
    rk4_step,
    run,
    sample_result,
    time_grid,
)
from support import decay_model, diverging_model, transfer_model

EULER = RunConfig(IntegratorKind.EULER)
RK4 = RunConfig(IntegratorKind.RK4)


def constant_field_model(c: float = 2.5) -> Model:
    return Model("const", TimeSpec(0.0, 1.0, 0.25), {}, (Stock("x", 3.0),), (Flow("in", None, "x", Num(c)),))


# single steps ---------------------------------------------------------------------

def test_euler_single_step_tenth_decay():
    result = run(decay_model(k=0.1, end=1.0, step=1.0), EULER)
    assert result.series["x"][-1] == pytest.approx(0.9, abs=1e-15)


def test_euler_matches_closed_form_product():
    # Each Euler step on dx/dt = -x multiplies by (1 - h).
    result = run(decay_model(k=1.0, end=1.0, step=0.05), EULER)
    assert result.series["x"][-1] == pytest.approx(0.95 ** 20, rel=1e-14)


def test_euler_step_hand_arithmetic():
    assert euler_step({"x": 100.0}, 0.0, 0.5, decay_model(k=0.05)) == {"x": 97.5}


def test_rk4_single_step_tableau():
    # k1=-1, k2=-0.95, k3=-0.9525, k4=-0.90475 -> 1 + 0.1/6 * (-5.70975)
    expected = 1.0 + 0.1 / 6.0 * (-1.0 - 2 * 0.95 - 2 * 0.9525 - 0.90475)
    assert expected == pytest.approx(0.90483750, abs=1e-8)
    result = run(decay_model(k=1.0, end=0.1, step=0.1), RK4)
    assert result.series["x"][-1] == pytest.approx(0.90483750, abs=1e-8)
    assert rk4_step({"x": 1.0}, 0.0, 0.1, decay_model())["x"] == pytest.approx(expected, abs=1e-15)
    assert abs(result.series["x"][-1] - math.exp(-0.1)) < 1e-7


@pytest.mark.parametrize("step", [euler_step, rk4_step])
def test_zero_field_leaves_state_unchanged(step):
    model = Model("z", TimeSpec(0.0, 1.0, 0.1), {}, (Stock("x", 7.0),), ())
    assert step({"x": 7.0}, 0.3, 0.1, model) == {"x": 7.0}


@pytest.mark.parametrize("step", [euler_step, rk4_step])
def test_constant_field_is_exact(step):
    assert step({"x": 3.0}, 0.0, 0.25, constant_field_model(2.0)) == {"x": 3.5}


def test_rk4_samples_lookups_at_stage_times():
    # dx/dt = L(t) = t integrates to t^2/2; RK4 is exact for it, Euler sees only t=0.
    model = Model("ramp", TimeSpec(0.0, 1.0, 1.0), {}, (Stock("x", 0.0),),
                  (Flow("in", None, "x", Call("L", (Ref("time"),))),),
                  lookups={"L": LookupTable(((0.0, 0.0), (10.0, 10.0)))})
    assert run(model, RK4).series["x"][-1] == 0.5
    assert run(model, EULER).series["x"][-1] == 0.0


# whole runs ------------------------------------------------------------------------

def test_no_flows_keeps_stock_constant():
    model = Model("still", TimeSpec(0.0, 10.0, 1.0), {}, (Stock("S", 7.0),), ())
    result = run(model)
    assert len(result.times) == 11
    assert set(result.series["S"]) == {7.0}


def test_outputs_recorded_from_post_step_state():
    model = Model("o", TimeSpec(0.0, 1.0, 0.5), {}, (Stock("x", 1.0),), (Flow("in", None, "x", Num(2.0)),),
                  outputs={"twice": BinOp("*", Num(2.0), Ref("x")), "clock": Ref("time")})
    result = run(model, EULER)
    assert result.times == (0.0, 0.5, 1.0)
    assert result.series["x"] == (1.0, 2.0, 3.0)
    assert result.series["twice"] == (2.0, 4.0, 6.0)
    assert result.series["clock"] == (0.0, 0.5, 1.0)
    assert list(result.series) == ["x", "twice", "clock"]


def test_final_interval_is_truncated_to_land_on_end():
    model = constant_field_model(1.0).with_time_spec(TimeSpec(0.0, 1.0, 0.3))
    result = run(model, EULER)
    assert result.times[-1] == 1.0
    assert len(result.times) == 5
    assert result.series["x"][-1] == pytest.approx(4.0, abs=1e-12)


def test_parameter_and_step_overrides():
    base = decay_model(k=1.0)
    result = run(base, RunConfig(IntegratorKind.EULER, 0.5, {"k": 0.5}))
    assert result.times == (0.0, 0.5, 1.0)
    assert result.series["x"][-1] == 0.75 * 0.75


@pytest.mark.parametrize(
    "config",
    [RunConfig(parameter_overrides={"nope": 1.0}), RunConfig(step_override=2.0),
     RunConfig(step_override=0.0), RunConfig(parameter_overrides={"k": math.nan})],
)
def test_bad_run_configs_raise_model_error(config):
    with pytest.raises(ModelError):
        run(decay_model(), config)


def test_invalid_model_raises_model_error_with_diagnostics():
    model = Model(
        "bad", TimeSpec(0.0, 1.0, 0.1), {}, (Stock("x", 1.0),), (Flow("f", "x", "y", Num(1.0)),))
    with pytest.raises(ModelError) as info:
        run(model)
    assert [d.code for d in info.value.diagnostics] == ["UNRESOLVED_REFERENCE"]


def test_unloaded_lookup_is_rejected():
    model = Model("u", TimeSpec(0.0, 1.0, 0.1), {}, (Stock("x", 0.0),),
                  (Flow("f", None, "x", Call("L", (Ref("time"),))),), lookups={"L": LookupTable((), "l.csv")})
    with pytest.raises(ModelError, match="not loaded"):
        run(model)


def test_divergence_raises_non_finite_state_with_time():
    with pytest.raises(NonFiniteState) as info:
        run(diverging_model())
    assert 0.0 < info.value.time < 1.0
    assert info.value.element in ("grow", "x")


def test_evaluation_error_names_the_element_and_time():
    model = Model("d", TimeSpec(0.0, 2.0, 0.5), {}, (Stock("x", 1.0),),
                  (Flow("f", None, "x", BinOp("/", Num(1.0), BinOp("-", Ref("time"), Num(1.0)))),))
    with pytest.raises(EvaluationError) as info:
        run(model, EULER)
    assert info.value.element == "f"
    assert info.value.time == 1.0


def test_extrapolated_lookups_are_reported():
    table = LookupTable(((0.0, 1.0), (5.0, 1.0)))
    inside = Model("l", TimeSpec(0.0, 5.0, 0.5), {}, (Stock("x", 0.0),),
                   (Flow("f", None, "x", Call("L", (Ref("time"),))),), lookups={"L": table})
    assert run(inside).extrapolated_lookups == ()
    assert run(inside.with_time_spec(TimeSpec(0.0, 6.0, 0.5))).extrapolated_lookups == ("L",)


# grid, convergence, conservation -------------------------------------------------

@given(st.floats(-100, 100), st.floats(0.01, 100), st.floats(1e-3, 1.0))
def test_grid_integrity(start, length, fraction):
    end = start + length
    h = (end - start) * fraction
    times = time_grid(start, end, h)
    n = len(times) - 1
    ratio = (end - start) / h
    assert n == math.ceil(ratio) or (n == round(ratio) and abs(ratio - n) <= 1e-9 * ratio)
    assert times[0] == start and times[-1] == end
    assert all(b > a for a, b in zip(times, times[1:]))
    for a, b in zip(times[:-2], times[1:-1]):
        assert b - a == pytest.approx(h, rel=1e-9, abs=1e-12)
    assert 0 < times[-1] - times[-2] <= h * (1 + 1e-9)


def global_error(kind: IntegratorKind, h: float) -> float:
    result = run(decay_model(k=1.0, end=1.0, step=h), RunConfig(kind))
    return abs(result.series["x"][-1] - math.exp(-1.0))


@pytest.mark.parametrize("kind, lo, hi", [(IntegratorKind.EULER, 1.8, 2.2), (IntegratorKind.RK4, 12.0, 20.0)])
def test_convergence_order(kind, lo, hi):
    errors = [global_error(kind, h) for h in (0.1, 0.05, 0.025)]
    for coarse, fine in zip(errors, errors[1:]):
        assert lo <= coarse / fine <= hi


@pytest.mark.parametrize("config", [EULER, RK4])
def test_closed_transfer_conserves_total(config):
    result = run(transfer_model(k=0.3, a0=100.0, b0=0.0, end=10.0, step=0.001), config)
    assert len(result.times) == 10_001
    for a, b in zip(result.series["A"], result.series["B"]):
        assert abs((a + b) - 100.0) <= 1e-9 * 100.0


def test_runs_are_deterministic():
    first = run(transfer_model(step=0.01))
    assert all(run(transfer_model(step=0.01)) == first for _ in range(3))


# fast path agreement --------------------------------------------------------------

values = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200)
@given(values, values, values, st.floats(0, 60))
def test_generated_derivatives_match_reference(a, b, c, t):
    model = Model(
        "mix", TimeSpec(0.0, 60.0, 0.1), {"k": 0.3, "d": 1.7},
        (Stock("A", 0.0), Stock("B", 0.0), Stock("C", 0.0)),
        (
            Flow("f1", "A", "B", BinOp("*", Ref("k"), Ref("A"))),
            Flow("f2", None, "C", Call("max", (Call("L", (Ref("time"),)), BinOp("-", Ref("B"), Ref("d"))))),
            Flow("f3", "C", "A", BinOp("/", Ref("C"), BinOp("+", Num(2.0), Call("exp", (Call("min", (Ref("A"), Num(1.0))),))))),
            Flow("f4", "B", None, BinOp("-", Ref("B"), BinOp("*", Ref("time"), Ref("d")))),
        ),
        lookups={"L": LookupTable(((1.0, 3.0), (7.5, -2.0), (55.0, 4.0)))},
    )
    compiled = CompiledModel(model)
    x = [a, b, c]
    fast = compiled.derivatives(x, t)
    assert fast == compiled.reference_derivatives(x, t)
    tree = net_derivatives(model, {"A": a, "B": b, "C": c}, t)
    assert fast == [tree["A"], tree["B"], tree["C"]]


# sample_result ----------------------------------------------------------------------

RESULT = SimulationResult((0.0, 1.0, 2.0), {"x": (10.0, 20.0, 40.0)})


def test_sample_result_examples():
    assert sample_result(RESULT, "x", 1.0) == 20.0
    assert sample_result(RESULT, "x", 0.5) == 15.0
    assert sample_result(RESULT, "x", 2.0) == 40.0
    with pytest.raises(OutOfRange):
        sample_result(RESULT, "x", 2.5)
    with pytest.raises(UnknownSeries):
        sample_result(RESULT, "y", 1.0)
