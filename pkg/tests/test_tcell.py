from __future__ import annotations

import math
from pathlib import Path

import pytest

from sdkit.core import LookupTable, SimulationResult, validate_model
from sdkit.engine import run
from sdkit.experiment import load_model
from sdkit.sdl import parse_model, serialize_model
from sdkit.series_io import read_series_csv
from sdkit.tcell import (
    MissingSeries,
    TCellParameters,
    build_tcell_model,
    check_np_prevalence,
    generate_standin_dataset,
    standin_real_actives,
    standin_real_naives,
)

ROOT = Path(__file__).resolve().parents[1]
ZERO = TCellParameters(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def test_default_parameters():
    p = TCellParameters()
    assert (p.NaiveThymusProliferationRate, p.NaiveProliferationRate, p.NaiveProliferationDeathRate,
            p.MemoryToNPRate, p.MemoryDeathRate, p.ReversionToMemoryRate) == (0.025, 0.0, 0.017, 0.001, 0.05, 0.0)


def test_negative_parameter_rejected():
    with pytest.raises(ValueError):
        TCellParameters(MemoryDeathRate=-0.1)


def test_default_model_validates():
    model = build_tcell_model(TCellParameters())
    assert validate_model(model) == []
    assert model.time_spec.start == 0.0 and model.time_spec.end == 60.0 and model.time_spec.step == 0.05
    assert [s.name for s in model.stocks] == ["NaiveProliferation", "Memory"]
    assert all(s.initial_value == 0.0 for s in model.stocks)
    assert list(model.outputs) == ["TotalNaive"]
    assert [(f.source, f.sink) for f in model.flows] == [
        (None, "NaiveProliferation"),
        (None, "NaiveProliferation"),
        ("Memory", "NaiveProliferation"),
        ("NaiveProliferation", None),
        (None, "Memory"),
        ("Memory", None),
    ]


def test_all_zero_parameters_keep_stocks_empty():
    result = run(build_tcell_model(ZERO))
    assert set(result.series["NaiveProliferation"]) == {0.0}
    assert set(result.series["Memory"]) == {0.0}


def test_memory_stays_empty_without_active_reversion():
    result = run(build_tcell_model(TCellParameters()))
    assert set(result.series["Memory"]) == {0.0}
    no_transfer = run(build_tcell_model(TCellParameters(MemoryToNPRate=0.0)))
    assert no_transfer.series["NaiveProliferation"] == result.series["NaiveProliferation"]


def test_total_naive_is_lookup_plus_proliferation():
    model = build_tcell_model(TCellParameters())
    result = run(model)
    table = model.lookups["RealNaives"]
    for t, np_, total in zip(result.times, result.series["NaiveProliferation"], result.series["TotalNaive"]):
        assert total == table(t) + np_


# stand-in data -------------------------------------------------------------------------

def test_standin_generator_values():
    assert standin_real_naives(20) == 100.0
    assert standin_real_naives(55) == pytest.approx(100.0 * math.exp(-1.75))
    assert standin_real_naives(55) == pytest.approx(17.377, abs=1e-3)
    assert standin_real_actives(40) == 10.0


def test_generated_files_match_bundled_files(tmp_path):
    naives, actives = generate_standin_dataset(tmp_path)
    for generated in (naives, actives):
        bundled = ROOT / "data" / generated.name
        assert generated.read_bytes() == bundled.read_bytes()
        text = generated.read_text(encoding="utf-8")
        assert text.startswith("# SYNTHETIC STAND-IN")
    points = read_series_csv(naives)
    assert [t for t, _ in points] == [float(a) for a in range(1, 56)]
    assert dict(points)[55.0] == standin_real_naives(55)


# prevalence --------------------------------------------------------------------------

def test_prevalence_with_default_parameters():
    assert check_np_prevalence(run(build_tcell_model(TCellParameters())))


def test_no_thymic_supply_means_no_prevalence():
    assert not check_np_prevalence(run(build_tcell_model(TCellParameters(NaiveThymusProliferationRate=0.0))))


def test_fast_death_means_no_prevalence():
    result = run(build_tcell_model(TCellParameters(NaiveProliferationDeathRate=10.0)))
    assert not check_np_prevalence(result)
    ratio = result.series["NaiveProliferation"][-1] / result.series["TotalNaive"][-1]
    assert ratio < 0.01


def test_prevalence_monotone_in_thymic_rate():
    flags = [check_np_prevalence(run(build_tcell_model(TCellParameters(NaiveThymusProliferationRate=r))))
             for r in (0.0, 0.0125, 0.025, 0.05, 0.1)]
    assert flags == sorted(flags)
    assert flags[0] is False and flags[-1] is True


def test_proliferation_nonnegative_and_increasing_to_twenty():
    result = run(build_tcell_model(TCellParameters()))
    early = [v for t, v in zip(result.times, result.series["NaiveProliferation"]) if t <= 20.0]
    assert early[0] == 0.0
    assert all(v >= 0.0 for v in early)
    assert all(b > a for a, b in zip(early, early[1:]))


def test_prevalence_needs_series():
    with pytest.raises(MissingSeries):
        check_np_prevalence(SimulationResult((0.0, 60.0), {"NaiveProliferation": (0.0, 1.0)}))


# integration with the language ---------------------------------------------------------

def test_serialized_model_reproduces_output_bit_identically():
    model = build_tcell_model(TCellParameters(ReversionToMemoryRate=0.05))
    again = parse_model(serialize_model(model))
    assert again == model
    assert run(again) == run(model)


def test_bundled_model_file_matches_builder():
    bundled = load_model(ROOT / "models" / "tcell.sdl")
    built = build_tcell_model(TCellParameters())
    plain = {name: LookupTable(table.points) for name, table in bundled.lookups.items()}
    assert bundled.with_lookups(plain) == built
    assert run(bundled) == run(built)
