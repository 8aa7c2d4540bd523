"""Naive T-cell population model over a human lifetime.

Two stocks are integrated: naive cells produced by peripheral proliferation
(``NaiveProliferation``) and memory cells (``Memory``). Thymic naive cells and
active cells are exogenous and enter as lookup tables indexed by age in
years. ``TotalNaive`` is the thymic pool plus the proliferation pool.

Assumptions (the source material is silent on these):
  * both stocks start at 0;
  * ``NaiveProliferationRate`` defaults to 0 for the reference run but its
    flow is kept in the model;
  * memory-to-naive reversion moves cells, so it drains ``Memory``;
  * the thymic inflow is ``NaiveThymusProliferationRate * RealNaives(time)``.

The measured datasets are not public, so ``generate_standin_dataset`` writes a
documented synthetic substitute (plateau to age 20, then exponential decline
of thymic output; constant active cells). Only qualitative behaviour is
checked against it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

from .core import BinOp, Call, Flow, LookupTable, Model, Ref, SimulationResult, Stock, TimeSpec
from .series_io import write_series_csv

STANDIN_AGES = tuple(range(1, 56))
STANDIN_HEADER = "SYNTHETIC STAND-IN: not measured data; generated by sdkit.tcell.generate_standin_dataset"


@dataclass(frozen=True)
class TCellParameters:
    NaiveThymusProliferationRate: float = 0.025
    NaiveProliferationRate: float = 0.0
    NaiveProliferationDeathRate: float = 0.017
    MemoryToNPRate: float = 0.001
    MemoryDeathRate: float = 0.05
    ReversionToMemoryRate: float = 0.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {value!r}")


def standin_real_naives(age: float) -> float:
    if age <= 20:
        return 100.0
    return 100.0 * math.exp(-0.05 * (age - 20))


def standin_real_actives(age: float) -> float:
    return 10.0


def standin_tables() -> tuple[LookupTable, LookupTable]:
    naives = LookupTable(tuple((float(a), standin_real_naives(a)) for a in STANDIN_AGES))
    actives = LookupTable(tuple((float(a), standin_real_actives(a)) for a in STANDIN_AGES))
    return naives, actives


def _mul(a: str, b) -> BinOp:
    return BinOp("*", Ref(a), b)


def build_tcell_model(
    params: TCellParameters = TCellParameters(),
    real_naives: LookupTable | None = None,
    real_actives: LookupTable | None = None,
) -> Model:
    """The two-stock model with inline lookups (stand-in data unless given)."""
    if real_naives is None or real_actives is None:
        default_naives, default_actives = standin_tables()
        real_naives = real_naives or default_naives
        real_actives = real_actives or default_actives
    age = Ref("time")
    flows = (
        Flow("ThymicOutput", None, "NaiveProliferation",
             _mul("NaiveThymusProliferationRate", Call("RealNaives", (age,)))),
        Flow("PeripheralProliferation", None, "NaiveProliferation",
             _mul("NaiveProliferationRate", Ref("NaiveProliferation"))),
        Flow("MemoryReversion", "Memory", "NaiveProliferation",
             _mul("MemoryToNPRate", Ref("Memory"))),
        Flow("NaiveProliferationDeath", "NaiveProliferation", None,
             _mul("NaiveProliferationDeathRate", Ref("NaiveProliferation"))),
        Flow("ActiveToMemory", None, "Memory",
             _mul("ReversionToMemoryRate", Call("RealActives", (age,)))),
        Flow("MemoryDeath", "Memory", None,
             _mul("MemoryDeathRate", Ref("Memory"))),
    )
    return Model(
        name="tcell",
        time_spec=TimeSpec(0.0, 60.0, 0.05),
        parameters=asdict(params),
        stocks=(Stock("NaiveProliferation", 0.0), Stock("Memory", 0.0)),
        flows=flows,
        lookups={"RealNaives": real_naives, "RealActives": real_actives},
        outputs={"TotalNaive": BinOp("+", Call("RealNaives", (age,)), Ref("NaiveProliferation"))},
    )


def generate_standin_dataset(out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``real_naives_synthetic.csv`` and ``real_actives_synthetic.csv``.

    Deterministic; values at integer ages 1..55.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    naives = out / "real_naives_synthetic.csv"
    actives = out / "real_actives_synthetic.csv"
    write_series_csv(naives, ((float(a), standin_real_naives(a)) for a in STANDIN_AGES), STANDIN_HEADER)
    write_series_csv(actives, ((float(a), standin_real_actives(a)) for a in STANDIN_AGES), STANDIN_HEADER)
    return naives, actives


class MissingSeries(KeyError):
    pass


def check_np_prevalence(result: SimulationResult, after: float = 50.0) -> bool:
    """True iff proliferation-derived naive cells are the majority of all naive
    cells at every grid time from ``after`` on."""
    for name in ("NaiveProliferation", "TotalNaive"):
        if name not in result.series:
            raise MissingSeries(name)
    np_series = result.series["NaiveProliferation"]
    total = result.series["TotalNaive"]
    checked = False
    for t, npv, tot in zip(result.times, np_series, total):
        if t < after:
            continue
        checked = True
        if not (tot > 0 and npv / tot > 0.5):
            return False
    return checked
