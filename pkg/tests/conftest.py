import numpy as np
import pytest

from evmpopf.fleet import FleetSpec
from evmpopf.grid import NetworkCase


def four_bus(rate=0.5, **kw):
    args = dict(
        base_mva=1.0, bus_id=[1, 2, 3, 4], bus_type=[3, 1, 1, 1],
        f_bus=[1, 2, 2], t_bus=[2, 3, 4], r=[0.01, 0.02, 0.03], x=[0.02, 0.03, 0.02],
        b=[0.001, 0.0, 0.002], rate=[rate, rate, rate], gen_bus=[1],
        vmin=[1, 0.9, 0.9, 0.9], vmax=[1, 1.1, 1.1, 1.1], name="four",
    )
    args.update(kw)
    return NetworkCase.from_arrays(**args)


@pytest.fixture
def toy_case():
    return four_bus()


@pytest.fixture
def toy_fleet():
    avbp = np.array([[0, 1, 1], [1, 1, 1]])
    return FleetSpec.build(
        [3, 4], [0.05, 0.06], avbp=avbp, p_ch_max=[0.01, 0.02], n_gen=1,
        soci=np.array([[0, 0.3, 0], [0.5, 0, 0]]), socmi=np.array([[0, 0, 0.35], [0, 0, 0.7]]),
        eff_ch=[0.9, 0.95],
    )


@pytest.fixture
def toy_demand():
    pd = np.array([[0, 0, 0], [0.1, 0.2, 0.1], [0.05, 0.1, 0.2], [0.1, 0.1, 0.1]])
    return pd, 0.3 * pd


@pytest.fixture(scope="session")
def calibrated():
    """20-household feeder, its 26-EV fleet and a two-tier price vector."""
    from evmpopf import scenarios as sc

    f = sc.calibrated_feeder(20)
    fleet, events = sc.generate_fleet(sc.EvPopulationParams(), 20, 1, household_bus=f.household_bus)
    return f, fleet, sc.two_tier_prices(96, 0.25)


_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``."""

    def record(number, ok, detail):
        _CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
