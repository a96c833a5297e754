import numpy as np
import pytest

from evmpopf.fleet import (
    FleetSpec,
    arrival_mask,
    departure_mask,
    extract_plug_events,
    pin_variables,
    read_fleet_bundle,
    rebuild_avbp,
    validate_fleet,
    write_fleet_bundle,
)

from conftest import four_bus


def test_arrival_and_departure_masks():
    avbp = np.array([[0, 1, 1, 0, 1], [1, 1, 0, 0, 0]])
    np.testing.assert_array_equal(arrival_mask(avbp), [[0, 1, 0, 0, 1], [1, 0, 0, 0, 0]])
    np.testing.assert_array_equal(departure_mask(avbp), [[0, 0, 1, 0, 1], [0, 1, 0, 0, 0]])


def test_plug_events_round_trip_avbp():
    avbp = np.array([[0, 1, 1, 0, 1], [1, 1, 0, 0, 0]])
    soci = np.zeros((2, 5))
    soci[0, 1], soci[0, 4], soci[1, 0] = 0.2, 0.5, 0.4
    fleet = FleetSpec.build([2, 3], [0.05, 0.05], avbp=avbp, p_ch_max=[0.01, 0.01], n_gen=1, soci=soci)
    events = extract_plug_events(fleet)
    assert [(e.device, e.arrive_t, e.depart_t, e.soc_init) for e in events] == [
        (0, 1, 2, 0.2), (0, 4, 4, 0.5), (1, 0, 1, 0.4)]
    np.testing.assert_array_equal(rebuild_avbp(events, 2, 5), avbp)


def test_valid_fleet_has_no_violations(toy_fleet, toy_case):
    assert validate_fleet(toy_fleet, 3, toy_case) == []


@pytest.mark.parametrize("change, rule", [
    (dict(conch=np.array([[1, 1, 1], [1, 1, 1]])), "charge while unavailable"),
    (dict(soci=np.array([[0, 0.3, 0.2], [0.5, 0, 0]])), "non-arrival"),
    (dict(socmi=np.array([[0, 0, 1.2], [0, 0, 0]])), "outside [0, 1]"),
    (dict(avbp=np.array([[0, 2, 1], [1, 1, 1]])), "not binary"),
    (dict(e_max=np.array([0.0, 0.06])), "e_max"),
    (dict(eff_ch=np.array([1.5, 1.0])), "eff_ch"),
    (dict(p_ch_min=np.array([0.05, 0.0])), "p_ch_min > p_ch_max"),
    (dict(bus=np.array([3, 99])), "does not exist"),
])
def test_each_invariant_is_checked(toy_fleet, toy_case, change, rule):
    from dataclasses import replace

    bad = replace(toy_fleet, **change)
    problems = validate_fleet(bad, 3, toy_case)
    assert any(rule in p.rule for p in problems), problems


def test_shape_mismatch_reported(toy_fleet):
    problems = validate_fleet(toy_fleet, 4)
    assert problems and all(p.period == -1 for p in problems)


def test_pins_cover_unavailable_and_disabled_actions(toy_fleet):
    pins = pin_variables(toy_fleet)
    kinds = {(p.kind, p.index, p.period) for p in pins}
    # device 0 is away at t=0: every storage variable pinned there
    assert {("p_ch", 0, 0), ("p_dch", 0, 0), ("q_s", 0, 0)} <= kinds
    # discharge and reactive support are never permitted by default
    assert sum(p.kind == "p_dch" for p in pins) == 6
    assert not any(p.kind == "p_ch" and p.index == 1 for p in pins)
    assert len(kinds) == len(pins)


def test_equal_bounds_pin_value():
    avbp = np.ones((1, 2))
    fleet = FleetSpec.build([2], [0.05], avbp=avbp, p_ch_max=[0.01], p_ch_min=[0.01], n_gen=1)
    pins = [p for p in pin_variables(fleet) if p.kind == "p_ch"]
    assert [(p.period, p.value) for p in pins] == [(0, 0.01), (1, 0.01)]


def test_generator_unavailability_pins():
    fleet = FleetSpec.build([2], [0.05], avbp=np.ones((1, 2)), p_ch_max=[0.01], n_gen=1,
                            avg=np.array([[1, 0]]))
    assert {(p.kind, p.period) for p in pin_variables(fleet) if p.kind in ("p_g", "q_g")} == {
        ("p_g", 1), ("q_g", 1)}


def test_bundle_round_trip(tmp_path, toy_fleet):
    write_fleet_bundle(toy_fleet, tmp_path / "f")
    back = read_fleet_bundle(tmp_path / "f")
    for name in ("bus", "e_max", "p_ch_max", "eff_ch", "avbp", "conch", "soci", "socmi", "avg"):
        np.testing.assert_array_equal(getattr(back, name), getattr(toy_fleet, name), err_msg=name)


def test_bundle_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_fleet_bundle(tmp_path)


def test_subset_keeps_generator_rows(toy_fleet):
    sub = toy_fleet.subset([1])
    assert sub.n_y == 1 and sub.bus[0] == 4 and sub.avg.shape == (1, 3)


def test_empty_fleet():
    f = FleetSpec.empty(1, 4)
    assert f.n_y == 0 and f.horizon == 4 and validate_fleet(f, 4, four_bus()) == []
