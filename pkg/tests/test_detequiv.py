import json

import numpy as np
import pytest

from bilevel_risk.detequiv import (
    GenericBilevel, build_cvar_joint, build_expectation, build_expected_excess, build_semideviation, extract,
    solve_cvar,
)
from bilevel_risk.errors import DimensionError, SenseError
from bilevel_risk.harness import grid_minimize
from bilevel_risk.lowerlevel import enumerate_bases, f_eval
from bilevel_risk.model import CVaR
from bilevel_risk.mpcc import build_kkt, global_oracle
from instances import interval_instance, random_instance


def _oracle(gb):
    return global_oracle(build_kkt(gb))


def test_dimensions(two_point_interval):
    gb = build_expectation(two_point_interval)
    assert (gb.k, gb.l, gb.r) == (1, 2, 4)
    gb = build_expected_excess(two_point_interval, 2.0)
    assert (gb.l, gb.r) == (4, 8)
    gb = build_semideviation(two_point_interval, 0.5)
    assert (gb.l, gb.r) == (4, 8)
    gb = build_cvar_joint(two_point_interval, 0.5)
    assert (gb.k, gb.l, gb.r) == (2, 4, 8)


def test_single_scenario_expectation_is_deterministic_problem():
    inst = interval_instance([1.0], [1.0])
    gb = build_expectation(inst)
    assert np.array_equal(gb.h, inst.q)


def test_oracle_values_on_two_point_family(two_point_interval):
    inst = two_point_interval
    res = _oracle(build_expectation(inst))
    assert res.objective == pytest.approx(1.0, abs=1e-12) and res.u[0] == pytest.approx(0.0, abs=1e-12)
    assert _oracle(build_expected_excess(inst, 2.0)).objective == pytest.approx(0.0, abs=1e-12)
    assert _oracle(build_expected_excess(inst, 3.0)).objective == pytest.approx(0.0, abs=1e-12)
    res = _oracle(build_semideviation(inst, 0.5))
    assert res.objective == pytest.approx(1.25, abs=1e-12)


def test_zero_weight_semideviation_equals_expectation():
    rng = np.random.default_rng(2)
    for _ in range(5):
        inst = random_instance(rng, n_max=1, m_max=2, s_max=3, K_max=2, require_leader_feasible=True)
        a = _oracle(build_expectation(inst)).objective
        b = _oracle(build_semideviation(inst, 0.0)).objective
        assert a == pytest.approx(b, abs=1e-9)


def test_pessimistic_rejected():
    inst = interval_instance([0.0], [1.0], sense="pessimistic")
    for build in (build_expectation, lambda i: build_expected_excess(i, 1.0), lambda i: build_semideviation(i, 0.5)):
        with pytest.raises(SenseError):
            build(inst)
    with pytest.raises(SenseError):
        solve_cvar(inst, 0.5)


def test_lower_rows_decompose_by_scenario():
    rng = np.random.default_rng(4)
    inst = random_instance(rng)
    for gb in (build_expectation(inst), build_expected_excess(inst, 0.0)):
        rows = np.array(gb.row_scenario)
        for j, name in enumerate(gb.w_names):
            owner = int(name[2:name.index("]")])
            touching = np.nonzero(gb.W[:, j])[0]
            assert np.all(rows[touching] == owner)
    sd = build_semideviation(inst, 0.5)
    assert sd.row_scenario.count(-1) == inst.K


def test_provenance_reproduces_scenario_values():
    rng = np.random.default_rng(6)
    for _ in range(6):
        inst = random_instance(rng, n_max=1, m_max=2, s_max=3, K_max=3, require_leader_feasible=True)
        for gb in (build_expectation(inst), build_semideviation(inst, 0.3)):
            res = _oracle(gb)
            parts = extract(gb, res.u, res.w)
            for k, y in enumerate(parts["y"]):
                expected = f_eval(inst, parts["x"], k)[0]
                assert inst.c @ parts["x"] + inst.q @ y == pytest.approx(expected, abs=1e-7 * (1 + abs(expected)))


def test_json_envelope_round_trip(two_point_interval):
    gb = build_semideviation(two_point_interval, 0.5)
    data = json.loads(gb.to_json())
    assert set(data) == {"g", "h", "t", "W", "B", "b", "Hu", "hu", "provenance"}
    again = GenericBilevel.from_dict(data)
    assert np.array_equal(again.W, gb.W) and again.w_names == gb.w_names and again.row_scenario == gb.row_scenario


def test_generic_bilevel_needs_lower_rows():
    with pytest.raises(DimensionError):
        GenericBilevel([1.0], [1.0], [1.0], np.zeros((0, 1)), np.zeros((0, 1)), [], [[1.0]], [1.0])


def test_cvar_examples(two_point_interval):
    res = solve_cvar(two_point_interval, 0.5)
    assert res.value == pytest.approx(2.0, abs=1e-9) and res.x[0] == pytest.approx(0.0, abs=1e-9)
    single = interval_instance([1.0], [1.0])
    assert solve_cvar(single, 0.3).value == pytest.approx(1.0, abs=1e-9)
    near_mean = solve_cvar(two_point_interval, 0.01).value
    assert abs(near_mean - 1.0) <= 0.05


def test_cvar_search_agrees_with_joint_threshold_model():
    rng = np.random.default_rng(9)
    for _ in range(4):
        inst = random_instance(rng, n_max=1, m_max=2, s_max=2, K_max=3, require_leader_feasible=True)
        alpha = float(rng.uniform(0.1, 0.9))
        joint = _oracle(build_cvar_joint(inst, alpha)).objective
        assert solve_cvar(inst, alpha).value == pytest.approx(joint, abs=1e-7)


def test_cvar_search_matches_leader_grid_on_random_instances():
    rng = np.random.default_rng(21)
    for _ in range(8):
        inst = random_instance(rng, n_max=1, m_max=2, s_max=3, K_max=4, require_leader_feasible=True)
        alpha = float(rng.uniform(0.1, 0.9))
        res = solve_cvar(inst, alpha)
        _, grid = grid_minimize(inst, CVaR(alpha), 1e-3)
        lip = enumerate_bases(inst).lipschitz_bound(inst.c) / (1.0 - alpha)
        assert -1e-9 <= grid - res.value <= 1e-3 * lip
