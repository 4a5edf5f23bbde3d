import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modereach.dynamics import (RelativeCarDynamics, RelativeState, RobotAction, RobotState, ToyDynamics1D,
                                VehicleParams)
from modereach.grid import Dim, GridSpec, ValueField, build_grid
from modereach.modes import OTHER, ModeProbabilities, cluster_modes
from modereach.safety import (AVOID_CAR, AVOID_CURB, NOMINAL, BundleError, SafetyBundle, build_mode_entry,
                              choose_branch, extract_controller, hybrid_control, optimal_control_fields,
                              safety_probability, solve_mode_family, switch_mode)
from modereach.solver import SolverConfig, gradient, grid_states
from modereach.synthetic import synthetic_action_dataset

P = VehicleParams()
vals = st.floats(-50, 50, allow_nan=False)


# -- branch logic ----------------------------------------------------------------

@pytest.mark.parametrize("v_car,v_curb,branch", [(2.0, 3.0, NOMINAL), (-0.1, 0.5, AVOID_CAR),
                                                  (0.5, -0.1, AVOID_CURB), (-0.2, -0.2, AVOID_CAR)])
def test_branch_examples(v_car, v_curb, branch):
    assert choose_branch(v_car, v_curb) == branch


@given(vals, vals, st.floats(0, 5))
def test_branch_is_total_and_consistent(v_car, v_curb, margin):
    b = choose_branch(v_car, v_curb, margin)
    assert b in (NOMINAL, AVOID_CAR, AVOID_CURB)
    if b == NOMINAL:
        assert min(v_car, v_curb) > margin
    elif b == AVOID_CAR:
        assert v_car <= v_curb
    else:
        assert v_curb < v_car


def test_switch_mode_examples():
    assert switch_mode(0, ModeProbabilities({3: 1.0})) == 3
    assert switch_mode(0, ModeProbabilities({OTHER: 1.0})) == OTHER
    assert switch_mode(4, ModeProbabilities({1: 0.5, 2: 0.5})) == 1
    assert switch_mode(4, None) == 4


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=7), st.floats(0.1, 100.0))
def test_switch_mode_scale_invariant(ps, scale):
    ids = list(range(-1, len(ps) - 1))
    a = ModeProbabilities(dict(zip(ids, ps)))
    b = ModeProbabilities({i: p * scale for i, p in zip(ids, ps)})
    assert switch_mode(0, a) == switch_mode(0, b)


def test_safety_probability_examples():
    assert safety_probability(1.0, 1.0) == 1.0
    assert safety_probability(0.8, 0.5) == pytest.approx(0.4)
    assert safety_probability(0.0, 0.37) == 0.0
    with pytest.raises(ValueError):
        safety_probability(1.2, 0.5)


# -- extraction ------------------------------------------------------------------

def test_toy_control_pushes_away_from_target():
    g = build_grid(GridSpec((Dim(-4.0, 4.0, 81),)))
    x = g.coords[0]
    V = ValueField(g.spec, np.abs(x) - 1.0)
    u = optimal_control_fields(V, ToyDynamics1D())["u"].values
    away = np.abs(x) > g.spacing[0] / 2
    assert np.all(np.sign(u[away]) == np.sign(x[away]))


def small_grid():
    return build_grid(GridSpec((Dim(-12, 12, 13), Dim(-12, 12, 13), Dim(-math.pi, math.pi, 8, True),
                                Dim(0, 10, 3), Dim(0, 5, 3))))


@pytest.fixture(scope="module")
def small_family():
    g = small_grid()
    modes = cluster_modes(synthetic_action_dataset(50, 0), seed=0)
    cfg = SolverConfig(horizon=1.0, require_convergence=False)
    res = solve_mode_family(g, modes, P, cfg, mode_ids=[OTHER, 1, 3])
    bundle = SafetyBundle(P, target=(2.5, 1.25), solver=cfg.to_dict())
    for m, r in res.items():
        bundle.modes[m] = build_mode_entry(r, RelativeCarDynamics(P, modes.bounds_for(m)), modes.bounds_for(m))
    return g, modes, res, bundle


def test_extraction_lossless_and_feasible(small_family):
    g, modes, res, bundle = small_family
    dyn = RelativeCarDynamics(P, modes.bounds_for(OTHER))
    value = res[OTHER].value
    tables = extract_controller(value, dyn)
    _, inputs = dyn.optimize(grid_states(g), gradient(value))
    np.testing.assert_array_equal(tables.u_a.values, inputs[:, 0])
    np.testing.assert_array_equal(tables.u_delta.values, inputs[:, 1])
    assert np.all((tables.u_a.values >= P.a_r_min) & (tables.u_a.values <= P.a_r_max))
    assert set(np.unique(tables.u_delta.values)) <= set(P.steering_candidates())
    # bang-bang in the speed input
    dv = gradient(value)[:, 4]
    assert np.all(tables.u_a.values[dv > 0] == P.a_r_max)
    assert np.all(tables.u_a.values[dv < 0] == P.a_r_min)


def test_family_nests_and_aligns(small_family):
    _, _, res, _ = small_family
    for m in (1, 3):
        assert np.all(res[OTHER].value.values <= res[m].value.values + 1e-3)
        assert res[OTHER].iterations >= res[m].iterations


def test_filter_least_restrictive_and_lookup(small_family):
    g, modes, res, bundle = small_family
    rng = np.random.default_rng(0)
    nominal = RobotAction(0.123456789, -0.0321)
    for _ in range(200):
        z = RelativeState(*rng.uniform(-12, 12, 2), rng.uniform(-3, 3), rng.uniform(0, 10), rng.uniform(0, 5))
        dec = hybrid_control(RobotState(0, 0, z.v_r, 0), z, OTHER, nominal, bundle, margin=0.5)
        assert dec.v_curb == math.inf
        if dec.branch == NOMINAL:
            assert dec.action is nominal
            assert dec.v_car > 0.5
        else:
            assert dec.branch == AVOID_CAR and dec.v_car <= 0.5
            assert P.a_r_min <= dec.action.a <= P.a_r_max
            assert P.delta_min <= dec.action.delta <= P.delta_max
    # at a node the lookup returns stored values exactly
    flat = 1234
    node = g.node(flat)
    dec = hybrid_control(RobotState(0, 0, node[4], 0), RelativeState(*node), OTHER, nominal, bundle, margin=1e9)
    entry = bundle.entry(OTHER)
    assert dec.v_car == entry.value.values[flat]
    assert dec.action.a == entry.controls.u_a.values[flat]
    assert dec.action.delta == entry.controls.u_delta.values[flat]


def test_missing_mode_raises(small_family):
    *_, bundle = small_family
    with pytest.raises(BundleError):
        hybrid_control(RobotState(0, 0, 1, 0), RelativeState(5, 5, 0, 1, 1), 4, RobotAction(0, 0), bundle)
    assert bundle.missing([OTHER, 1, 4, 5]) == [4, 5]


def test_bundle_round_trip(small_family, tmp_path):
    *_, bundle = small_family
    bundle.save(tmp_path / "b")
    back = SafetyBundle.load(tmp_path / "b")
    assert sorted(back.modes) == sorted(bundle.modes)
    for m, e in bundle.modes.items():
        np.testing.assert_array_equal(back.modes[m].value.values, e.value.values)
        np.testing.assert_array_equal(back.modes[m].controls.u_delta.values, e.controls.u_delta.values)
        assert back.modes[m].bounds == e.bounds
    assert back.vehicle == bundle.vehicle and back.target == bundle.target
    # a corrupted table is caught by its checksum
    f = tmp_path / "b" / "mode_1_value.rgvf"
    blob = bytearray(f.read_bytes())
    blob[-20] ^= 1
    f.write_bytes(bytes(blob))
    with pytest.raises(Exception):
        SafetyBundle.load(tmp_path / "b")


def test_curb_branch_selected_when_curb_is_worse(small_family):
    g, modes, res, bundle = small_family
    from modereach.safety import BundleEntry, ControlTables
    cg = build_grid(GridSpec((Dim(-5, 5, 3), Dim(-5, 5, 3), Dim(0, 5, 3), Dim(-math.pi, math.pi, 4, True))))
    const = lambda v: ValueField(cg.spec, np.full(cg.size, v))  # noqa: E731
    curbs = BundleEntry(const(-0.3), ControlTables(const(-4.0), const(0.2)))
    b = SafetyBundle(P, dict(bundle.modes), curbs)
    far = RelativeState(11.0, 11.0, 0.0, 1.0, 1.0)
    dec = hybrid_control(RobotState(0, 0, 1, 0), far, OTHER, RobotAction(0, 0), b)
    assert dec.branch == AVOID_CURB
    assert dec.action == RobotAction(-4.0, 0.2)


def test_fused_lookup_matches_separate_interpolation(small_family):
    from modereach.grid import interpolate
    g, modes, res, bundle = small_family
    e = bundle.entry(OTHER)
    rng = np.random.default_rng(4)
    for _ in range(200):
        z = np.array([*rng.uniform(-14, 14, 2), rng.uniform(-4, 4), rng.uniform(-1, 11), rng.uniform(-1, 6)])
        v, a, d, clamped = e._lookup(z)
        assert v == interpolate(e.value, z)
        assert a == interpolate(e.controls.u_a, z)
        assert d == interpolate(e.controls.u_delta, z)
        lo, hi = g.lo, g.hi
        outside = any(not g.periodic[k] and not lo[k] <= z[k] <= hi[k] for k in range(5))
        assert clamped == outside
