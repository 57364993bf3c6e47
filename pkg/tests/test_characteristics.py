import json
import math

import numpy as np
import pytest

from forestfire.characteristics import (
    CharacteristicCurve,
    CurveFamily,
    F_kernel,
    HorizonBeforeGel,
    default_w_min,
    eval_F,
    eval_X_node,
    explosion_survival,
    flow_identity_error,
    noncrossing_violations,
    pregel_constancy,
    resolved_at_gel,
    solve_family,
    solve_psi,
    upper_bound_violations,
)
from forestfire.kinetics import EnvTooShort


@pytest.fixture(scope="module")
def curve(small_env):
    return solve_psi(small_env, 2.5)


@pytest.fixture(scope="module")
def family(small_env):
    return solve_family(small_env, [1.05, 1.2, 1.5, 2.0, 2.5, 3.0], workers=1)


# ---------------------------------------------------------------------------
# eval_F

@pytest.mark.parametrize("t", [1.5, 2.5])
def test_F_above_one(small_env, t):
    assert eval_F(small_env, t, 1.5) == 1.0


@pytest.mark.parametrize("t", [1.2, 1.5, 2.5])
def test_F_small_w_matches_zero_branch(small_env, t):
    root = math.sqrt(2.0 * small_env.phi_at(t))
    assert eval_F(small_env, t, 0.0) == pytest.approx(root, rel=1e-12)
    assert eval_F(small_env, t, -0.3) == pytest.approx(root, rel=1e-12)
    assert abs(eval_F(small_env, t, 0.05) - root) <= 0.05 * root


def test_F_zero_flux_gives_zero(small_env):
    env = small_env
    zero = np.zeros_like(env.phi)
    for w in (0.0, -0.5):
        assert F_kernel(env.times, env.V, env.amplitudes, zero, env.t_gel, 1.5, w, 0.1) == 0.0


def test_F_continuous_at_branch_points(small_env):
    env = small_env
    w_min = default_w_min(env.K)
    for t in (1.3, 2.0, 2.9):
        lo, hi = eval_F(env, t, [w_min * (1 - 1e-9), w_min * (1 + 1e-9)])
        assert lo == pytest.approx(hi, rel=1e-6)
        assert eval_F(env, t, 1.0) == pytest.approx(eval_F(env, t, 1.0 + 1e-12), abs=1e-9)


def test_F_positive(small_env):
    ws = np.linspace(-0.5, 1.5, 81)
    for t in (1.0, 1.7, 3.0):
        assert np.all(eval_F(small_env, t, ws) > 0)


def test_F_rejects_time_beyond_env(small_env):
    with pytest.raises(EnvTooShort):
        eval_F(small_env, 3.5, 0.5)


# ---------------------------------------------------------------------------
# solve_psi

def test_horizon_before_gel_rejected(small_env):
    with pytest.raises(HorizonBeforeGel):
        solve_psi(small_env, small_env.t_gel)
    with pytest.raises(HorizonBeforeGel):
        solve_psi(small_env, 0.5)


def test_horizon_beyond_env_rejected(small_env):
    with pytest.raises(EnvTooShort):
        solve_psi(small_env, 3.5)


def test_curve_shape(curve):
    assert curve.psi[-1] == 1.0
    assert np.all((curve.psi > 0) & (curve.psi <= 1))
    assert np.all(np.diff(curve.psi) > 0)
    assert curve.psi_at(2.5) == 1.0
    assert curve.psi_at(2.7) == 1.0
    assert np.all(curve.psi_at(np.array([2.6, 3.0, 10.0])) == 1.0)


def test_upsilon_relation(curve):
    post = curve.grid >= curve.t_gel
    ups = curve.upsilon[post]
    assert np.all(np.isfinite(ups))
    assert np.all((ups >= 0) & (ups < 1))
    np.testing.assert_allclose(curve.psi[post], 1.0 - ups**2, atol=1e-15)
    assert np.all(np.isnan(curve.upsilon[curve.grid < curve.t_gel]))


def test_ode_residual_bound(curve):
    st = curve.residual_stats
    assert st["n_checked"] > 1000
    assert st["max_scaled_residual"] <= 1e-4


def test_pregel_constancy(curve, small_env):
    assert pregel_constancy(small_env, curve) <= 1e-6


def test_resolution_at_gel(curve, small_env):
    assert resolved_at_gel(small_env, curve)
    near = solve_psi(small_env, small_env.t_gel + 0.01)
    assert not resolved_at_gel(small_env, near)
    # so close to gelation the spread reflects the truncation, not the solver
    assert pregel_constancy(small_env, near) > 1e-6


def test_pregel_exponential_form(curve, small_env):
    # monodisperse start: X_0(z) = z, so psi(t) = psi(0) exp(t (1 - psi(0)))
    p0 = curve.psi[0]
    pre = curve.grid <= small_env.t_gel
    t = curve.grid[pre]
    np.testing.assert_allclose(curve.psi[pre], p0 * np.exp(t * (1 - p0)), rtol=1e-7)


def test_flow_identity(curve, small_env):
    assert flow_identity_error(small_env, curve) <= 2e-3


def test_X_along_curve_increases_post_gel(curve, small_env):
    post = np.nonzero(curve.grid >= small_env.t_gel)[0][::50]
    X = [eval_X_node(small_env, curve.grid[m], curve.psi[m]) for m in post]
    assert np.all(np.diff(X) > 0)


def test_psi0_strictly_decreasing_in_horizon(family):
    p0 = [c.psi[0] for c in family.curves]
    assert np.all(np.diff(p0) < 0)


def test_noncrossing(family):
    assert noncrossing_violations(family) == 0


def test_horizon_just_after_gel_is_near_one(small_env):
    c = solve_psi(small_env, small_env.t_gel + 1e-3)
    assert c.psi[0] > 0.99


def test_psi0_bracket_and_upper_bound(long_env):
    fam = solve_family(long_env, [2.0, 4.0, 8.0, 12.0], workers=1)
    checked = 0
    for c in fam.curves:
        assert math.exp(-c.y) < c.psi[0] < 1
        bad, applies = upper_bound_violations(c)
        assert bad == 0
        checked += applies
    assert checked > 1000


def test_curves_fill(long_env):
    p0 = [solve_psi(long_env, y).psi[0] for y in (4.0, 8.0, 12.0)]
    assert p0[0] > p0[1] > p0[2]
    assert p0[2] < 1e-4


# ---------------------------------------------------------------------------
# explosion_survival

def test_survival_near_horizon(curve, small_env):
    assert explosion_survival(small_env, curve, curve.y - 1e-9, 1) == pytest.approx(1.0, abs=1e-6)
    assert explosion_survival(small_env, curve, curve.y, 5) == 1.0


@pytest.mark.parametrize("s", [0.0, 0.5, 1.5, 2.2])
def test_survival_is_power(curve, small_env, s):
    p = curve.psi_at(s)
    for k in (1, 2, 7):
        assert explosion_survival(small_env, curve, s, k) == pytest.approx(p**k, rel=1e-12)
    assert explosion_survival(small_env, curve, s, 10**6) < 1e-6


def test_survival_decays_with_horizon(long_env):
    vals = [explosion_survival(long_env, solve_psi(long_env, y), 1.0, 1) for y in (3.0, 6.0, 12.0)]
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] < 1e-3


# ---------------------------------------------------------------------------
# serialization and parallelism

def test_curve_json_roundtrip(curve):
    doc = json.loads(json.dumps(curve.to_json()))
    back = CharacteristicCurve.from_json(doc)
    assert back.y == curve.y
    np.testing.assert_array_equal(back.psi, curve.psi)
    np.testing.assert_array_equal(np.isnan(back.upsilon), np.isnan(curve.upsilon))
    assert back.residual_stats == curve.residual_stats
    assert back.psi_at(1.7) == curve.psi_at(1.7)


def test_family_json_roundtrip(family):
    doc = json.loads(json.dumps(family.to_json()))
    back = CurveFamily.from_json(doc)
    np.testing.assert_array_equal(back.horizons, family.horizons)
    with pytest.raises(ValueError):
        CurveFamily.from_json({"kind": "env"})
    with pytest.raises(KeyError):
        back.get(7.0)


def test_family_independent_of_workers(small_env, family):
    other = solve_family(small_env, family.horizons, workers=2)
    for a, b in zip(family.curves, other.curves):
        np.testing.assert_array_equal(a.psi, b.psi)
