import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from tdcrlearn.plant import (
    OBS_DIM, PlantParams, PlantState, backlash_step, observe, pcc_forward, perturb_params,
    plant_step, rotation_matrix, rotation_vector, section_curvature, section_transform,
    tendon_displacements, tip_pose,
)

P = PlantParams()


def Rz(a):
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])


def Ry(a):
    return np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])


def zero_sum_command(amplitude, channel=0):
    u = np.zeros(9)
    sec = channel // 3 * 3
    u[sec:sec + 3] = -amplitude / 2
    u[channel] = amplitude
    return u


# -- dynamics --------------------------------------------------------------------

def test_rest_is_equilibrium():
    s = PlantState()
    s2 = plant_step(s, np.zeros(9), P)
    for a, b in zip(s.as_array(), s2.as_array()):
        assert a == b


def test_degenerate_motor_lag_tracks_command_in_one_step():
    p = replace(P, tau_m=P.dt)
    u = np.linspace(-0.01, 0.01, 9)
    s = plant_step(PlantState(), u, p)
    np.testing.assert_array_equal(s.v, u)


def test_step_response_matches_first_order_lag():
    s = PlantState()
    u = np.ones(9)
    vs = []
    for _ in range(60):
        s = plant_step(s, u, P)
        vs.append(s.v[0])
    n = np.arange(1, 61)
    # discrete explicit Euler equals a continuous lag with a corrected time constant
    tau_d = -P.dt / math.log(1 - P.dt / P.tau_m)
    closed = 1 - np.exp(-n * P.dt / tau_d)
    np.testing.assert_allclose(vs, closed, rtol=1e-12)
    # and it is within 1% of the nominal continuous lag once the correction is applied to time
    t63 = n[np.argmax(np.array(vs) >= 1 - math.exp(-1))] * P.dt
    assert abs(t63 - tau_d) <= P.dt
    assert vs[-1] == pytest.approx(1.0, abs=1e-6)


def test_plant_step_rejects_bad_input():
    with pytest.raises(ValueError):
        plant_step(PlantState(), np.full(9, np.nan), P)
    with pytest.raises(ValueError):
        plant_step(PlantState(), np.zeros(8), P)


def test_backlash_dead_band_and_push():
    b = 0.002
    xi = np.array([0.001])
    np.testing.assert_array_equal(backlash_step(xi, xi + 0.5 * b, b), xi)
    np.testing.assert_array_equal(backlash_step(xi, xi - b, b), xi)
    np.testing.assert_allclose(backlash_step(xi, xi + 2 * b, b), xi + b)


def test_backlash_triangle_sweep_loop_width():
    b, A = 0.002, 0.01
    t = np.linspace(0, 4, 4001)
    l = A * (2 * np.abs(2 * (t - np.floor(t + 0.5))) - 1)  # triangle wave, period 1
    xi = np.zeros(1)
    up, down = {}, {}
    for k in range(1, len(t)):
        xi = backlash_step(xi, np.array([l[k]]), b)
        if t[k] < 1:
            continue
        key = round(l[k], 6)
        (up if l[k] > l[k - 1] else down)[key] = xi[0]
    common = [k for k in up if k in down and abs(k) < A - 2 * b]
    widths = [down[k] - up[k] for k in common]
    assert len(common) > 100
    np.testing.assert_allclose(widths, 2 * b, atol=1e-12)


def test_hysteresis_is_non_markovian():
    """Equal motor lengths, different effective tendon state, different tip pose."""
    def run(sign):
        s = PlantState()
        for u_amp, n in ((sign * 0.01, 100), (-sign * 0.01, 100), (0.0, 400)):
            for _ in range(n):
                s = plant_step(s, zero_sum_command(u_amp), P)
        return s

    a, b = run(+1), run(-1)
    np.testing.assert_allclose(a.l, b.l, atol=1e-15)
    assert abs(a.l[0]) < 1e-12
    assert abs(a.q[0] - b.q[0]) >= 0.5 * P.backlash
    pa, pb = tip_pose(a, P).p, tip_pose(b, P).p
    assert np.linalg.norm(pa - pb) > 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_zero_net_commands_keep_section_sums_bounded(seed):
    rng = np.random.default_rng(seed)
    s = PlantState()
    for _ in range(300):
        a = rng.uniform(-P.u_max, P.u_max, size=9)
        u = a - np.repeat(a.reshape(3, 3).mean(1), 3)
        s = plant_step(s, u, P)
        sums = s.q.reshape(3, 3).sum(1)
        assert np.all(np.abs(sums) <= 3 * P.backlash + 1e-12)
        assert np.linalg.norm(tip_pose(s, P).p) <= P.total_length + 1e-12
    assert np.isfinite(s.as_array()).all()


def test_plant_is_deterministic():
    rng = np.random.default_rng(0)
    us = rng.uniform(-0.01, 0.01, size=(50, 9))
    outs = []
    for _ in range(2):
        s = PlantState()
        for u in us:
            s = plant_step(s, u, P)
        outs.append(s.as_array())
    np.testing.assert_array_equal(*outs)


# -- kinematics --------------------------------------------------------------------

def test_section_curvature_cases():
    r, L = P.r, P.L[0]
    assert section_curvature((0, 0, 0), r, L)[0] == 0.0
    d = 0.003
    k, phi = section_curvature((-d, d / 2, d / 2), r, L)
    assert phi == pytest.approx(0.0, abs=1e-15)
    assert k == pytest.approx(d / (r * L), rel=1e-12)
    q = (0.001, -0.0004, 0.0025)
    k1, p1 = section_curvature(q, r, L)
    k2, p2 = section_curvature((q[0], q[2], q[1]), r, L)
    assert k1 * math.sin(p1) == pytest.approx(-k2 * math.sin(p2), rel=1e-12)


@settings(max_examples=200)
@given(st.floats(1e-3, 2.0), st.floats(-math.pi + 1e-3, math.pi - 1e-3))
def test_curvature_round_trip(kappa, phi):
    q = tendon_displacements(kappa, phi, P.r, P.L[0])
    k2, p2 = section_curvature(q, P.r, P.L[0])
    assert abs(k2 - kappa) <= 1e-9 * max(1.0, kappa)
    assert abs(math.remainder(p2 - phi, 2 * math.pi)) <= 1e-9


def test_section_transform_straight_and_quarter_circle():
    L = 0.256
    T = section_transform(0.0, 0.3, L)
    np.testing.assert_allclose(T[:3, 3], [0, 0, L], atol=1e-15)
    np.testing.assert_allclose(T[:3, :3], np.eye(3), atol=1e-15)
    kappa = (math.pi / 2) / L
    T = section_transform(kappa, 0.0, L)
    np.testing.assert_allclose(T[:3, 3], [L * 2 / math.pi, 0, L * 2 / math.pi], rtol=1e-12)
    np.testing.assert_allclose(T[:3, 3], [0.1630, 0, 0.1630], atol=5e-5)


@pytest.mark.parametrize("kappa,phi", [(0.5, 0.0), (2.0, 1.1), (4.0, -2.5), (1e-4, 0.7)])
def test_section_transform_matches_explicit_rotations(kappa, phi):
    L = 0.256
    T = section_transform(kappa, phi, L)
    R = Rz(phi) @ Ry(kappa * L) @ Rz(-phi)
    p = Rz(phi) @ np.array([(1 - math.cos(kappa * L)) / kappa, 0, math.sin(kappa * L) / kappa])
    np.testing.assert_allclose(T[:3, :3], R, atol=1e-12)
    np.testing.assert_allclose(T[:3, 3], p, atol=1e-12)


@pytest.mark.parametrize("theta", [1e-7, 1e-5])
def test_small_angle_branches_agree_with_high_precision(theta):
    mpmath.mp.dps = 50
    L = 0.256
    kappa = theta / L
    T = section_transform(kappa, 0.0, L)
    k = mpmath.mpf(theta) / mpmath.mpf(L)
    px = float((1 - mpmath.cos(k * L)) / k)
    pz = float(mpmath.sin(k * L) / k)
    assert T[0, 3] == pytest.approx(px, rel=1e-10)
    assert T[2, 3] == pytest.approx(pz, rel=1e-10)


def test_straight_tip_height():
    pose = tip_pose(PlantState(), P)
    np.testing.assert_allclose(pose.p, [0, 0, 0.768], atol=1e-15)
    np.testing.assert_array_equal(pose.phi, [0, 0, 0])


def test_sag_zero_when_straight_and_downward_otherwise():
    heavy = replace(P, payload=0.1)
    assert tip_pose(PlantState(), heavy).p[2] == pytest.approx(0.768)
    s = PlantState(q=np.array([-0.004, 0.002, 0.002, 0, 0, 0, 0, 0, 0.0]))
    p0, p1 = tip_pose(s, P).p, tip_pose(s, heavy).p
    reach = math.hypot(p0[0], p0[1])
    assert p0[2] - p1[2] == pytest.approx(0.1 * 0.05 * reach / 0.768, rel=1e-12)
    np.testing.assert_array_equal(p0[:2], p1[:2])


def test_pcc_forward_batches():
    rng = np.random.default_rng(0)
    q = rng.uniform(-0.004, 0.004, size=(5, 9))
    p, R = pcc_forward(q, P.r, P.L)
    for i in range(5):
        T = np.eye(4)
        for k in range(3):
            kap, ph = section_curvature(q[i, 3 * k:3 * k + 3], P.r, P.L[k])
            T = T @ section_transform(kap, ph, P.L[k])
        np.testing.assert_allclose(p[i], T[:3, 3], atol=1e-14)
        np.testing.assert_allclose(R[i], T[:3, :3], atol=1e-14)


@settings(max_examples=100)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.floats(0.0, math.pi - 1e-3))
def test_rotation_vector_matches_scipy(axis, angle):
    a = np.asarray(axis)
    if np.linalg.norm(a) < 1e-3:
        return
    phi = a / np.linalg.norm(a) * angle
    R = Rotation.from_rotvec(phi).as_matrix()
    np.testing.assert_allclose(rotation_vector(R), Rotation.from_matrix(R).as_rotvec(), atol=1e-9)
    np.testing.assert_allclose(rotation_matrix(phi), R, atol=1e-12)


def test_rotation_vector_identity_and_near_pi():
    np.testing.assert_array_equal(rotation_vector(np.eye(3)), [0, 0, 0])
    phi = np.array([0.0, 0.0, math.pi - 1e-8])
    out = rotation_vector(rotation_matrix(phi))
    assert np.linalg.norm(out) <= math.pi
    assert abs(abs(out[2]) - (math.pi - 1e-8)) < 1e-6


# -- observation / drift -------------------------------------------------------------

def test_observation_layout_noise_and_determinism():
    s = PlantState(l=np.arange(9) * 1e-3, v=np.arange(9) * 1e-4)
    quiet = replace(P, noise_std=0.0)
    o = observe(s, quiet, np.random.default_rng(0))
    assert o.shape == (OBS_DIM,)
    np.testing.assert_array_equal(o[:9], s.l)
    np.testing.assert_array_equal(o, observe(s, quiet, np.random.default_rng(1)))
    a = observe(s, P, np.random.default_rng(5))
    b = observe(s, P, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, o)


def test_perturb_params():
    a, b = perturb_params(P, 3), perturb_params(P, 3)
    assert a == b
    assert 0.9 * P.backlash <= a.backlash <= 1.1 * P.backlash
    assert a.dt == P.dt and a.L == P.L and a.r == P.r
    distinct = {perturb_params(P, s).tau_c for s in range(20)}
    assert len(distinct) == 20


def test_invalid_params():
    with pytest.raises(ValueError):
        PlantParams(tau_m=0.0)
    with pytest.raises(ValueError):
        PlantParams(backlash=-1.0)
