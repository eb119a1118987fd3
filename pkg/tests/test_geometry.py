import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddfunnel.geometry import (
    Ellipsoid,
    EnvelopeCache,
    GeometryError,
    HalfspaceSet,
    ellipsoid_contains,
    input_envelope,
    linearize_box_constraints,
    mvie,
    mvie_factor,
    segment_envelopes,
)


def tangent_polygon(count, radius=1.0, Q=None):
    th = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
    A = np.column_stack((np.cos(th), np.sin(th)))
    if Q is not None:
        A = A @ Q.T
    return HalfspaceSet(A, np.full(count, radius))


def random_spd(rng, d, lo=0.5, hi=3.0):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return (Q * rng.uniform(lo, hi, d)) @ Q.T


# --- ellipsoid ----------------------------------------------------------------


def test_contains_origin_and_boundary():
    E = Ellipsoid(np.eye(3))
    assert ellipsoid_contains(E, np.zeros(3))
    assert ellipsoid_contains(E, np.array([1.0, 0.0, 0.0]))
    assert not ellipsoid_contains(Ellipsoid(4 * np.eye(3)), np.array([1.0, 0.0, 0.0]))


def test_contains_dimension_mismatch():
    with pytest.raises(ValueError):
        ellipsoid_contains(Ellipsoid(np.eye(2)), np.zeros(3))


@pytest.mark.parametrize("P", [[[1.0, 0.1], [0.0, 1.0]], [[1.0, 0.0], [0.0, -1.0]], [[1.0, 0.0, 0.0]]])
def test_invalid_shape_matrices(P):
    with pytest.raises(ValueError):
        Ellipsoid(np.array(P))


def test_boundary_samples_on_boundary():
    rng = np.random.default_rng(0)
    E = Ellipsoid(random_spd(rng, 3))
    z = E.boundary_samples(rng, 100)
    np.testing.assert_allclose(np.einsum("ij,jk,ik->i", z, E.P, z), 1.0, atol=1e-12)


# --- linearization ------------------------------------------------------------


def test_symmetric_box_halfspaces():
    hs = linearize_box_constraints([-1.0, -1.0], [1.0, 1.0], [0.0, 0.0])
    assert hs.A.shape == (4, 2)
    np.testing.assert_array_equal(hs.b, np.ones(4))


def test_case_study_first_joint_offsets():
    hs = linearize_box_constraints([-5.0], [9.0], [0.28])
    np.testing.assert_allclose(sorted(hs.b), [5.28, 8.72], atol=1e-12)


@pytest.mark.parametrize("center", [[1.0, 0.0], [0.0, -2.0], [3.0, 0.0]])
def test_center_on_or_outside_boundary_rejected(center):
    with pytest.raises(GeometryError):
        linearize_box_constraints([-1.0, -2.0], [1.0, 2.0], center)


# --- inscribed ellipsoid --------------------------------------------------------


def test_box_analytic_factor():
    hs = linearize_box_constraints([-1.0, -3.0, -2.0], [2.0, 3.0, 0.5], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(mvie_factor(hs), np.diag([1.0, 3.0, 0.5]), atol=0)


def test_box_grid_search_oracle_2d():
    hs = linearize_box_constraints([-1.0, -3.0], [2.0, 1.5], [0.0, 0.0])
    Z = mvie_factor(hs, analytic=False)
    # brute force over diagonal Z that keep the ellipse inside the box
    grid = np.linspace(0.01, 3.0, 300)
    best = max((z1 * z2, z1, z2) for z1, z2 in itertools.product(grid, grid) if z1 <= 1.0 and z2 <= 1.5)
    assert np.linalg.det(Z) >= best[0] * (1 - 1e-6)
    np.testing.assert_allclose(Z, np.diag([1.0, 1.5]), rtol=1e-6, atol=1e-7)


def test_unit_ball_polygon():
    Z = mvie_factor(tangent_polygon(100))
    np.testing.assert_allclose(Z, np.eye(2), atol=1e-3)


def test_cap_binds():
    hs = linearize_box_constraints([-10.0, -10.0], [10.0, 10.0], [0.0, 0.0])
    np.testing.assert_allclose(mvie_factor(hs, x_max=2.0), 2.0 * np.eye(2))
    np.testing.assert_allclose(mvie_factor(hs, x_max=2.0, analytic=False), 2.0 * np.eye(2), atol=1e-6)


def test_origin_outside_rejected():
    with pytest.raises(GeometryError):
        mvie(HalfspaceSet(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1.0, -0.5])))


def test_nonpositive_cap_rejected():
    with pytest.raises(ValueError):
        mvie_factor(tangent_polygon(8), x_max=0.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_mvie_satisfies_every_halfspace(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(9, 2))
    b = rng.uniform(0.5, 2.0, 9)
    Z = mvie_factor(HalfspaceSet(A, b))
    assert np.max(np.linalg.norm(A @ Z, axis=1) - b) <= 1e-6 * np.max(b)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 2 * np.pi))
def test_mvie_rotation_equivariant(theta):
    rng = np.random.default_rng(7)
    A = rng.normal(size=(7, 2))
    b = rng.uniform(0.5, 2.0, 7)
    Q = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    Z = mvie_factor(HalfspaceSet(A, b))
    Zr = mvie_factor(HalfspaceSet(A @ Q.T, b))
    assert np.linalg.norm(Zr - Q @ Z @ Q.T, "fro") <= 1e-4


def test_case_study_state_envelope_at_start(case_nominal, case_config):
    P = mvie(linearize_box_constraints(*case_config.state_box, case_nominal.states[0])).P
    root = np.sqrt(np.diag(P))
    np.testing.assert_allclose(root, [0.19, 0.12, 0.12, 0.14], rtol=0.15)
    np.testing.assert_allclose(P, np.diag(np.diag(P)), atol=0)


# --- input envelope -------------------------------------------------------------


def test_torque_box_around_goal_input():
    hs = linearize_box_constraints([-40.0, -40.0], [40.0, 40.0], [-8.52, -2.37])
    R = input_envelope(hs)
    np.testing.assert_allclose(np.sqrt(np.diag(R)), [31.48, 37.63], atol=1e-9)


def test_case_study_input_envelope_at_start(case_nominal, case_config):
    R = input_envelope(linearize_box_constraints(*case_config.input_box, case_nominal.inputs[0]))
    np.testing.assert_allclose(np.sqrt(np.diag(R)), [28.56, 37.62], rtol=0.15)


def test_symmetric_input_box():
    R = input_envelope(linearize_box_constraints([-3.0, -3.0], [3.0, 3.0], [0.0, 0.0]))
    np.testing.assert_allclose(R, 9.0 * np.eye(2))


# --- segment envelopes ----------------------------------------------------------


def test_constant_steps_pass_through():
    rng = np.random.default_rng(0)
    P = random_spd(rng, 3)
    R = random_spd(rng, 2)
    Pe, Re = segment_envelopes(np.stack([P] * 4), np.stack([R] * 4))
    np.testing.assert_allclose(Pe, P, atol=1e-6)
    np.testing.assert_allclose(Re, R, atol=1e-6)


def test_single_step_pass_through_diagonal():
    Pe, Re = segment_envelopes(np.diag([1.0, 2.0])[None], np.diag([3.0])[None])
    np.testing.assert_array_equal(Pe, np.diag([1.0, 2.0]))
    np.testing.assert_array_equal(Re, np.diag([3.0]))


def test_two_diagonal_steps():
    Pe, Re = segment_envelopes(np.stack([np.diag([1.0, 2.0]), np.diag([2.0, 1.0])]), np.stack([np.eye(1)] * 2))
    assert np.linalg.eigvalsh(Pe - np.diag([2.0, 2.0]))[0] >= -1e-12
    for P in (np.diag([1.0, 2.0]), np.diag([2.0, 1.0])):
        assert np.linalg.eigvalsh(Pe - P)[0] >= -1e-12


def test_empty_segment_rejected():
    with pytest.raises(ValueError):
        segment_envelopes(np.zeros((0, 2, 2)), np.zeros((0, 1, 1)))


def test_nondiagonal_envelopes_dominate():
    rng = np.random.default_rng(3)
    Ps = np.stack([random_spd(rng, 3) for _ in range(5)])
    Rs = np.stack([random_spd(rng, 2) for _ in range(5)])
    Pe, Re = segment_envelopes(Ps, Rs)
    for P in Ps:
        assert np.linalg.eigvalsh(Pe - P)[0] >= -1e-8
    for R in Rs:
        assert np.linalg.eigvalsh(R - Re)[0] >= -1e-8


def test_containment_chain_case_study(case_envelopes):
    rng = np.random.default_rng(0)
    ks = range(100, 200)
    Pe, _ = case_envelopes.segment(ks)
    z = Ellipsoid(Pe).boundary_samples(rng, 1000)
    for k in ks:
        vals = np.einsum("ij,jk,ik->i", z, case_envelopes.P_min[k], z)
        assert np.all(vals <= 1.0 + 1e-9)


def test_envelope_cache_reuses(case_nominal, case_config):
    cache = EnvelopeCache()
    short = type(case_nominal)(case_nominal.states[:11], case_nominal.inputs[:10], 0.0, 0.01)
    a = cache.get(short, case_config.state_box, case_config.input_box)
    b = cache.get(short, case_config.state_box, case_config.input_box)
    assert a is b and len(cache) == 1


# --- input containment induced by the gain -------------------------------------


def _lemma_instance(rng, n=3, m=2):
    P = random_spd(rng, n)
    Lm = rng.normal(size=(m, n))
    R = Lm @ np.linalg.solve(P, Lm.T) + 1e-9 * np.eye(m)  # tight: Schur complement of [[R, L], [L^T, P]]
    M = np.block([[R, Lm], [Lm.T, P]])
    assert np.linalg.eigvalsh(M)[0] >= -1e-9
    return P, Lm, R, np.linalg.solve(P, Lm.T).T


def test_gain_maps_state_ellipsoid_into_input_envelope():
    """Boundary points of {eta' P eta <= 1} mapped by K = L P^-1 stay inside {xi' R^-1 xi <= 1}."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        P, Lm, R, K = _lemma_instance(rng)
        eta = Ellipsoid(P).boundary_samples(rng, 1000)
        xi = eta @ K.T
        worst = max(worst, float(np.max(np.einsum("ij,jk,ik->i", xi, np.linalg.inv(R), xi))))
    assert worst <= 1.0 + 1e-8, f"largest xi' R^-1 xi = {worst:.4g}"


def test_gain_maps_inverse_shape_ellipsoid_into_input_envelope():
    """Same block inequality, state set {eta' P^-1 eta <= 1}: the containment holds."""
    rng = np.random.default_rng(0)
    for _ in range(20):
        P, Lm, R, K = _lemma_instance(rng)
        eta = Ellipsoid(np.linalg.inv(P)).boundary_samples(rng, 1000)
        xi = eta @ K.T
        assert np.max(np.einsum("ij,jk,ik->i", xi, np.linalg.inv(R), xi)) <= 1.0 + 1e-8
