import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from tactile_rom.config import MaterialParams
from tactile_rom.constitutive import (InversionError, energy_density, pk1_stress, polar,
                                      psi_and_pk1)

MAT = MaterialParams()


def near_identity(seed, scale=0.3):
    rng = np.random.default_rng(seed)
    return np.eye(3) + scale * rng.uniform(-1, 1, (3, 3))


def fd_stress(F, h=1e-6):
    P = np.empty((3, 3))
    for a in range(3):
        for b in range(3):
            Fp, Fm = F.copy(), F.copy()
            Fp[a, b] += h
            Fm[a, b] -= h
            P[a, b] = (energy_density(Fp, MAT) - energy_density(Fm, MAT)) / (2 * h)
    return P


def test_identity_is_stress_free():
    psi, P = psi_and_pk1(np.eye(3), MAT)
    assert psi == 0.0
    assert np.abs(P).max() == 0.0


@pytest.mark.parametrize("R", [np.diag([1.0, -1.0, -1.0]),
                               np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]]),
                               np.array([[0.0, 0, 1], [1, 0, 0], [0, 1, 0]])])
def test_exact_rotations_are_stress_free(R):
    psi, P = psi_and_pk1(R, MAT)
    assert abs(psi) < 1e-10
    assert np.abs(P).max() < 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_rotations_are_stress_free(seed):
    # a float rotation has det(R) - 1 ~ 1e-16, which lambda amplifies to ~1e-10 Pa,
    # so measure stress in units of the shear modulus
    R = Rotation.random(random_state=seed).as_matrix()
    psi, P = psi_and_pk1(R, MAT)
    assert abs(psi) / MAT.lame_mu < 1e-10
    assert np.abs(P).max() / MAT.lame_mu < 1e-10


@pytest.mark.parametrize("seed", range(25))
def test_stress_matches_energy_gradient(seed):
    F = near_identity(seed)
    if np.linalg.det(F) < 0.2:
        F = F + 0.5 * np.eye(3)
    P = pk1_stress(F, MAT)
    Pfd = fd_stress(F)
    assert np.linalg.norm(P - Pfd) / np.linalg.norm(P) < 1e-4


def test_uniaxial_stretch_by_hand():
    s = 1.1
    F = np.diag([s, 1.0, 1.0])
    mu, lam = MAT.lame_mu, MAT.lame_lambda
    J = s
    expect = np.diag([2 * mu * (s - 1) + lam * (J - 1), lam * (J - 1) * J, lam * (J - 1) * J])
    assert np.allclose(pk1_stress(F, MAT), expect, rtol=1e-12, atol=1e-9)
    assert energy_density(F, MAT) == pytest.approx(mu * (s - 1) ** 2 + 0.5 * lam * (s - 1) ** 2,
                                                   rel=1e-12)


def test_batch_matches_single():
    Fs = np.stack([near_identity(s) for s in range(8)])
    psi, P = psi_and_pk1(Fs, MAT)
    for i in range(8):
        p1, P1 = psi_and_pk1(Fs[i], MAT)
        assert psi[i] == p1
        assert np.array_equal(P[i], P1)


def test_inverted_gradient_raises_with_index():
    Fs = np.tile(np.eye(3), (4, 1, 1))
    Fs[2] = np.diag([1.0, 1.0, -0.5])
    with pytest.raises(InversionError) as err:
        psi_and_pk1(Fs, MAT)
    assert err.value.particle == 2


def test_polar_factor_is_a_rotation():
    F = near_identity(3, 0.5) + np.eye(3)
    R = polar(F)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    S = R.T @ F
    assert np.allclose(S, S.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(0.5 * (S + S.T)) > 0)


matrices = st.lists(st.floats(-0.4, 0.4), min_size=9, max_size=9).map(
    lambda v: np.eye(3) + np.reshape(v, (3, 3)))


@settings(max_examples=60, deadline=None)
@given(matrices, st.integers(0, 2**31))
def test_energy_is_frame_indifferent(F, seed):
    if np.linalg.det(F) <= 0.05:
        return
    Q = Rotation.random(random_state=seed).as_matrix()
    psi, P = psi_and_pk1(F, MAT)
    psiq, Pq = psi_and_pk1(Q @ F, MAT)
    assert psiq == pytest.approx(psi, rel=1e-9, abs=1e-9)
    # P transforms as Q P
    assert np.allclose(Pq, Q @ P, rtol=1e-8, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(matrices)
def test_energy_nonnegative(F):
    if np.linalg.det(F) <= 0.05:
        return
    assert energy_density(F, MAT) >= 0.0
