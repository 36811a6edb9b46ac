"""Fixed-corotated hyperelasticity.

    psi(F) = mu |F - R|^2 + lambda/2 (J - 1)^2
    P(F)   = 2 mu (F - R) + lambda (J - 1) J F^{-T}

with R the rotation of the polar decomposition F = R S and J = det F.
"""
from __future__ import annotations

import numpy as np
from numba import njit


class InversionError(ArithmeticError):
    """A deformation gradient with det(F) <= 0."""

    def __init__(self, msg, particle=None, step=None):
        super().__init__(msg)
        self.particle = particle
        self.step = step


@njit(cache=True)
def det3(F):
    return (F[0, 0] * (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1])
            - F[0, 1] * (F[1, 0] * F[2, 2] - F[1, 2] * F[2, 0])
            + F[0, 2] * (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0]))


@njit(cache=True)
def inv_transpose3(F, out):
    """out = F^{-T} (cofactor / det)."""
    d = det3(F)
    out[0, 0] = (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1]) / d
    out[0, 1] = (F[1, 2] * F[2, 0] - F[1, 0] * F[2, 2]) / d
    out[0, 2] = (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0]) / d
    out[1, 0] = (F[0, 2] * F[2, 1] - F[0, 1] * F[2, 2]) / d
    out[1, 1] = (F[0, 0] * F[2, 2] - F[0, 2] * F[2, 0]) / d
    out[1, 2] = (F[0, 1] * F[2, 0] - F[0, 0] * F[2, 1]) / d
    out[2, 0] = (F[0, 1] * F[1, 2] - F[0, 2] * F[1, 1]) / d
    out[2, 1] = (F[0, 2] * F[1, 0] - F[0, 0] * F[1, 2]) / d
    out[2, 2] = (F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]) / d
    return d


@njit(cache=True)
def polar_rotation(F, R):
    """Rotation factor of F (det F > 0) by scaled Newton iteration."""
    _polar(F, R, np.empty((3, 3)))


@njit(cache=True)
def _polar(F, X, Y):
    for a in range(3):
        for b in range(3):
            X[a, b] = F[a, b]
    for it in range(60):
        d = inv_transpose3(X, Y)
        # determinant scaling accelerates the early iterations
        g = abs(d) ** (-1.0 / 3.0) if it < 5 else 1.0
        diff = 0.0
        for a in range(3):
            for b in range(3):
                nxt = 0.5 * (g * X[a, b] + Y[a, b] / g)
                diff = max(diff, abs(nxt - X[a, b]))
                X[a, b] = nxt
        if diff < 1e-15:
            break


@njit(cache=True)
def _psi_and_pk1(F, mu, lam, P):
    return _psi_and_pk1_s(F, mu, lam, P, np.empty((3, 3)), np.empty((3, 3)), np.empty((3, 3)))


@njit(cache=True)
def _psi_and_pk1_s(F, mu, lam, P, R, FinvT, scratch):
    """Scratch-buffer variant for the hot loops."""
    J = inv_transpose3(F, FinvT)
    _polar(F, R, scratch)
    psi = 0.0
    for a in range(3):
        for b in range(3):
            d = F[a, b] - R[a, b]
            psi += d * d
            P[a, b] = 2.0 * mu * d + lam * (J - 1.0) * J * FinvT[a, b]
    return mu * psi + 0.5 * lam * (J - 1.0) ** 2


@njit(cache=True)
def _batch_psi_pk1(Fs, mu, lam, P_out, psi_out):
    n = Fs.shape[0]
    for i in range(n):
        if det3(Fs[i]) <= 0.0:
            return i
        psi_out[i] = _psi_and_pk1(Fs[i], mu, lam, P_out[i])
    return -1


def psi_and_pk1(F, material):
    """Energy density and first Piola-Kirchhoff stress for one F or a batch."""
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 2
    Fs = np.ascontiguousarray(F.reshape(-1, 3, 3))
    P = np.empty_like(Fs)
    psi = np.empty(len(Fs))
    bad = _batch_psi_pk1(Fs, material.lame_mu, material.lame_lambda, P, psi)
    if bad >= 0:
        raise InversionError(f"det(F) <= 0 at particle {bad}", particle=int(bad))
    if single:
        return psi[0], P[0]
    return psi, P


def pk1_stress(F, material):
    return psi_and_pk1(F, material)[1]


def energy_density(F, material):
    return psi_and_pk1(F, material)[0]


def polar(F):
    """Rotation factor(s) of F; batch-aware convenience wrapper."""
    F = np.asarray(F, dtype=np.float64)
    Fs = F.reshape(-1, 3, 3)
    R = np.empty_like(Fs)
    for i in range(len(Fs)):
        if det3(Fs[i]) <= 0:
            raise InversionError(f"det(F) <= 0 at particle {i}", particle=i)
        polar_rotation(np.ascontiguousarray(Fs[i]), R[i])
    return R.reshape(F.shape)
