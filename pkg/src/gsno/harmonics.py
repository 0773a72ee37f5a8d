"""Legendre polynomials, normalized associated Legendre functions and Y_l^m.

Conventions: orthonormal spherical harmonics with the Condon-Shortley phase,

    Y_l^m(theta, phi) = Pbar_l^m(cos theta) * exp(i m phi),
    Y_l^{-m} = (-1)^m conj(Y_l^m).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgument
from .sphere import angles_of

_X_SLACK = 1e-12


def _check_unit_interval(x: np.ndarray) -> np.ndarray:
    if np.any(~np.isfinite(x)) or np.any(np.abs(x) > 1.0 + _X_SLACK):
        raise InvalidArgument("Legendre argument must lie in [-1, 1]")
    return np.clip(x, -1.0, 1.0)


def legendre_all(lmax: int, x) -> np.ndarray:
    """P_0(x) .. P_lmax(x) by the three-term recurrence; shape (lmax+1, *x.shape)."""
    x = _check_unit_interval(np.asarray(x, dtype=float))
    out = np.empty((lmax + 1,) + x.shape)
    out[0] = 1.0
    if lmax >= 1:
        out[1] = x
    for l in range(1, lmax):
        out[l + 1] = ((2 * l + 1) * x * out[l] - l * out[l - 1]) / (l + 1)
    return out


def legendre_derivative_all(lmax: int, x, table: np.ndarray | None = None) -> np.ndarray:
    """P_l'(x) for l = 0..lmax, using the analytic limit at x = +-1."""
    x = _check_unit_interval(np.asarray(x, dtype=float))
    p = legendre_all(lmax, x) if table is None else table
    out = np.zeros_like(p)
    if lmax == 0:
        return out
    l = np.arange(1, lmax + 1).reshape((-1,) + (1,) * x.ndim)
    interior = np.abs(x) < 1.0
    denom = np.where(interior, x * x - 1.0, 1.0)
    out[1:] = l * (x * p[1:] - p[:-1]) / denom
    # P_l'(+-1) = (+-1)^(l+1) l(l+1)/2
    edge_sign = np.where(x >= 0, 1.0, -1.0)
    edge = edge_sign ** (l + 1) * l * (l + 1) / 2.0
    out[1:] = np.where(interior, out[1:], edge)
    return out


def assoc_legendre(lmax: int, cos_theta, sin_theta=None) -> np.ndarray:
    """Orthonormalized associated Legendre functions Pbar_l^m for m >= 0.

    Returns shape (lmax+1, lmax+1, *cos_theta.shape) indexed [l, m]; entries
    with m > l are zero. The Condon-Shortley phase is included. The
    normalized recurrence stays bounded far beyond lmax = 256.
    """
    x = _check_unit_interval(np.asarray(cos_theta, dtype=float))
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x)) if sin_theta is None else np.asarray(sin_theta, float)
    p = np.zeros((lmax + 1, lmax + 1) + x.shape)
    pmm = np.full(x.shape, 1.0 / math.sqrt(4 * math.pi))
    for m in range(lmax + 1):
        if m > 0:
            pmm = -math.sqrt((2 * m + 1) / (2 * m)) * s * pmm
        p[m, m] = pmm
        if m + 1 > lmax:
            break
        p[m + 1, m] = math.sqrt(2 * m + 3) * x * pmm
        for l in range(m + 2, lmax + 1):
            a = math.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = math.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            p[l, m] = a * (x * p[l - 1, m] - b * p[l - 2, m])
    return p


def sph_harm_table(lmax: int, points) -> np.ndarray:
    """Y_l^m at an array of unit vectors (..., 3) for m >= 0: shape (lmax+1, lmax+1, ...)."""
    pts = np.asarray(points, dtype=float)
    theta, phi = angles_of(pts)
    norm = np.linalg.norm(pts, axis=-1)
    cos_t = np.clip(pts[..., 2] / norm, -1.0, 1.0)
    p = assoc_legendre(lmax, cos_t, np.sin(theta))
    m = np.arange(lmax + 1).reshape((1, -1) + (1,) * phi.ndim)
    return p * np.exp(1j * m * phi)


def sph_harm(l: int, m: int, u) -> complex:
    """Single orthonormal harmonic Y_l^m(u)."""
    if l < 0 or abs(m) > l:
        raise InvalidArgument(f"need |m| <= l, got l={l}, m={m}")
    y = sph_harm_table(l, np.asarray(u, dtype=float))[l, abs(m)]
    if m < 0:
        y = (-1) ** m * np.conj(y)
    return complex(y)


def sph_harm_full(lmax: int, points) -> np.ndarray:
    """Y_l^m for all -l <= m <= l: shape (lmax+1, 2*lmax+1, ...), index m + lmax."""
    pos = sph_harm_table(lmax, points)
    out = np.zeros((lmax + 1, 2 * lmax + 1) + pos.shape[2:], dtype=complex)
    out[:, lmax:] = pos
    for m in range(1, lmax + 1):
        out[:, lmax - m] = (-1) ** m * np.conj(pos[:, m])
    return out


def addition_theorem_check(l: int, u, v) -> float:
    """|sum_m Y_l^m(u) conj(Y_l^m(v)) - (2l+1)/(4pi) P_l(u.v)|."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    yu = sph_harm_full(l, u)[l]
    yv = sph_harm_full(l, v)[l]
    lhs = np.sum(yu * np.conj(yv))
    cosang = float(np.clip(np.dot(u, v), -1.0, 1.0))
    rhs = (2 * l + 1) / (4 * math.pi) * legendre_all(l, cosang)[l]
    return float(abs(lhs - rhs))
