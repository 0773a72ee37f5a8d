"""Rotations, Wigner matrices, and exact product quadrature on SO(3).

Euler angles follow the ZYZ convention, R = Rz(alpha) Ry(beta) Rz(gamma),
acting actively on points. A rotated field is (R f)(u) = f(R^-1 u), whose
coefficients are c'_{l m'} = sum_m D^l_{m' m}(R) c_{l m} with

    D^l_{m' m}(alpha, beta, gamma) = exp(-i m' alpha) d^l_{m' m}(beta) exp(-i m gamma).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.special import gammaln

from .errors import InvalidArgument
from .sht import SpectralCoeffs, from_full, get_plan, to_full
from .sphere import GridField


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(b: float) -> np.ndarray:
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclasses.dataclass(frozen=True)
class Rotation:
    alpha: float
    beta: float
    gamma: float

    @classmethod
    def identity(cls) -> Rotation:
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def random(cls, rng: np.random.Generator) -> Rotation:
        """Haar-uniform random rotation."""
        return cls(
            float(rng.uniform(0, 2 * np.pi)),
            float(np.arccos(rng.uniform(-1, 1))),
            float(rng.uniform(0, 2 * np.pi)),
        )

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Rotation:
        m = np.asarray(m, dtype=float)
        beta = math.atan2(math.hypot(m[2, 0], m[2, 1]), m[2, 2])
        if math.sin(beta) > 1e-12:
            alpha = math.atan2(m[1, 2], m[0, 2])
            gamma = math.atan2(m[2, 1], -m[2, 0])
        else:
            # gimbal lock: only alpha +- gamma is defined; put everything in alpha
            gamma = 0.0
            if m[2, 2] > 0:
                alpha = math.atan2(m[1, 0], m[0, 0])
            else:
                alpha = math.atan2(-m[1, 0], -m[0, 0])
        return cls(alpha, beta, gamma)

    @classmethod
    def about_axis(cls, axis, angle: float) -> Rotation:
        """Right-handed rotation by ``angle`` about ``axis``."""
        k = np.asarray(axis, dtype=float)
        k = k / np.linalg.norm(k)
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        m = np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * kx @ kx
        return cls.from_matrix(m)

    def matrix(self) -> np.ndarray:
        return _rz(self.alpha) @ _ry(self.beta) @ _rz(self.gamma)

    def inverse(self) -> Rotation:
        return Rotation(-self.gamma, -self.beta, -self.alpha)

    def compose(self, other: Rotation) -> Rotation:
        """self after other."""
        return Rotation.from_matrix(self.matrix() @ other.matrix())

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.matrix().T


def _log_fact(n):
    return gammaln(np.asarray(n, dtype=float) + 1.0)


def _wigner_d_single_term(l: int, mp: np.ndarray, m: np.ndarray, beta: float) -> np.ndarray:
    """Wigner's sum formula, evaluated only where l == max(|m'|, |m|) (one term)."""
    c, s = math.cos(beta / 2), math.sin(beta / 2)
    smin = np.maximum(0, m - mp)
    smax = np.minimum(l + m, l - mp)
    out = np.zeros(mp.shape)
    for k in np.ndindex(mp.shape):
        a, b = int(mp[k]), int(m[k])
        total = 0.0
        for sidx in range(int(smin[k]), int(smax[k]) + 1):
            logc = 0.5 * (_log_fact(l + a) + _log_fact(l - a) + _log_fact(l + b) + _log_fact(l - b))
            logc -= _log_fact(l + b - sidx) + _log_fact(sidx) + _log_fact(a - b + sidx) + _log_fact(l - a - sidx)
            sign = -1.0 if (a - b + sidx) % 2 else 1.0
            total += sign * math.exp(logc) * c ** (2 * l + b - a - 2 * sidx) * s ** (a - b + 2 * sidx)
        out[k] = total
    return out


def wigner_d_all(lmax: int, beta: float) -> np.ndarray:
    """Small-d matrices d^l_{m' m}(beta) for l = 0..lmax.

    Returns a zero-padded array of shape (lmax+1, 2*lmax+1, 2*lmax+1) indexed
    [l, m' + lmax, m + lmax]. Built by the three-term recursion in degree,
    seeded at l = max(|m'|, |m|) from the closed form.
    """
    if lmax < 0:
        raise InvalidArgument("lmax must be nonnegative")
    n = 2 * lmax + 1
    mvals = np.arange(-lmax, lmax + 1)
    mp, m = np.meshgrid(mvals, mvals, indexing="ij")
    lmin = np.maximum(np.abs(mp), np.abs(m))
    cb = math.cos(beta)
    out = np.zeros((lmax + 1, n, n))
    for l in range(lmax + 1):
        seed = lmin == l
        if seed.any():
            out[l][seed] = _wigner_d_single_term(l, mp[seed], m[seed], beta)
        rec = lmin < l
        if not rec.any():
            continue
        a, b = mp[rec].astype(float), m[rec].astype(float)
        prev1 = out[l - 1][rec]
        norm = l * (2 * l - 1) / np.sqrt((l * l - a * a) * (l * l - b * b))
        if l > 1:
            first = (cb - a * b / (l * (l - 1))) * prev1
        else:
            first = cb * prev1
        has_prev2 = lmin[rec] < l - 1
        prev2 = out[l - 2][rec] if l >= 2 else np.zeros_like(prev1)
        with np.errstate(invalid="ignore", divide="ignore"):
            c2 = np.sqrt(((l - 1) ** 2 - a * a) * ((l - 1) ** 2 - b * b)) / ((l - 1) * (2 * l - 1))
        second = np.where(has_prev2, c2 * prev2, 0.0)
        out[l][rec] = norm * (first - second)
    return out


def wigner_d(l: int, beta: float) -> np.ndarray:
    """d^l(beta) as a real (2l+1, 2l+1) orthogonal matrix indexed [m'+l, m+l]."""
    if l < 0:
        raise InvalidArgument("degree must be nonnegative")
    return wigner_d_all(l, beta)[l]


def wigner_D_all(lmax: int, rot: Rotation) -> np.ndarray:
    d = wigner_d_all(lmax, rot.beta)
    mvals = np.arange(-lmax, lmax + 1)
    left = np.exp(-1j * mvals * rot.alpha)
    right = np.exp(-1j * mvals * rot.gamma)
    return left[None, :, None] * d * right[None, None, :]


def wigner_D(l: int, rot: Rotation) -> np.ndarray:
    """Complex D^l(R), shape (2l+1, 2l+1), indexed [m'+l, m+l]."""
    return _block(wigner_D_all(l, rot), l)


def _block(padded: np.ndarray, l: int) -> np.ndarray:
    lmax = (padded.shape[-1] - 1) // 2
    sl = slice(lmax - l, lmax + l + 1)
    return padded[l, sl, sl]


def rotate_coeffs(c: SpectralCoeffs, rot: Rotation) -> SpectralCoeffs:
    return SpectralCoeffs(c.lmax, rotate_half(c.values, rot))


def rotate_half(half: np.ndarray, rot: Rotation) -> np.ndarray:
    lmax = half.shape[-3] - 1
    dmat = wigner_D_all(lmax, rot)
    full = to_full(half)
    rotated = np.einsum("lab,...lbc->...lac", dmat, full)
    return from_full(rotated)


def rotate_field(f: GridField, rot: Rotation, lmax: int | None = None) -> GridField:
    """(R f)(u) = f(R^-1 u) for a field band-limited at ``lmax``."""
    lmax = f.grid.max_exact_degree() if lmax is None else lmax
    plan = get_plan(f.grid, lmax)
    half = plan.forward(f.values)
    return GridField(f.grid, plan.inverse(rotate_half(half, rot)))


@dataclasses.dataclass(frozen=True, eq=False)
class SO3Quadrature:
    """Product rule on SO(3): weights sum to 1 (normalized Haar measure)."""

    order: int
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.weights.size

    def rotations(self):
        for a, b, g in zip(self.alpha, self.beta, self.gamma):
            yield Rotation(float(a), float(b), float(g))

    def matrices(self) -> np.ndarray:
        """All node rotation matrices, shape (N, 3, 3)."""
        ca, sa = np.cos(self.alpha), np.sin(self.alpha)
        cb, sb = np.cos(self.beta), np.sin(self.beta)
        cg, sg = np.cos(self.gamma), np.sin(self.gamma)
        m = np.empty(self.alpha.shape + (3, 3))
        m[:, 0, 0] = ca * cb * cg - sa * sg
        m[:, 0, 1] = -ca * cb * sg - sa * cg
        m[:, 0, 2] = ca * sb
        m[:, 1, 0] = sa * cb * cg + ca * sg
        m[:, 1, 1] = -sa * cb * sg + ca * cg
        m[:, 1, 2] = sa * sb
        m[:, 2, 0] = -sb * cg
        m[:, 2, 1] = sb * sg
        m[:, 2, 2] = cb
        return m

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Sum over the leading node axis against the weights."""
        return np.tensordot(self.weights, values, axes=(0, 0))


def so3_quadrature(order: int) -> SO3Quadrature:
    """Exact for every Wigner function D^l_{m'm} with l <= order.

    Uniform (2*order+1)-point rules in alpha and gamma, Gauss-Legendre in
    cos(beta) with order+1 nodes.
    """
    if order < 0:
        raise InvalidArgument("quadrature order must be nonnegative")
    n_ag = 2 * order + 1
    ang = 2 * np.pi * np.arange(n_ag) / n_ag
    x, wx = np.polynomial.legendre.leggauss(order + 1)
    a, b, g = np.meshgrid(ang, np.arccos(x), ang, indexing="ij")
    w = np.broadcast_to((wx / 2.0)[None, :, None], a.shape) / (n_ag * n_ag)
    return SO3Quadrature(order, a.ravel(), b.ravel(), g.ravel(), np.ascontiguousarray(w).ravel())
