"""Brute-force evaluation of g(u) = integral over SO(3) of G(u, R) f(R n) dR.

The rotation integral is a product quadrature that is exact for the
band limits involved, and the sphere function f is evaluated at R n by direct
harmonic synthesis from its coefficients. No closed-form simplification is
used, so agreement with the spectral operators certifies them.

Two normalizations of dR are supported: ``"normalized"`` (total mass 1) and
``"euler"`` (d alpha sin(beta) d beta d gamma, total mass 8 pi^2). The
per-degree constant 2 pi sqrt(4 pi / (2l+1)) relating a zonal profile to its
transfer function holds for the latter.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import InvalidArgument, ResolutionError
from .harmonics import legendre_all, sph_harm_table
from .operators import EquivariantKernel, InvariantKernel
from .sht import get_plan, m_multiplicity, triangle_mask
from .so3 import so3_quadrature
from .sphere import GridField

FORMS = ("equivariant", "invariant", "anisotropic", "generalized-anisotropic")
MEASURES = {"normalized": 1.0, "euler": 8 * math.pi**2}
NORTH = np.array([0.0, 0.0, 1.0])
_NODE_CHUNK = 256


@dataclasses.dataclass(frozen=True, eq=False)
class GreensFunctionSpec:
    """A scalar Green's function in one of four structural forms.

    equivariant: G(R^-1 u), profile given by ``coeffs`` (half table over (l, m)).
    invariant: G(u), profile given by ``coeffs``.
    anisotropic: sum_l g_l P_l(u . R d), one direction.
    generalized-anisotropic: sum_l g_l P_l(u . R d_l), one direction per degree.
    """

    form: str
    coeffs: np.ndarray | None = None  # (L+1, L+1) complex
    legendre_weights: np.ndarray | None = None  # g_l, (L+1,)
    directions: np.ndarray | None = None  # (3,) or (L+1, 3)
    measure: str = "normalized"

    def __post_init__(self):
        if self.form not in FORMS:
            raise InvalidArgument(f"unknown form {self.form!r}")
        if self.measure not in MEASURES:
            raise InvalidArgument(f"unknown measure {self.measure!r}")
        if self.form in ("equivariant", "invariant"):
            c = np.asarray(self.coeffs, dtype=complex)
            if c.ndim != 2 or c.shape[0] != c.shape[1]:
                raise InvalidArgument("profile coefficients must be an (L+1, L+1) half table")
            object.__setattr__(self, "coeffs", c * triangle_mask(c.shape[0] - 1))
        else:
            g = np.asarray(self.legendre_weights, dtype=float)
            d = np.asarray(self.directions, dtype=float)
            if g.ndim != 1:
                raise InvalidArgument("legendre_weights must be one-dimensional")
            want = (3,) if self.form == "anisotropic" else (g.size, 3)
            if d.shape != want:
                raise InvalidArgument(f"directions must have shape {want}")
            if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > 1e-12):
                raise InvalidArgument("directions must be unit vectors")
            object.__setattr__(self, "legendre_weights", g)
            object.__setattr__(self, "directions", d)

    @property
    def degree(self) -> int:
        if self.coeffs is not None and self.form in ("equivariant", "invariant"):
            return self.coeffs.shape[0] - 1
        return self.legendre_weights.size - 1

    @property
    def mass(self) -> float:
        return MEASURES[self.measure]

    def per_degree_directions(self) -> np.ndarray:
        if self.form == "anisotropic":
            return np.broadcast_to(self.directions, (self.degree + 1, 3))
        return self.directions


def _synthesize_at(half: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Real field with half-table coefficients (L+1, L+1, C) at points (..., 3) -> (..., C)."""
    lmax = half.shape[0] - 1
    y = sph_harm_table(lmax, points)  # (L+1, L+1, ...)
    kappa = m_multiplicity(lmax)
    return np.einsum("lm...,lmc->...c", y * kappa[(...,) + (None,) * (y.ndim - 2)], half).real


def _kernel_values(spec: GreensFunctionSpec, u: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """G(u_i, R_k) for grid points u (N, 3) and node matrices (K, 3, 3) -> (N, K)."""
    if spec.form == "equivariant":
        pulled = np.einsum("kab,na->nkb", mats, u)  # R^T u
        return _synthesize_at(spec.coeffs[:, :, None], pulled)[..., 0]
    if spec.form == "invariant":
        vals = _synthesize_at(spec.coeffs[:, :, None], u)[..., 0]
        return np.broadcast_to(vals[:, None], (u.shape[0], mats.shape[0]))
    g = spec.legendre_weights
    dirs = spec.per_degree_directions()
    out = np.zeros((u.shape[0], mats.shape[0]))
    for l in range(g.size):
        if g[l] == 0.0:
            continue
        rd = mats @ dirs[l]  # (K, 3)
        cosines = np.clip(u @ rd.T, -1.0, 1.0)
        out += g[l] * legendre_all(l, cosines)[l]
    return out


def oracle_apply(spec: GreensFunctionSpec, f: GridField, lmax: int, order: int | None = None) -> GridField:
    """g on the grid of ``f``, with f band-limited at ``lmax``.

    ``order`` is the SO(3) quadrature order; it must be at least
    degree(G) + lmax so that the integrand is integrated exactly.
    """
    need = spec.degree + lmax
    order = max(need, 2 * lmax) if order is None else order
    if order < need:
        raise ResolutionError(f"quadrature order {order} below required {need}")
    plan = get_plan(f.grid, lmax)
    half = plan.forward(f.values)
    quad = so3_quadrature(order)
    mats = quad.matrices()
    u = f.grid.points.reshape(-1, 3)
    g = np.zeros((u.shape[0], f.channels))
    for lo in range(0, len(quad), _NODE_CHUNK):
        sl = slice(lo, lo + _NODE_CHUNK)
        f_rn = _synthesize_at(half, mats[sl, :, 2])  # R n is the third column; (K, C)
        kern = _kernel_values(spec, u, mats[sl])
        g += (kern * quad.weights[sl]) @ f_rn
    g *= spec.mass
    return GridField(f.grid, g.reshape(f.grid.nlat, f.grid.nlon, f.channels))


def transfer_function_of(spec: GreensFunctionSpec) -> np.ndarray:
    """Per-degree multiplier realized by a zonal equivariant Green's function.

    Under the Euler measure this is 2 pi sqrt(4 pi / (2l+1)) G_l0; the
    normalized measure divides by 8 pi^2.
    """
    if spec.form != "equivariant":
        raise InvalidArgument("transfer function is defined for the equivariant form")
    c = spec.coeffs
    off = np.abs(c[:, 1:]).max() if c.shape[1] > 1 else 0.0
    if off > 1e-12 * max(1.0, np.abs(c).max()):
        raise InvalidArgument("profile is not zonal (nonzero m != 0 coefficients)")
    l = np.arange(c.shape[0])
    euler = 2 * math.pi * np.sqrt(4 * math.pi / (2 * l + 1)) * c[:, 0].real
    return euler * spec.mass / MEASURES["euler"]


def equivariant_kernel_of(spec: GreensFunctionSpec) -> EquivariantKernel:
    return EquivariantKernel.from_transfer(transfer_function_of(spec))


def invariant_kernel_of(spec: GreensFunctionSpec) -> InvariantKernel:
    """Single-channel invariant kernel equal to the invariant-form Green's function.

    The rotation integral of f(R n) is C_f / (4 pi) times the measure mass.
    """
    if spec.form != "invariant":
        raise InvalidArgument("expected an invariant-form spec")
    shape = spec.coeffs[:, :, None] * (spec.mass / (4 * math.pi))
    return InvariantKernel(shape.astype(complex), np.ones((1, 1)))


def anisotropic_closed_form(spec: GreensFunctionSpec, half: np.ndarray) -> np.ndarray:
    """Coefficients g_l c_lm P_l(n . d_l) / (2l+1) (times the measure mass)."""
    if spec.form not in ("anisotropic", "generalized-anisotropic"):
        raise InvalidArgument("expected an anisotropic-form spec")
    lmax = half.shape[0] - 1
    g = np.zeros(lmax + 1)
    n = min(lmax + 1, spec.legendre_weights.size)
    g[:n] = spec.legendre_weights[:n]
    dirs = np.zeros((lmax + 1, 3))
    dirs[:, 2] = 1.0
    dirs[:n] = spec.per_degree_directions()[:n]
    l = np.arange(lmax + 1)
    p = np.array([legendre_all(k, dirs[k, 2])[k] for k in l])
    factor = spec.mass * g * p / (2 * l + 1)
    return half * factor[:, None, None]
