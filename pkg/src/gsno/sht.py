"""Forward/inverse spherical harmonic transforms on tensor-product grids.

Coefficients of real fields are stored for m >= 0 only, as complex arrays of
shape (..., lmax+1, lmax+1, channels) indexed [l, m, c]; entries with m > l
are zero and the m < 0 half follows from c_{l,-m} = (-1)^m conj(c_{l,m}).

The forward transform silently truncates at lmax: content above lmax aliases
into the retained coefficients unless the caller band-limits the input.
"""

from __future__ import annotations

import dataclasses
import functools

import numpy as np

from .errors import InvalidArgument, ResolutionError
from .harmonics import assoc_legendre
from .sphere import GridField, SphericalGrid, grid_from_descriptor


@dataclasses.dataclass(frozen=True, eq=False)
class SpectralCoeffs:
    lmax: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim < 3 or v.shape[-3:-1] != (self.lmax + 1, self.lmax + 1):
            raise InvalidArgument(f"coefficient shape {v.shape} inconsistent with lmax={self.lmax}")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def full(self) -> np.ndarray:
        return to_full(self.values)

    def power(self) -> np.ndarray:
        """Per-degree power sum_{m=-l..l} |c_lm|^2, shape (..., lmax+1, C)."""
        return degree_power(self.values)


def m_multiplicity(lmax: int) -> np.ndarray:
    """1 for m = 0 and 2 for m > 0: how often a stored entry appears in the full table."""
    k = np.full(lmax + 1, 2.0)
    k[0] = 1.0
    return k


def triangle_mask(lmax: int) -> np.ndarray:
    l = np.arange(lmax + 1)
    return l[None, :] <= l[:, None]


def to_full(half: np.ndarray) -> np.ndarray:
    """(..., L+1, L+1, C) half table -> (..., L+1, 2L+1, C) with index m + L."""
    lmax = half.shape[-3] - 1
    out = np.zeros(half.shape[:-2] + (2 * lmax + 1, half.shape[-1]), dtype=complex)
    out[..., lmax:, :] = half
    sign = (-1.0) ** np.arange(1, lmax + 1)
    neg = sign[:, None] * np.conj(half[..., 1:, :])
    out[..., :lmax, :] = neg[..., ::-1, :]
    return out


def from_full(full: np.ndarray) -> np.ndarray:
    lmax = (full.shape[-2] - 1) // 2
    return np.ascontiguousarray(full[..., lmax:, :])


def degree_power(half: np.ndarray) -> np.ndarray:
    lmax = half.shape[-3] - 1
    k = m_multiplicity(lmax)
    return np.einsum("...lmc,m->...lc", np.abs(half) ** 2, k)


def spectral_inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Re sum over the full (l, m) table of a * conj(b), per channel."""
    lmax = a.shape[-3] - 1
    k = m_multiplicity(lmax)
    return np.einsum("...lmc,m->...c", (a * np.conj(b)).real, k)


def check_resolution(grid: SphericalGrid, lmax: int) -> None:
    if lmax < 0:
        raise InvalidArgument("lmax must be nonnegative")
    if lmax > grid.max_exact_degree():
        need = "nlat >= lmax+1" if grid.kind == "gauss-legendre" else "nlat >= 2*lmax+1"
        raise ResolutionError(
            f"{grid!r} cannot resolve lmax={lmax} ({need} and nlon >= 2*lmax+1)"
        )


class SHTPlan:
    """Precomputed Legendre tables for one (grid, lmax) pair.

    Transforms act on the trailing (nlat, nlon, C) / (L+1, L+1, C) axes and
    broadcast over any leading batch axes.
    """

    def __init__(self, grid: SphericalGrid, lmax: int):
        check_resolution(grid, lmax)
        self.grid = grid
        self.lmax = lmax
        # [l, m, ring]
        self.legendre = assoc_legendre(lmax, grid.ring_cos, grid.ring_sin)
        self.legendre.flags.writeable = False
        self.ring_weights = grid.quad_weights
        self._weighted = self.legendre * self.ring_weights
        self._kappa = m_multiplicity(lmax)

    def _analysis(self, values: np.ndarray, table: np.ndarray) -> np.ndarray:
        spec = np.fft.rfft(values, axis=-2)[..., : self.lmax + 1, :]
        return np.einsum("lmi,...imc->...lmc", table, spec, optimize=True)

    def _synthesis(self, half: np.ndarray) -> np.ndarray:
        ring = np.einsum("lmi,...lmc->...imc", self.legendre, half, optimize=True)
        nlon = self.grid.nlon
        # irfft(X) * n == X_0 + 2 Re sum_{k>0} X_k e^{ik phi}
        return np.fft.irfft(ring, n=nlon, axis=-2) * nlon

    def forward(self, values: np.ndarray) -> np.ndarray:
        """c_lm = sum_grid w f conj(Y_l^m)."""
        return self._analysis(np.asarray(values, dtype=float), self._weighted)

    def inverse(self, half: np.ndarray) -> np.ndarray:
        """f = sum_{l, |m|<=l} c_lm Y_l^m, real-valued by conjugate symmetry."""
        half = np.asarray(half)
        if half.shape[-3:-1] != (self.lmax + 1, self.lmax + 1):
            raise InvalidArgument(f"coefficients {half.shape} do not match lmax={self.lmax}")
        return self._synthesis(half)

    # Euclidean vector-Jacobian products (real and imaginary parts of the
    # stored half table treated as independent reals).

    def inverse_vjp(self, grad_values: np.ndarray) -> np.ndarray:
        g = self._analysis(np.asarray(grad_values, dtype=float), self.legendre)
        return g * self._kappa[:, None]

    def forward_vjp(self, grad_half: np.ndarray) -> np.ndarray:
        halved = grad_half / self._kappa[:, None]
        return self._synthesis(halved) * self.ring_weights[:, None, None]


@functools.lru_cache(maxsize=64)
def _plan_for_key(kind: str, nlat: int, nlon: int, lmax: int) -> SHTPlan:
    grid = grid_from_descriptor({"kind": kind, "nlat": nlat, "nlon": nlon})
    return SHTPlan(grid, lmax)


def get_plan(grid: SphericalGrid, lmax: int) -> SHTPlan:
    check_resolution(grid, lmax)
    return _plan_for_key(grid.kind, grid.nlat, grid.nlon, lmax)


def sht_forward(f: GridField, lmax: int) -> SpectralCoeffs:
    plan = get_plan(f.grid, lmax)
    return SpectralCoeffs(lmax, plan.forward(f.values))


def sht_inverse(c: SpectralCoeffs, grid: SphericalGrid) -> GridField:
    plan = get_plan(grid, c.lmax)
    return GridField(grid, plan.inverse(c.values))


def adjoint_forward(c: SpectralCoeffs, grid: SphericalGrid) -> GridField:
    """Adjoint of SHT: <SHT f, c>_spec == <f, adjoint_forward(c)>_w."""
    return sht_inverse(c, grid)


def adjoint_inverse(f: GridField, lmax: int) -> SpectralCoeffs:
    """Adjoint of ISHT: <ISHT c, f>_w == <c, adjoint_inverse(f)>_spec."""
    return sht_forward(f, lmax)
