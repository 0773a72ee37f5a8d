"""Spherical grids, unit vectors, and surface quadrature."""

from __future__ import annotations

import dataclasses
import math
from functools import cached_property
from typing import Literal

import numpy as np

from .errors import InvalidArgument

GridKind = Literal["gauss-legendre", "equiangular"]
GRID_KINDS = ("gauss-legendre", "equiangular")

NORTH_POLE = np.array([0.0, 0.0, 1.0])


@dataclasses.dataclass(frozen=True)
class UnitVector:
    x: float
    y: float
    z: float

    def __post_init__(self):
        norm2 = self.x * self.x + self.y * self.y + self.z * self.z
        if not abs(norm2 - 1.0) <= 1e-12:
            raise InvalidArgument(f"not a unit vector: |v|^2 = {norm2!r}")

    @classmethod
    def from_array(cls, v) -> UnitVector:
        v = np.asarray(v, dtype=float)
        v = v / np.linalg.norm(v)
        return cls(float(v[0]), float(v[1]), float(v[2]))

    @classmethod
    def from_angles(cls, theta: float, phi: float) -> UnitVector:
        st = math.sin(theta)
        return cls.from_array([st * math.cos(phi), st * math.sin(phi), math.cos(theta)])

    def __array__(self, dtype=None, copy=None):
        return np.array([self.x, self.y, self.z], dtype=dtype)

    @property
    def theta(self) -> float:
        return math.atan2(math.hypot(self.x, self.y), self.z)

    @property
    def phi(self) -> float:
        return math.atan2(self.y, self.x) % (2 * math.pi)


def angles_of(points) -> tuple[np.ndarray, np.ndarray]:
    """Colatitude and longitude of an array of 3-vectors (..., 3)."""
    p = np.asarray(points, dtype=float)
    theta = np.arctan2(np.hypot(p[..., 0], p[..., 1]), p[..., 2])
    phi = np.arctan2(p[..., 1], p[..., 0]) % (2 * np.pi)
    return theta, phi


def unit_vectors(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta) + 0 * phi], axis=-1)


def _fejer_weights(n: int) -> tuple[np.ndarray, np.ndarray]:
    # Fejer's first rule on Chebyshev points of the first kind (cell midpoints in theta).
    theta = (2 * np.arange(n) + 1) * np.pi / (2 * n)
    j = np.arange(1, n // 2 + 1)
    series = np.cos(2 * np.outer(theta, j)) / (4 * j**2 - 1)
    w = (2.0 / n) * (1.0 - 2.0 * series.sum(axis=1))
    return theta, w


@dataclasses.dataclass(frozen=True, eq=False)
class SphericalGrid:
    """Tensor-product grid on S^2 with per-ring quadrature weights.

    ``quad_weights[i]`` is the weight of every point on ring ``i``, so that
    ``quad_weights.sum() * nlon == 4*pi``.
    """

    kind: str
    nlat: int
    nlon: int
    colatitudes: np.ndarray
    longitudes: np.ndarray
    quad_weights: np.ndarray

    def descriptor(self) -> dict:
        return {"kind": self.kind, "nlat": self.nlat, "nlon": self.nlon}

    @property
    def key(self) -> tuple:
        return (self.kind, self.nlat, self.nlon)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nlat, self.nlon)

    @cached_property
    def ring_cos(self) -> np.ndarray:
        if self.kind == "gauss-legendre":
            return self._gl_nodes
        return np.cos(self.colatitudes)

    @cached_property
    def _gl_nodes(self) -> np.ndarray:
        x, _ = np.polynomial.legendre.leggauss(self.nlat)
        return x[::-1].copy()

    @cached_property
    def ring_sin(self) -> np.ndarray:
        return np.sin(self.colatitudes)

    @cached_property
    def points(self) -> np.ndarray:
        """Unit vectors of every grid point, shape (nlat, nlon, 3)."""
        th, ph = np.meshgrid(self.colatitudes, self.longitudes, indexing="ij")
        return unit_vectors(th, ph)

    @cached_property
    def point_weights(self) -> np.ndarray:
        """Quadrature weights broadcast to shape (nlat, nlon)."""
        return np.repeat(self.quad_weights[:, None], self.nlon, axis=1)

    def max_exact_degree(self) -> int:
        """Largest L for which SHT/ISHT round trips are exact on this grid."""
        lat_limit = self.nlat - 1 if self.kind == "gauss-legendre" else (self.nlat - 1) // 2
        return min(lat_limit, (self.nlon - 1) // 2)

    def __repr__(self):
        return f"SphericalGrid(kind={self.kind!r}, nlat={self.nlat}, nlon={self.nlon})"


def make_grid(kind: str = "gauss-legendre", nlat: int = 16, nlon: int = 32) -> SphericalGrid:
    if kind not in GRID_KINDS:
        raise InvalidArgument(f"unknown grid kind {kind!r}; expected one of {GRID_KINDS}")
    if int(nlat) != nlat or int(nlon) != nlon:
        raise InvalidArgument("grid sizes must be integers")
    nlat, nlon = int(nlat), int(nlon)
    if nlat < 2 or nlon < 4:
        raise InvalidArgument(f"grid too small: nlat={nlat} (>=2), nlon={nlon} (>=4)")

    if kind == "gauss-legendre":
        x, w = np.polynomial.legendre.leggauss(nlat)
        # leggauss returns ascending x; colatitude must increase
        theta = np.arccos(x[::-1])
        w = w[::-1]
    else:
        theta, w = _fejer_weights(nlat)

    lon = 2 * np.pi * np.arange(nlon) / nlon
    ring_w = w * (2 * np.pi / nlon)
    for arr in (theta, lon, ring_w):
        arr.flags.writeable = False
    return SphericalGrid(kind, nlat, nlon, theta, lon, ring_w)


def grid_from_descriptor(desc: dict) -> SphericalGrid:
    try:
        return make_grid(desc["kind"], desc["nlat"], desc["nlon"])
    except KeyError as exc:
        raise InvalidArgument(f"grid descriptor missing {exc}") from None


@dataclasses.dataclass(frozen=True, eq=False)
class GridField:
    """Real samples on a grid; ``values`` is (..., nlat, nlon, channels)."""

    grid: SphericalGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim < 3 or v.shape[-3:-1] != self.grid.shape:
            raise InvalidArgument(
                f"field shape {v.shape} inconsistent with grid {self.grid.shape}"
            )
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())


def point_at(grid: SphericalGrid, i: int, j: int) -> UnitVector:
    if not (0 <= i < grid.nlat and 0 <= j < grid.nlon):
        raise InvalidArgument(f"index ({i}, {j}) outside grid {grid.shape}")
    return UnitVector.from_angles(float(grid.colatitudes[i]), float(grid.longitudes[j]))


def integrate(values: np.ndarray, grid: SphericalGrid) -> np.ndarray:
    """Quadrature over the two grid axes of (..., nlat, nlon, C) -> (..., C)."""
    ring_sums = values.sum(axis=-2)
    return np.einsum("...ic,i->...c", ring_sums, grid.quad_weights)


def surface_integral(f: GridField) -> np.ndarray:
    if not f.is_finite():
        raise InvalidArgument("field contains non-finite values")
    return integrate(f.values, f.grid)


def weighted_inner(a: np.ndarray, b: np.ndarray, grid: SphericalGrid) -> np.ndarray:
    return integrate(a * b, grid)
