"""Green's-function operator branches and the fused GSNO block.

Three spectral branches share one forward SHT of the block input:

* equivariant: a channel-mixing matrix per degree, ``out[l,m] = W[l] @ c[l,m]``;
* invariant:   ``out[l,m,o] = (input_mix @ C_f)[o] * shape_table[l,m,o]`` where
  ``C_f`` is the surface integral of the input;
* anisotropic: ``out[l,m,c] = c[l,m,c] * P_l(n . d_c)`` with a learnable unit
  direction per channel (optionally per channel and degree).

Each branch is synthesized back to the grid, the branch fields are
concatenated along channels, mixed pointwise by a dense layer, passed through
the activation, and optionally added to the block input.

In the block every branch has width ``c_in`` (the anisotropic branch is
diagonal in channels), so the dense mix maps ``len(branches) * c_in`` to
``c_out``.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.special import erf

from .errors import InvalidArgument
from .harmonics import legendre_all, legendre_derivative_all
from .sht import SpectralCoeffs, get_plan, triangle_mask
from .sphere import GridField, SphericalGrid, integrate

BRANCHES = "EIA"
MIN_DIR_NORM = 1e-6


# -- kernels -----------------------------------------------------------------


@dataclasses.dataclass(eq=False)
class EquivariantKernel:
    weights: np.ndarray  # (lmax+1, c_out, c_in), real

    @property
    def lmax(self) -> int:
        return self.weights.shape[0] - 1

    @classmethod
    def identity(cls, lmax: int, channels: int) -> EquivariantKernel:
        return cls(np.tile(np.eye(channels), (lmax + 1, 1, 1)))

    @classmethod
    def from_transfer(cls, transfer) -> EquivariantKernel:
        """Single-channel kernel from per-degree scalars."""
        t = np.asarray(transfer, dtype=float)
        return cls(t.reshape(-1, 1, 1).copy())


@dataclasses.dataclass(eq=False)
class InvariantKernel:
    shape_table: np.ndarray  # (lmax+1, lmax+1, c_out), complex, m >= 0
    input_mix: np.ndarray  # (c_out, c_in), real

    @property
    def lmax(self) -> int:
        return self.shape_table.shape[0] - 1


@dataclasses.dataclass(eq=False)
class AnisotropicKernel:
    """Raw (unnormalized) directions; ``gain`` is the optional per-degree scalar."""

    raw_dirs: np.ndarray  # (C, 3) or (C, lmax+1, 3)
    gain: np.ndarray | None = None  # (lmax+1, C)

    @property
    def per_degree(self) -> bool:
        return self.raw_dirs.ndim == 3

    @property
    def directions(self) -> np.ndarray:
        norm = np.linalg.norm(self.raw_dirs, axis=-1, keepdims=True)
        return self.raw_dirs / norm

    def polar_cosines(self) -> np.ndarray:
        """n . d for the north pole n = (0, 0, 1)."""
        return self.directions[..., 2]

    def multiplier(self, lmax: int) -> np.ndarray:
        """P_l(n . d) (times the gain, if any), shape (lmax+1, C)."""
        z = self.polar_cosines()
        table = legendre_all(lmax, z)
        if self.per_degree:
            # table[l, c, l'] -> pick l' == l
            mult = np.stack([table[l, :, l] for l in range(lmax + 1)])
        else:
            mult = table
        if self.gain is not None:
            mult = mult * self.gain
        return mult

    def multiplier_and_derivative(self, lmax: int) -> tuple[np.ndarray, np.ndarray]:
        z = self.polar_cosines()
        table = legendre_all(lmax, z)
        deriv = legendre_derivative_all(lmax, z, table)
        if self.per_degree:
            idx = np.arange(lmax + 1)
            table = np.stack([table[l, :, l] for l in idx])
            deriv = np.stack([deriv[l, :, l] for l in idx])
        return table, deriv

    def reseed_degenerate(self, rng: np.random.Generator) -> int:
        norm = np.linalg.norm(self.raw_dirs, axis=-1)
        bad = norm < MIN_DIR_NORM
        count = int(bad.sum())
        if count:
            self.raw_dirs[bad] = rng.standard_normal((count, 3))
        return count


# -- branch operators ----------------------------------------------------------


def _check_lmax(c_lmax: int, k_lmax: int):
    if c_lmax != k_lmax:
        raise InvalidArgument(f"band limits differ: coefficients {c_lmax}, kernel {k_lmax}")


def equivariant_apply(half: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.einsum("loi,...lmi->...lmo", weights, half, optimize=True)


def op_equivariant(c: SpectralCoeffs, k: EquivariantKernel) -> SpectralCoeffs:
    _check_lmax(c.lmax, k.lmax)
    if c.channels != k.weights.shape[2]:
        raise InvalidArgument(f"kernel expects {k.weights.shape[2]} channels, got {c.channels}")
    return SpectralCoeffs(c.lmax, equivariant_apply(c.values, k.weights))


def invariant_apply(integrals: np.ndarray, shape_table: np.ndarray, input_mix: np.ndarray) -> np.ndarray:
    mixed = integrals @ input_mix.T
    lmax = shape_table.shape[0] - 1
    table = shape_table * triangle_mask(lmax)[:, :, None]
    return mixed[..., None, None, :] * table


def op_invariant(f: GridField, k: InvariantKernel) -> SpectralCoeffs:
    if f.channels != k.input_mix.shape[1]:
        raise InvalidArgument(f"kernel expects {k.input_mix.shape[1]} channels, got {f.channels}")
    if k.shape_table.shape[-1] != k.input_mix.shape[0]:
        raise InvalidArgument("shape_table and input_mix disagree on output channels")
    c_f = integrate(f.values, f.grid)
    return SpectralCoeffs(k.lmax, invariant_apply(c_f, k.shape_table, k.input_mix))


def op_anisotropic(c: SpectralCoeffs, k: AnisotropicKernel) -> SpectralCoeffs:
    if k.raw_dirs.shape[0] != c.channels:
        raise InvalidArgument(f"kernel has {k.raw_dirs.shape[0]} directions for {c.channels} channels")
    if k.per_degree and k.raw_dirs.shape[1] != c.lmax + 1:
        raise InvalidArgument("per-degree directions do not match the band limit")
    mult = k.multiplier(c.lmax)
    return SpectralCoeffs(c.lmax, c.values * mult[:, None, :])


# -- activations -----------------------------------------------------------------


def _gelu(x):
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    return cdf + x * pdf


ACTIVATIONS = {
    "gelu": (_gelu, _gelu_grad),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(float)),
}


# -- block -----------------------------------------------------------------------


@dataclasses.dataclass(eq=False)
class GsnoBlock:
    lmax: int
    c_in: int
    c_out: int
    branches: str = BRANCHES
    activation: str = "gelu"
    residual: bool = True
    equivariant: EquivariantKernel | None = None
    invariant: InvariantKernel | None = None
    anisotropic: AnisotropicKernel | None = None
    mix_weight: np.ndarray | None = None  # (c_out, len(branches) * c_in)
    mix_bias: np.ndarray | None = None  # (c_out,)

    def __post_init__(self):
        if not self.branches or any(b not in BRANCHES for b in self.branches):
            raise InvalidArgument(f"branches must be a nonempty subset of {BRANCHES!r}")
        if len(set(self.branches)) != len(self.branches):
            raise InvalidArgument("duplicate branch")
        self.branches = "".join(b for b in BRANCHES if b in self.branches)
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")

    @property
    def uses_residual(self) -> bool:
        return self.residual and self.c_in == self.c_out

    @property
    def concat_width(self) -> int:
        return len(self.branches) * self.c_in

    @classmethod
    def init(
        cls,
        lmax: int,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        branches: str = BRANCHES,
        activation: str = "gelu",
        residual: bool = True,
        per_degree_dirs: bool = False,
        aniso_gain: bool = False,
    ) -> GsnoBlock:
        block = cls(lmax, c_in, c_out, branches, activation, residual)
        eye = np.eye(c_in)
        if "E" in block.branches:
            w = eye[None] + 0.02 * rng.standard_normal((lmax + 1, c_in, c_in))
            block.equivariant = EquivariantKernel(w)
        if "I" in block.branches:
            shape = 0.02 * (
                rng.standard_normal((lmax + 1, lmax + 1, c_in))
                + 1j * rng.standard_normal((lmax + 1, lmax + 1, c_in))
            )
            shape *= triangle_mask(lmax)[:, :, None]
            shape[:, 0, :] = shape[:, 0, :].real
            block.invariant = InvariantKernel(shape, eye.copy())
        if "A" in block.branches:
            dshape = (c_in, lmax + 1, 3) if per_degree_dirs else (c_in, 3)
            raw = rng.standard_normal(dshape)
            gain = np.ones((lmax + 1, c_in)) if aniso_gain else None
            block.anisotropic = AnisotropicKernel(raw, gain)
        fan_in = block.concat_width
        block.mix_weight = rng.standard_normal((c_out, fan_in)) / math.sqrt(fan_in)
        block.mix_bias = np.zeros(c_out)
        block.validate()
        return block

    def validate(self) -> None:
        L, ci, co = self.lmax, self.c_in, self.c_out
        need = {"E": self.equivariant, "I": self.invariant, "A": self.anisotropic}
        for b in self.branches:
            if need[b] is None:
                raise InvalidArgument(f"branch {b} enabled but kernel missing")
        if self.equivariant is not None and self.equivariant.weights.shape != (L + 1, ci, ci):
            raise InvalidArgument("equivariant weights must be (lmax+1, c_in, c_in)")
        if self.invariant is not None:
            if self.invariant.shape_table.shape != (L + 1, L + 1, ci):
                raise InvalidArgument("invariant shape_table must be (lmax+1, lmax+1, c_in)")
            if self.invariant.input_mix.shape != (ci, ci):
                raise InvalidArgument("invariant input_mix must be (c_in, c_in)")
        if self.anisotropic is not None:
            r = self.anisotropic.raw_dirs
            if r.shape[0] != ci or r.shape[-1] != 3 or (r.ndim == 3 and r.shape[1] != L + 1):
                raise InvalidArgument("anisotropic directions have the wrong shape")
        if self.mix_weight is None or self.mix_weight.shape != (co, self.concat_width):
            raise InvalidArgument(f"mix_weight must be ({co}, {self.concat_width})")
        if self.mix_bias is None or self.mix_bias.shape != (co,):
            raise InvalidArgument(f"mix_bias must be ({co},)")

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in checkpoint order; complex tables appear as float64 views."""
        out = []
        if "E" in self.branches:
            out.append(("eq.weights", self.equivariant.weights))
        if "I" in self.branches:
            out.append(("inv.shape_table", self.invariant.shape_table.view(np.float64)))
            out.append(("inv.input_mix", self.invariant.input_mix))
        if "A" in self.branches:
            out.append(("aniso.raw_dirs", self.anisotropic.raw_dirs))
            if self.anisotropic.gain is not None:
                out.append(("aniso.gain", self.anisotropic.gain))
        out.append(("mix.weight", self.mix_weight))
        out.append(("mix.bias", self.mix_bias))
        return out

    def config(self) -> dict:
        return {
            "lmax": self.lmax,
            "c_in": self.c_in,
            "c_out": self.c_out,
            "branches": self.branches,
            "activation": self.activation,
            "residual": self.residual,
            "per_degree_dirs": bool(self.anisotropic is not None and self.anisotropic.per_degree),
            "aniso_gain": bool(self.anisotropic is not None and self.anisotropic.gain is not None),
        }


@dataclasses.dataclass
class BlockCache:
    x: np.ndarray
    coeffs: np.ndarray
    integrals: np.ndarray | None
    concat: np.ndarray
    pre_activation: np.ndarray


def block_forward(
    block: GsnoBlock, x: np.ndarray, grid: SphericalGrid, keep: bool = False
) -> tuple[np.ndarray, BlockCache | None]:
    """Array-level block forward on (..., nlat, nlon, c_in) values."""
    if x.shape[-1] != block.c_in:
        raise InvalidArgument(f"block expects {block.c_in} channels, got {x.shape[-1]}")
    plan = get_plan(grid, block.lmax)
    coeffs = plan.forward(x)
    parts = []
    integrals = None
    for b in block.branches:
        if b == "E":
            spec = equivariant_apply(coeffs, block.equivariant.weights)
        elif b == "I":
            integrals = integrate(x, grid)
            k = block.invariant
            spec = invariant_apply(integrals, k.shape_table, k.input_mix)
        else:
            mult = block.anisotropic.multiplier(block.lmax)
            spec = coeffs * mult[:, None, :]
        parts.append(plan.inverse(spec))
    concat = np.concatenate(parts, axis=-1)
    z = concat @ block.mix_weight.T + block.mix_bias
    act, _ = ACTIVATIONS[block.activation]
    out = act(z)
    if block.uses_residual:
        out = out + x
    cache = BlockCache(x, coeffs, integrals, concat, z) if keep else None
    return out, cache


def gsno_forward(f: GridField, block: GsnoBlock) -> GridField:
    out, _ = block_forward(block, f.values, f.grid)
    return GridField(f.grid, out)


def check_chain(blocks) -> None:
    for a, b in zip(blocks, blocks[1:]):
        if a.c_out != b.c_in:
            raise InvalidArgument(f"channel chain broken: {a.c_out} -> {b.c_in}")


def gsno_stack_forward(f: GridField, blocks) -> GridField:
    blocks = list(blocks)
    check_chain(blocks)
    if blocks and f.channels != blocks[0].c_in:
        raise InvalidArgument(f"stack expects {blocks[0].c_in} channels, got {f.channels}")
    values = f.values
    for block in blocks:
        values, _ = block_forward(block, values, f.grid)
    return GridField(f.grid, values)
