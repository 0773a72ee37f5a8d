import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from conftest import gl_grid, rel
from gsno.datasets import random_bandlimited, random_coeffs
from gsno.errors import InvalidArgument, ResolutionError
from gsno.harmonics import legendre_all, sph_harm_table
from gsno.operators import (
    AnisotropicKernel,
    EquivariantKernel,
    GsnoBlock,
    InvariantKernel,
    gsno_forward,
    gsno_stack_forward,
    op_anisotropic,
    op_equivariant,
    op_invariant,
)
from gsno.sht import SpectralCoeffs, sht_forward, sht_inverse, triangle_mask
from gsno.so3 import Rotation, rotate_coeffs, rotate_field
from gsno.sphere import GridField, make_grid


def _coeffs(lmax, seed, channels=1):
    return SpectralCoeffs(lmax, random_coeffs(lmax, np.random.default_rng(seed), channels=channels))


def test_equivariant_identity_kernel():
    c = _coeffs(6, 0, 3)
    out = op_equivariant(c, EquivariantKernel.identity(6, 3))
    assert np.array_equal(out.values, c.values)


def test_equivariant_keeps_only_mean():
    c = _coeffs(6, 1)
    w = np.zeros((7, 1, 1))
    w[0] = 1
    out = op_equivariant(c, EquivariantKernel(w)).values
    assert out[0, 0, 0] == c.values[0, 0, 0]
    out[0, 0] = 0
    assert np.all(out == 0)


def test_equivariant_commutes_with_rotation(rng):
    c = _coeffs(10, 2, 2)
    k = EquivariantKernel(rng.standard_normal((11, 2, 2)))
    for _ in range(3):
        r = Rotation.random(rng)
        a = rotate_coeffs(op_equivariant(c, k), r).values
        b = op_equivariant(rotate_coeffs(c, r), k).values
        assert rel(a, b) < 1e-8


def test_shape_mismatches():
    c = _coeffs(4, 3, 2)
    with pytest.raises(InvalidArgument):
        op_equivariant(c, EquivariantKernel.identity(5, 2))
    with pytest.raises(InvalidArgument):
        op_equivariant(c, EquivariantKernel.identity(4, 3))
    with pytest.raises(InvalidArgument):
        op_anisotropic(c, AnisotropicKernel(np.ones((3, 3))))
    g = gl_grid(4)
    with pytest.raises(InvalidArgument):
        op_invariant(GridField(g, np.ones(g.shape + (2,))), InvariantKernel(np.zeros((5, 5, 1), complex), np.ones((1, 1))))


def test_invariant_zero_and_constant():
    g = gl_grid(4)
    table = np.zeros((5, 5, 1), complex)
    table[0, 0] = 1
    k = InvariantKernel(table, np.ones((1, 1)))
    assert np.all(op_invariant(GridField(g, np.zeros(g.shape + (1,))), k).values == 0)
    out = op_invariant(GridField(g, np.ones(g.shape + (1,))), k).values
    assert abs(out[0, 0, 0] - 4 * math.pi) < 1e-12


def test_invariant_ignores_rotation(rng):
    lmax = 8
    g = gl_grid(lmax)
    f = random_bandlimited(lmax, 3, g, channels=2)
    table = (rng.standard_normal((9, 9, 3)) + 1j * rng.standard_normal((9, 9, 3))) * triangle_mask(8)[:, :, None]
    k = InvariantKernel(table, rng.standard_normal((3, 2)))
    base = op_invariant(f, k).values
    for _ in range(3):
        assert rel(op_invariant(rotate_field(f, Rotation.random(rng), lmax), k).values, base) < 1e-9


def test_anisotropic_pole_directions():
    c = _coeffs(7, 4)
    same = op_anisotropic(c, AnisotropicKernel(np.array([[0.0, 0.0, 2.0]]))).values
    assert np.abs(same - c.values).max() < 1e-15
    flip = op_anisotropic(c, AnisotropicKernel(np.array([[0.0, 0.0, -1.0]]))).values
    sign = (-1.0) ** np.arange(8)
    assert np.abs(flip - c.values * sign[:, None, None]).max() < 1e-15


def test_anisotropic_depends_only_on_polar_angle():
    c = _coeffs(9, 5, 2)
    d1 = np.array([[0.3, -0.5, 0.4], [1.0, 2.0, -0.7]])
    # same n . d: swap x/y and flip signs, exact in floating point
    d2 = np.array([[-0.5, 0.3, 0.4], [-2.0, -1.0, -0.7]])
    a = op_anisotropic(c, AnisotropicKernel(d1)).values
    b = op_anisotropic(c, AnisotropicKernel(d2)).values
    assert np.array_equal(a, b)


def test_anisotropic_with_per_degree_scalars_coincides_with_equivariant(rng):
    lmax = 6
    c = _coeffs(lmax, 6)
    dirs = rng.standard_normal((1, lmax + 1, 3))
    k = AnisotropicKernel(dirs)
    mult = k.multiplier(lmax)
    eq = op_equivariant(c, EquivariantKernel(mult[:, :, None]))
    assert np.abs(op_anisotropic(c, k).values - eq.values).max() < 1e-15


def test_anisotropic_gain_scales_per_degree():
    c = _coeffs(4, 7)
    gain = np.arange(1.0, 6.0)[:, None]
    k = AnisotropicKernel(np.array([[0.0, 0.0, 1.0]]), gain)
    assert np.abs(op_anisotropic(c, k).values - c.values * gain[:, :, None]).max() < 1e-15


@settings(max_examples=15, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_branches_linear(a, b, seed):
    lmax = 5
    g = gl_grid(lmax)
    rng = np.random.default_rng(seed)
    f, h = (random_bandlimited(lmax, [seed, i], g) for i in range(2))
    combo = GridField(g, a * f.values + b * h.values)
    ek = EquivariantKernel(rng.standard_normal((6, 1, 1)))
    ik = InvariantKernel(rng.standard_normal((6, 6, 1)) * triangle_mask(5)[:, :, None] + 0j, np.ones((1, 1)))
    ak = AnisotropicKernel(rng.standard_normal((1, 3)))
    for op in (
        lambda v: op_equivariant(sht_forward(v, lmax), ek).values,
        lambda v: op_invariant(v, ik).values,
        lambda v: op_anisotropic(sht_forward(v, lmax), ak).values,
    ):
        want = a * op(f) + b * op(h)
        assert np.abs(op(combo) - want).max() <= 1e-10 * (1 + np.abs(want).max())


def test_reseed_degenerate_direction():
    k = AnisotropicKernel(np.array([[0.0, 0.0, 1e-9], [1.0, 0.0, 0.0]]))
    assert k.reseed_degenerate(np.random.default_rng(0)) == 1
    assert np.linalg.norm(k.raw_dirs[0]) > 1e-6
    assert np.array_equal(k.raw_dirs[1], [1.0, 0.0, 0.0])
    assert np.allclose(np.linalg.norm(k.directions, axis=-1), 1.0)


# -- block -----------------------------------------------------------------------


def _selector_block(lmax, c):
    rng = np.random.default_rng(0)
    block = GsnoBlock.init(lmax, c, c, rng, activation="identity", residual=False)
    block.equivariant = EquivariantKernel.identity(lmax, c)
    block.invariant.shape_table[:] = 0
    block.anisotropic.gain = np.zeros((lmax + 1, c))
    block.mix_weight = np.hstack([np.eye(c), np.zeros((c, 2 * c))])
    block.mix_bias = np.zeros(c)
    return block


def test_block_selecting_equivariant_identity_projects_input():
    lmax = 6
    g = gl_grid(lmax)
    x = np.random.default_rng(1).standard_normal(g.shape + (2,))
    out = gsno_forward(GridField(g, x), _selector_block(lmax, 2)).values
    proj = sht_inverse(sht_forward(GridField(g, x), lmax), g).values
    assert rel(out, proj) < 1e-12


def test_zero_input():
    lmax = 4
    g = gl_grid(lmax)
    zero = GridField(g, np.zeros(g.shape + (2,)))
    for act in ("tanh", "gelu", "identity", "relu"):
        block = GsnoBlock.init(lmax, 2, 3, np.random.default_rng(2), activation=act)
        assert np.all(gsno_forward(zero, block).values == 0)
    block = GsnoBlock.init(lmax, 2, 3, np.random.default_rng(2), activation="tanh")
    block.mix_bias = np.array([0.1, -0.2, 0.3])
    assert np.allclose(gsno_forward(zero, block).values, np.tanh(block.mix_bias))


def _naive_block(block, x, grid):
    """Straight-line block: explicit quadrature sums, no plans or caches."""
    L = block.lmax
    y = sph_harm_table(L, grid.points)  # (L+1, L+1, nlat, nlon)
    w = grid.point_weights
    parts = []
    coeffs = np.einsum("ijc,lmij->lmc", x * w[..., None], np.conj(y))

    def synth(spec):
        out = np.zeros(grid.shape + (spec.shape[-1],))
        for l in range(L + 1):
            out += np.einsum("ij,c->ijc", y[l, 0].real, spec[l, 0].real)
            for m in range(1, l + 1):
                out += 2 * np.real(y[l, m][..., None] * spec[l, m])
        return out

    for b in block.branches:
        if b == "E":
            spec = np.stack([np.stack([block.equivariant.weights[l] @ coeffs[l, m] for m in range(L + 1)]) for l in range(L + 1)])
        elif b == "I":
            c_f = np.sum(x * w[..., None], axis=(0, 1))
            mixed = block.invariant.input_mix @ c_f
            spec = block.invariant.shape_table * mixed * triangle_mask(L)[:, :, None]
        else:
            z = block.anisotropic.directions[:, 2]
            mult = np.array([[legendre_all(l, zc)[l] for zc in z] for l in range(L + 1)])
            spec = coeffs * mult[:, None, :]
        parts.append(synth(spec * triangle_mask(L)[:, :, None]))
    concat = np.concatenate(parts, axis=-1)
    z = np.einsum("oi,abi->abo", block.mix_weight, concat) + block.mix_bias
    acts = {"gelu": lambda v: v * 0.5 * (1 + erf(v / math.sqrt(2))), "tanh": np.tanh, "identity": lambda v: v}
    out = acts[block.activation](z)
    if block.residual and block.c_in == block.c_out:
        out = out + x
    return out


@pytest.mark.parametrize("branches,act", [("EIA", "gelu"), ("IA", "tanh"), ("E", "identity")])
def test_block_matches_naive_forward(branches, act):
    lmax = 8
    g = gl_grid(lmax)
    block = GsnoBlock.init(lmax, 2, 2, np.random.default_rng(3), branches=branches, activation=act)
    x = random_bandlimited(lmax, 9, g, channels=2)
    assert rel(gsno_forward(x, block).values, _naive_block(block, x.values, g)) < 1e-9


def test_block_on_under_resolved_grid():
    block = GsnoBlock.init(8, 1, 1, np.random.default_rng(0))
    g = make_grid("gauss-legendre", 6, 12)
    with pytest.raises(ResolutionError):
        gsno_forward(GridField(g, np.zeros(g.shape + (1,))), block)


def test_block_channel_mismatch():
    g = gl_grid(4)
    block = GsnoBlock.init(4, 2, 2, np.random.default_rng(0))
    with pytest.raises(InvalidArgument):
        gsno_forward(GridField(g, np.zeros(g.shape + (3,))), block)


def test_block_rejects_bad_branches():
    with pytest.raises(InvalidArgument):
        GsnoBlock.init(4, 1, 1, np.random.default_rng(0), branches="EX")
    with pytest.raises(InvalidArgument):
        GsnoBlock.init(4, 1, 1, np.random.default_rng(0), branches="")


def test_stack_examples():
    lmax = 6
    g = gl_grid(lmax)
    x = random_bandlimited(lmax, 11, g, channels=2)
    assert gsno_stack_forward(x, []).values is x.values
    b1 = GsnoBlock.init(lmax, 2, 3, np.random.default_rng(4))
    b2 = GsnoBlock.init(lmax, 3, 3, np.random.default_rng(5), activation="tanh")
    assert np.array_equal(gsno_stack_forward(x, [b1]).values, gsno_forward(x, b1).values)
    two = gsno_stack_forward(x, [b1, b2]).values
    assert rel(two, _naive_block(b2, _naive_block(b1, x.values, g), g)) < 1e-9
    with pytest.raises(InvalidArgument):
        gsno_stack_forward(x, [b1, b1])


def test_equivariant_only_block_is_rotation_equivariant(rng):
    lmax = 8
    g = gl_grid(lmax)
    block = GsnoBlock.init(lmax, 1, 1, np.random.default_rng(6), branches="E", activation="identity")
    x = random_bandlimited(lmax, 12, g)
    r = Rotation.random(rng)
    a = rotate_field(gsno_forward(x, block), r, lmax).values
    b = gsno_forward(rotate_field(x, r, lmax), block).values
    assert rel(a, b) < 1e-8
