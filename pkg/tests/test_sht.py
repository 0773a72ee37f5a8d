import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gl_grid, rel
from gsno.datasets import random_bandlimited, random_coeffs
from gsno.errors import InvalidArgument, ResolutionError
from gsno.harmonics import sph_harm_table
from gsno.sht import (
    SpectralCoeffs,
    adjoint_forward,
    adjoint_inverse,
    degree_power,
    from_full,
    get_plan,
    sht_forward,
    sht_inverse,
    spectral_inner,
    to_full,
)
from gsno.sphere import GridField, integrate, make_grid


def test_constant_field():
    g = gl_grid(6)
    c = sht_forward(GridField(g, np.ones(g.shape + (1,))), 6).values[..., 0]
    assert abs(c[0, 0] - math.sqrt(4 * math.pi)) < 1e-12
    c[0, 0] = 0
    assert np.abs(c).max() < 1e-12


def test_real_part_of_y32_has_single_coefficient():
    g = gl_grid(6)
    f = sph_harm_table(3, g.points)[3, 2].real
    c = sht_forward(GridField(g, f[..., None]), 6).values[..., 0]
    # Re Y_3^2 = (Y_3^2 + Y_3^-2)/2 and Y_3^-2 = conj(Y_3^2), so the stored m=2 entry is 1/2
    assert abs(c[3, 2] - 0.5) < 1e-12
    c[3, 2] = 0
    assert np.abs(c).max() < 1e-12


def test_forward_matches_naive_projection():
    lmax = 15
    g = gl_grid(lmax)
    f = random_bandlimited(lmax, 1, g).values[..., 0]
    th, ph = g.colatitudes, g.longitudes
    y = sph_harm_table(lmax, g.points)
    naive = np.zeros((lmax + 1, lmax + 1), dtype=complex)
    for l in range(lmax + 1):
        for m in range(l + 1):
            total = 0j
            for i in range(len(th)):
                total += g.quad_weights[i] * np.sum(f[i] * np.conj(y[l, m, i]))
            naive[l, m] = total
    assert rel(sht_forward(GridField(g, f[..., None]), lmax).values[..., 0], naive) < 1e-10


def test_inverse_of_delta_is_constant():
    g = gl_grid(4)
    c = np.zeros((5, 5, 1), dtype=complex)
    c[0, 0] = math.sqrt(4 * math.pi)
    f = sht_inverse(SpectralCoeffs(4, c), g).values
    assert np.abs(f - 1).max() < 1e-13


@pytest.mark.parametrize("lmax", [7, 15, 31])
def test_round_trip(lmax):
    g = gl_grid(lmax)
    f = random_bandlimited(lmax, lmax, g, channels=2)
    back = sht_inverse(sht_forward(f, lmax), g)
    assert rel(back.values, f.values) < 1e-9


def test_round_trip_equiangular():
    g = make_grid("equiangular", 32, 32)
    f = random_bandlimited(15, 0, g)
    assert rel(sht_inverse(sht_forward(f, 15), g).values, f.values) < 1e-9


def test_parseval():
    g = gl_grid(20)
    plan = get_plan(g, 20)
    c = random_coeffs(20, np.random.default_rng(2), channels=3)
    f = plan.inverse(c)
    assert rel(spectral_inner(c, c), integrate(f * f, g)) < 1e-9
    assert rel(degree_power(c).sum(axis=0), integrate(f * f, g)) < 1e-9


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**32 - 1))
def test_linearity(a, b, seed):
    g = gl_grid(8)
    plan = get_plan(g, 8)
    rng = np.random.default_rng(seed)
    f, h = rng.standard_normal((2,) + g.shape + (1,))
    lhs = plan.forward(a * f + b * h)
    rhs = a * plan.forward(f) + b * plan.forward(h)
    assert np.abs(lhs - rhs).max() <= 1e-12 * (1 + np.abs(rhs).max())


def test_adjoint_identities():
    lmax = 10
    g = gl_grid(lmax)
    rng = np.random.default_rng(3)
    for _ in range(20):
        f = GridField(g, rng.standard_normal(g.shape + (1,)))
        c = SpectralCoeffs(lmax, random_coeffs(lmax, rng))
        lhs = spectral_inner(sht_forward(f, lmax).values, c.values)
        rhs = integrate(f.values * adjoint_forward(c, g).values, g)
        assert abs(lhs - rhs)[0] < 1e-10 * max(1.0, abs(lhs[0]))
        lhs = integrate(sht_inverse(c, g).values * f.values, g)
        rhs = spectral_inner(c.values, adjoint_inverse(f, lmax).values)
        assert abs(lhs - rhs)[0] < 1e-10 * max(1.0, abs(lhs[0]))


def test_adjoint_of_inverse_on_delta_samples_conjugate_harmonic():
    # the Euclidean adjoint of synthesis maps a grid delta to conj(Y) at that point;
    # with the quadrature-weighted inner product the weights are absorbed
    lmax = 5
    g = gl_grid(lmax)
    plan = get_plan(g, lmax)
    y = sph_harm_table(lmax, g.points)
    i, j = 2, 3
    delta = np.zeros(g.shape + (1,))
    delta[i, j] = 1.0 / g.quad_weights[i]
    got = adjoint_inverse(GridField(g, delta), lmax).values[..., 0]
    assert np.abs(got - np.conj(y[:, :, i, j])).max() < 1e-12
    # Euclidean VJP form: kappa * conj(Y), no weights
    vjp = plan.inverse_vjp(delta * g.quad_weights[i])[..., 0]
    kappa = np.where(np.arange(lmax + 1) == 0, 1.0, 2.0)
    assert np.abs(vjp - kappa * np.conj(y[:, :, i, j])).max() < 1e-12


def test_gradient_through_filter_composition():
    lmax = 6
    g = gl_grid(lmax)
    plan = get_plan(g, lmax)
    rng = np.random.default_rng(4)
    mult = rng.standard_normal(lmax + 1)
    x = rng.standard_normal(g.shape + (1,))
    t = rng.standard_normal(g.shape + (1,))

    def loss(v):
        y = plan.inverse(plan.forward(v) * mult[:, None, None])
        return 0.5 * np.sum((y - t) ** 2)

    y = plan.inverse(plan.forward(x) * mult[:, None, None])
    grad = plan.forward_vjp(plan.inverse_vjp(y - t) * mult[:, None, None])
    h = 1e-6
    for idx in [(0, 0, 0), (3, 5, 0), (6, 13, 0)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (loss(xp) - loss(xm)) / (2 * h)
        assert abs(fd - grad[idx]) < 1e-6 * max(1.0, abs(fd))


def test_under_resolved_grid():
    g = make_grid("gauss-legendre", 8, 16)
    with pytest.raises(ResolutionError):
        sht_forward(GridField(g, np.zeros(g.shape + (1,))), 8)
    with pytest.raises(ResolutionError):
        get_plan(make_grid("equiangular", 16, 40), 8)


def test_shape_mismatch():
    with pytest.raises(InvalidArgument):
        SpectralCoeffs(4, np.zeros((4, 4, 1)))
    with pytest.raises(InvalidArgument):
        get_plan(gl_grid(4), 4).inverse(np.zeros((3, 3, 1)))


def test_truncation_drops_higher_degrees():
    g = gl_grid(10)
    f = sph_harm_table(9, g.points)[9, 1].real[..., None]
    c = sht_forward(GridField(g, f), 5).values
    assert np.abs(c).max() < 1e-12


def test_full_table_round_trip():
    c = random_coeffs(6, np.random.default_rng(5), channels=2)
    full = to_full(c)
    assert full.shape == (7, 13, 2)
    assert np.array_equal(from_full(full), c)
    assert np.allclose(full[3, 6 - 2], np.conj(full[3, 6 + 2]))


def test_batch_axes_broadcast():
    g = gl_grid(5)
    plan = get_plan(g, 5)
    f = np.random.default_rng(6).standard_normal((3, 2) + g.shape + (4,))
    c = plan.forward(f)
    assert c.shape == (3, 2, 6, 6, 4)
    assert np.allclose(c[1, 0], plan.forward(f[1, 0]))
