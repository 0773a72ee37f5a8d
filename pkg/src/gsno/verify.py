"""Property suite behind ``gsno verify``: each check reports a residual and a tolerance."""

from __future__ import annotations

import contextlib
import dataclasses
import math
import tempfile
import time
from pathlib import Path

import numpy as np
from scipy.special import eval_jacobi, gammaln

from . import so3
from .container import load_dataset, save_dataset
from .datasets import (
    Dataset,
    pixel_direction,
    project_images,
    random_batch,
    random_bandlimited,
    rotation_advection_trajectories,
)
from .errors import GsnoError
from .harmonics import addition_theorem_check, legendre_all, legendre_derivative_all, sph_harm_full, sph_harm_table
from .model import GsnoModel
from .operators import AnisotropicKernel, EquivariantKernel, InvariantKernel, equivariant_apply, op_invariant
from .oracle import (
    GreensFunctionSpec,
    anisotropic_closed_form,
    equivariant_kernel_of,
    invariant_kernel_of,
    oracle_apply,
)
from .sht import get_plan, m_multiplicity, spectral_inner, triangle_mask
from .sphere import GridField, integrate, make_grid, unit_vectors
from .training import OptimState, adam_step, forward_backward

LEVELS = ("quick", "full")


@dataclasses.dataclass
class CheckResult:
    name: str
    residual: float
    tolerance: float
    seconds: float
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and bool(self.residual < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        detail = self.error or f"residual={self.residual:.3e} tol={self.tolerance:.1e}"
        return f"{status} {self.name:<42s} {detail} ({self.seconds:.2f}s)"


_CHECKS: list[tuple[str, float, tuple[str, ...], object]] = []


def check(name: str, tol: float, levels=LEVELS):
    def register(fn):
        _CHECKS.append((name, tol, tuple(levels), fn))
        return fn

    return register


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.ravel(a - b)) / max(np.linalg.norm(np.ravel(b)), 1e-300))


def _gl(lmax: int):
    return make_grid("gauss-legendre", lmax + 1, 2 * lmax + 2)


# -- sphere-core ------------------------------------------------------------------------


@check("sphere.weights_sum_gauss_legendre", 1e-12)
def _weights_gl(level):
    return max(abs(make_grid("gauss-legendre", n, 2 * n).quad_weights.sum() * 2 * n - 4 * math.pi) for n in (2, 9, 33))


@check("sphere.weights_sum_equiangular", 1e-12)
def _weights_eq(level):
    return max(abs(make_grid("equiangular", n, n).quad_weights.sum() * n - 4 * math.pi) for n in (4, 32, 64))


@check("sphere.gauss_legendre_exactness", 1e-10)
def _gl_exact(level):
    grid = make_grid("gauss-legendre", 9, 19)
    y = sph_harm_full(8, grid.points).reshape(-1, grid.nlat * grid.nlon)
    keep = np.abs(y).sum(axis=1) > 0
    y = y[keep]
    gram = (y * grid.point_weights.ravel()) @ y.conj().T
    return float(np.abs(gram - np.eye(y.shape[0])).max())


@check("sphere.equiangular_exactness", 1e-6)
def _eq_exact(level):
    grid = make_grid("equiangular", 32, 32)
    y = sph_harm_full(15, grid.points).reshape(-1, 32 * 32)
    y = y[np.abs(y).sum(axis=1) > 0]
    gram = (y * grid.point_weights.ravel()) @ y.conj().T
    return float(np.abs(gram - np.eye(y.shape[0])).max())


@check("sphere.integral_rotation_invariance", 1e-9)
def _int_rot(level):
    grid = _gl(8)
    f = random_bandlimited(8, 3, grid)
    rng = np.random.default_rng(3)
    c0 = integrate(f.values, grid)
    return max(
        float(np.abs(integrate(so3.rotate_field(f, so3.Rotation.random(rng), 8).values, grid) - c0).max())
        for _ in range(5)
    )


# -- harmonics -----------------------------------------------------------------------


@check("harmonics.legendre_vs_power_series", 1e-12)
def _leg(level):
    x = np.linspace(-1, 1, 41)
    tab = legendre_all(64, x)
    ref = np.array([np.polynomial.legendre.legval(x, np.eye(65)[l]) for l in range(65)])
    return float(np.abs(tab - ref).max())


@check("harmonics.legendre_derivative_fd", 1e-7)
def _legd(level):
    x = np.array([-0.9, -0.3, 0.2, 0.7])
    h = 1e-6
    fd = (legendre_all(10, x + h) - legendre_all(10, x - h)) / (2 * h)
    edge = legendre_derivative_all(10, np.array([1.0, -1.0]))
    l = np.arange(11)
    want = np.stack([l * (l + 1) / 2, (-1.0) ** (l + 1) * l * (l + 1) / 2], axis=1)
    return max(float(np.abs(legendre_derivative_all(10, x) - fd).max()), float(np.abs(edge - want).max()))


@check("harmonics.addition_theorem", 1e-10)
def _addition(level):
    rng = np.random.default_rng(4)
    u = rng.standard_normal((100, 3))
    v = rng.standard_normal((100, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    n = 100 if level == "full" else 20
    return max(addition_theorem_check(l, a, b) for l in range(33) for a, b in zip(u[:n], v[:n]))


@check("harmonics.conjugate_symmetry", 1e-14)
def _conj(level):
    pts = unit_vectors(np.array([0.3, 1.2, 2.9]), np.array([0.1, 4.0, 5.5]))
    y = sph_harm_full(12, pts)
    m = np.arange(-12, 13)
    mirrored = ((-1.0) ** m)[None, :, None] * np.conj(y[:, ::-1])
    return float(np.abs(y - mirrored).max())


@check("harmonics.no_overflow_l256", 1.0)
def _overflow(level):
    pts = unit_vectors(np.linspace(0, np.pi, 7), np.zeros(7))
    y = sph_harm_table(256, pts)
    # normalized harmonics are bounded by sqrt((2l+1)/4pi)
    bound = np.sqrt((2 * np.arange(257) + 1) / (4 * np.pi))[:, None, None]
    return 0.0 if np.all(np.isfinite(y)) and np.all(np.abs(y) <= bound * (1 + 1e-12)) else 2.0


# -- sht -------------------------------------------------------------------------------


@check("sht.round_trip", 1e-9)
def _round_trip(level):
    worst = 0.0
    for lmax in (7, 15) if level == "quick" else (7, 15, 31):
        grid = _gl(lmax)
        plan = get_plan(grid, lmax)
        f = random_bandlimited(lmax, lmax, grid, channels=2)
        worst = max(worst, _rel(plan.inverse(plan.forward(f.values)), f.values))
    return worst


@check("sht.parseval", 1e-9)
def _parseval(level):
    grid = _gl(20)
    plan = get_plan(grid, 20)
    f = random_bandlimited(20, 5, grid)
    c = plan.forward(f.values)
    spectral = float(spectral_inner(c, c).real.sum())
    spatial = float(integrate(f.values**2, grid).sum())
    return abs(spectral - spatial) / spatial


@check("sht.linearity", 1e-12)
def _linearity(level):
    grid = _gl(10)
    plan = get_plan(grid, 10)
    f = random_bandlimited(10, 1, grid).values
    g = random_bandlimited(10, 2, grid).values
    return _rel(plan.forward(2.5 * f - 0.5 * g), 2.5 * plan.forward(f) - 0.5 * plan.forward(g))


@check("sht.adjoint_identities", 1e-10)
def _adjoint(level):
    lmax = 10
    grid = _gl(lmax)
    plan = get_plan(grid, lmax)
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        f = rng.standard_normal(grid.shape + (1,))
        c = (rng.standard_normal((lmax + 1, lmax + 1, 1)) + 1j * rng.standard_normal((lmax + 1, lmax + 1, 1)))
        c *= triangle_mask(lmax)[:, :, None]
        c[:, 0] = c[:, 0].real
        lhs = spectral_inner(plan.forward(f), c).real.sum()
        rhs = integrate(f * plan.inverse(c), grid).sum()
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-300))
    return float(worst)


@check("sht.naive_projection", 1e-10)
def _naive(level):
    lmax = 15 if level == "full" else 8
    grid = _gl(lmax)
    f = random_bandlimited(lmax, 7, grid).values[..., 0]
    y = sph_harm_table(lmax, grid.points)
    naive = np.zeros((lmax + 1, lmax + 1), dtype=complex)
    for l in range(lmax + 1):
        for m in range(l + 1):
            naive[l, m] = np.sum(grid.point_weights * f * np.conj(y[l, m]))
    return _rel(get_plan(grid, lmax).forward(f[..., None])[..., 0], naive)


# -- so3 -------------------------------------------------------------------------------


def _wigner_d_jacobi(l: int, mp: int, m: int, beta: float) -> float:
    k = min(l + m, l - m, l + mp, l - mp)
    if k == l + m:
        a, lam = mp - m, mp - m
    elif k == l - m:
        a, lam = m - mp, 0
    elif k == l + mp:
        a, lam = m - mp, 0
    else:
        a, lam = mp - m, mp - m
    b = 2 * l - 2 * k - a
    logc = 0.5 * (gammaln(2 * l - k + 1) + gammaln(k + 1) - gammaln(k + b + 1) - gammaln(k + a + 1))
    return (
        (-1) ** lam
        * math.exp(logc)
        * math.sin(beta / 2) ** a
        * math.cos(beta / 2) ** b
        * eval_jacobi(k, a, b, math.cos(beta))
    )


@check("so3.wigner_d_vs_jacobi", 1e-10)
def _jacobi(level):
    worst = 0.0
    for l, beta in ((8, 1.1), (20, 2.3)):
        d = so3.wigner_d(l, beta)
        for i, mp in enumerate(range(-l, l + 1)):
            for j, m in enumerate(range(-l, l + 1)):
                worst = max(worst, abs(d[i, j] - _wigner_d_jacobi(l, mp, m, beta)))
    return worst


@check("so3.wigner_unitarity", 1e-10)
def _unitary(level):
    rot = so3.Rotation(0.4, 1.9, -2.2)
    return max(float(np.abs(D @ D.conj().T - np.eye(D.shape[0])).max()) for D in (so3.wigner_D(l, rot) for l in range(17)))


def wigner_gram(lmax: int, order: int) -> np.ndarray:
    """Quadrature Gram matrix of all D^l_{m'm}, l <= lmax (normalized Haar measure)."""
    quad = so3.so3_quadrature(order)
    funcs = [(l, a, b) for l in range(lmax + 1) for a in range(-l, l + 1) for b in range(-l, l + 1)]
    li = np.array([f[0] for f in funcs])
    ai = np.array([f[1] for f in funcs]) + lmax
    bi = np.array([f[2] for f in funcs]) + lmax
    gram = np.zeros((len(funcs), len(funcs)), dtype=complex)
    for beta in np.unique(quad.beta):
        sel = quad.beta == beta
        d = so3.wigner_d_all(lmax, beta)[li, ai, bi]
        # D^l_{m'm} = exp(-i m' alpha) d exp(-i m gamma)
        phase = np.exp(-1j * (np.outer(quad.alpha[sel], ai - lmax) + np.outer(quad.gamma[sel], bi - lmax)))
        D = phase * d
        gram += (D.T * quad.weights[sel]) @ D.conj()
    return gram, li


@check("so3.wigner_orthogonality", 1e-10)
def _orthogonality(level):
    lmax = 8 if level == "full" else 4
    gram, li = wigner_gram(lmax, 2 * lmax)
    return float(np.abs(gram - np.diag(1.0 / (2 * li + 1))).max())


@check("so3.quadrature_integrates_constant_only", 1e-12)
def _quad_const(level):
    quad = so3.so3_quadrature(3)
    vals = np.stack([so3.wigner_D_all(3, r) for r in quad.rotations()])
    total = quad.integrate(vals)
    want = np.zeros_like(total)
    want[0, 3, 3] = 1.0
    return float(np.abs(total - want).max())


@check("so3.rotate_inverse_round_trip", 1e-10)
def _rot_inv(level):
    rng = np.random.default_rng(8)
    c = random_batch(10, 8, _gl(10), 1)[1][0]
    rot = so3.Rotation.random(rng)
    return _rel(so3.rotate_half(so3.rotate_half(c, rot), rot.inverse()), c)


@check("so3.rotate_vs_spatial_resampling", 1e-8)
def _rot_spatial(level):
    lmax = 10
    grid = _gl(lmax)
    f = random_bandlimited(lmax, 9, grid)
    plan = get_plan(grid, lmax)
    rot = so3.Rotation(0.7, 1.3, 2.1)
    rotated = so3.rotate_field(f, rot, lmax).values
    # (R f)(u) = f(R^-1 u): evaluate the synthesis directly at the pulled-back points
    pulled = grid.points @ rot.matrix()
    y = sph_harm_table(lmax, pulled)
    c = plan.forward(f.values)
    direct = np.einsum("lmij,lmc->ijc", y * m_multiplicity(lmax)[None, :, None, None], c).real
    return _rel(rotated, direct)


@check("so3.degree_power_preserved", 1e-10)
def _power(level):
    c = random_batch(12, 11, _gl(12), 1)[1][0]
    rotated = so3.rotate_half(c, so3.Rotation(1.0, 2.0, 3.0))
    p0 = spectral_inner(c, c).real
    return _rel(spectral_inner(rotated, rotated).real, p0)


@check("so3.composition", 1e-9)
def _compose(level):
    grid = _gl(8)
    f = random_bandlimited(8, 12, grid)
    r1, r2 = so3.Rotation(0.3, 0.9, 1.7), so3.Rotation(2.0, 0.4, -1.0)
    twice = so3.rotate_field(so3.rotate_field(f, r1, 8), r2, 8).values
    once = so3.rotate_field(f, r2.compose(r1), 8).values
    return _rel(twice, once)


# -- operators -------------------------------------------------------------------------


@check("operators.equivariant_commutes_with_rotation", 1e-8)
def _equiv(level):
    lmax = 8
    grid = _gl(lmax)
    plan = get_plan(grid, lmax)
    rng = np.random.default_rng(13)
    w = rng.standard_normal((lmax + 1, 2, 2))
    c = plan.forward(random_bandlimited(lmax, 13, grid, channels=2).values)
    worst = 0.0
    for _ in range(20 if level == "full" else 5):
        rot = so3.Rotation.random(rng)
        a = so3.rotate_half(equivariant_apply(c, w), rot)
        b = equivariant_apply(so3.rotate_half(c, rot), w)
        worst = max(worst, _rel(a, b))
    return worst


@check("operators.invariant_ignores_rotation", 1e-9)
def _inv(level):
    lmax = 8
    grid = _gl(lmax)
    rng = np.random.default_rng(14)
    shape = rng.standard_normal((lmax + 1, lmax + 1, 2)) * triangle_mask(lmax)[:, :, None] + 0j
    k = InvariantKernel(shape, rng.standard_normal((2, 2)))
    f = random_bandlimited(lmax, 14, grid, channels=2)
    ref = op_invariant(f, k).values
    scale = np.abs(ref).max()
    return max(
        float(np.abs(op_invariant(so3.rotate_field(f, so3.Rotation.random(rng), lmax), k).values - ref).max()) / scale
        for _ in range(20 if level == "full" else 5)
    )


@check("operators.anisotropic_polar_angle_only", 1e-300)
def _polar(level):
    # swaps and sign flips of (x, y) keep the polar angle bit-for-bit
    x, y, z = 0.37, -1.21, 0.64
    dirs = [(x, y, z), (-y, x, z), (-x, -y, z), (y, -x, z), (x, -y, z)]
    mults = [AnisotropicKernel(np.array([d])).multiplier(12) for d in dirs]
    return float(max(np.abs(m - mults[0]).max() for m in mults))


@check("operators.anisotropic_is_per_degree_multiplier", 1e-14)
def _aniso_eq(level):
    lmax = 8
    rng = np.random.default_rng(15)
    k = AnisotropicKernel(rng.standard_normal((1, 3)))
    c = random_batch(lmax, 15, _gl(lmax), 1)[1][0]
    eq = EquivariantKernel(k.multiplier(lmax)[:, :, None])
    return _rel(c * k.multiplier(lmax)[:, None, :], equivariant_apply(c, eq.weights))


# -- training --------------------------------------------------------------------------


@check("training.gradient_finite_difference", 1e-5)
def _grad(level):
    lmax = 6 if level == "full" else 3
    grid = _gl(lmax)
    rng = np.random.default_rng(16)
    model = GsnoModel.init(grid, lmax, [1, 2, 1], rng)
    x, _ = random_batch(lmax, 16, grid, 2, 1)
    y, _ = random_batch(lmax, 17, grid, 2, 1)
    _, grads = forward_backward(model, x, y, "weighted-mean-relative")
    worst, h = 0.0, 1e-6
    for (_, p), g in zip(model.parameters(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        idx = np.arange(flat.size) if level == "full" else np.arange(0, flat.size, max(1, flat.size // 4))
        num = np.zeros(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            a = forward_backward(model, x, y, "weighted-mean-relative")[0]
            flat[i] = orig - h
            b = forward_backward(model, x, y, "weighted-mean-relative")[0]
            flat[i] = orig
            num[k] = (a - b) / (2 * h)
        worst = max(worst, float(np.abs(num - gflat[idx]).max() / max(np.abs(num).max(), 1e-12)))
    return worst


@check("training.adam_first_step", 1e-15)
def _adam(level):
    p = [np.array([1.0])]
    state = OptimState()
    adam_step(state, p, [np.array([0.3])])
    # bias-corrected first step is -lr * g / (|g| + eps')
    want = 1.0 - 2e-3 * 0.3 / (0.3 + 1e-8)
    return abs(float(p[0][0]) - want)


# -- datasets and container -------------------------------------------------------------


@check("datasets.projection_constant_image", 1e-12)
def _proj(level):
    grid = make_grid("equiangular", 32, 32)
    out = project_images(np.full((1, 28, 28), 0.6), grid)[0, ..., 0]
    inside = out != 0
    return float(np.abs(out[inside] - 0.6).max()) if inside.any() else 1.0


@check("datasets.projection_bright_pixel", 1.0)
def _pixel(level):
    grid = make_grid("equiangular", 64, 64)
    img = np.zeros((1, 28, 28))
    img[0, 9, 17] = 1.0
    out = project_images(img, grid)[0, ..., 0]
    i, j = np.unravel_index(np.argmax(out), out.shape)
    theta, phi = pixel_direction(9, 17)
    dth = abs(grid.colatitudes[i] - theta) / (np.pi / grid.nlat)
    dph = abs((grid.longitudes[j] - phi + np.pi) % (2 * np.pi) - np.pi) / (2 * np.pi / grid.nlon)
    return max(dth, dph)


@check("datasets.advection_full_period", 1e-9)
def _period(level):
    traj = rotation_advection_trajectories([1.0, 2.0, 0.5], 2 * np.pi / 12, 12, 18, _gl(10), 10)
    return _rel(traj[0, -1], traj[0, 0])


@check("container.dataset_round_trip", 1e-300)
def _container(level):
    grid = _gl(4)
    x, _ = random_batch(4, 19, grid, 3, 2)
    ds = Dataset(grid, x, 2 * x, np.array([1, 2, 3]), {"task": "check"})
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.sphf"
        save_dataset(path, ds)
        back = load_dataset(path)
    return float(max(np.abs(back.inputs - x).max(), np.abs(back.targets - 2 * x).max(), np.abs(back.labels - ds.labels).max()))


# -- oracle ----------------------------------------------------------------------------


@check("oracle.equivariant_closed_form", 1e-6)
def _oracle_eq(level):
    lmax = 8 if level == "full" else 4
    grid = _gl(lmax)
    plan = get_plan(grid, lmax)
    rng = np.random.default_rng(20)
    prof = np.zeros((lmax + 1, lmax + 1), dtype=complex)
    prof[:, 0] = rng.standard_normal(lmax + 1)
    spec = GreensFunctionSpec("equivariant", prof, measure="euler")
    f = random_bandlimited(lmax, 20, grid)
    got = plan.forward(oracle_apply(spec, f, lmax).values)
    want = equivariant_apply(plan.forward(f.values), equivariant_kernel_of(spec).weights)
    return _rel(got, want)


@check("oracle.invariant_closed_form", 1e-6)
def _oracle_inv(level):
    lmax = 8 if level == "full" else 4
    grid = _gl(lmax)
    plan = get_plan(grid, lmax)
    rng = np.random.default_rng(21)
    prof = rng.standard_normal((lmax + 1, lmax + 1)) * triangle_mask(lmax) + 0j
    prof[:, 1:] += 1j * rng.standard_normal((lmax + 1, lmax)) * triangle_mask(lmax)[:, 1:]
    spec = GreensFunctionSpec("invariant", prof)
    f = random_bandlimited(lmax, 21, grid)
    got = plan.forward(oracle_apply(spec, f, lmax).values)
    want = op_invariant(f, invariant_kernel_of(spec)).values
    return _rel(got, want)


@check("oracle.anisotropic_closed_form", 1e-6)
def _oracle_aniso(level):
    lmax = 6 if level == "full" else 3
    grid = _gl(2 * lmax)
    rng = np.random.default_rng(22)
    d = rng.standard_normal((lmax + 1, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    spec = GreensFunctionSpec("generalized-anisotropic", legendre_weights=rng.standard_normal(lmax + 1), directions=d)
    f = random_bandlimited(lmax, 22, grid)
    got = get_plan(grid, 2 * lmax).forward(oracle_apply(spec, f, lmax).values)
    want = np.zeros_like(got)
    want[: lmax + 1, : lmax + 1] = anisotropic_closed_form(spec, get_plan(grid, lmax).forward(f.values))
    return _rel(got, want)


# -- runner ----------------------------------------------------------------------------


def available_checks(level: str = "quick") -> list[str]:
    return [name for name, _, levels, _ in _CHECKS if level in levels]


def run(level: str = "quick", report=print) -> list[CheckResult]:
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")
    results = []
    for name, tol, levels, fn in _CHECKS:
        if level not in levels:
            continue
        start = time.perf_counter()
        try:
            res = CheckResult(name, float(fn(level)), tol, 0.0)
        except (GsnoError, ArithmeticError, ValueError) as exc:
            res = CheckResult(name, math.inf, tol, 0.0, f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - start
        if not math.isfinite(res.residual) and res.error is None:
            res.error = f"non-finite residual {res.residual}"
        results.append(res)
        if report is not None:
            report(res.line())
    return results


@contextlib.contextmanager
def inject_fault(kind: str):
    """Test hook: temporarily corrupt a numerical table so that checks must fail."""
    if kind != "wigner":
        raise ValueError(f"unknown fault {kind!r}")
    original = so3.wigner_d_all

    def corrupted(lmax, beta):
        d = original(lmax, beta)
        if lmax >= 2:
            d[2] *= 1.0 + 1e-4
        return d

    so3.wigner_d_all = corrupted
    try:
        yield
    finally:
        so3.wigner_d_all = original
