import gzip
import math
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from conftest import gl_grid, rel
from gsno.datasets import (
    TeacherSpec,
    mnist_ingest,
    pixel_direction,
    project_to_sphere,
    random_bandlimited,
    random_coeffs,
    read_idx,
    rotation_advection_dataset,
    rotation_advection_trajectories,
    teacher_block,
    teacher_pairs,
)
from gsno.errors import FormatError
from gsno.operators import block_forward
from gsno.oracle import GreensFunctionSpec, oracle_apply
from gsno.sht import degree_power, get_plan, sht_forward
from gsno.so3 import Rotation, rotate_coeffs, rotate_field
from gsno.sphere import GridField, make_grid

MNIST_DIR = Path(os.environ.get("GSNO_MNIST_DIR", "/root/data/mnist"))


def test_random_field_examples():
    lmax = 9
    g = gl_grid(lmax)
    plan = get_plan(g, lmax)
    a, b = random_bandlimited(lmax, 4, g), random_bandlimited(lmax, 4, g)
    assert np.array_equal(a.values, b.values)
    assert rel(plan.inverse(plan.forward(a.values)), a.values) < 1e-10
    c = random_coeffs(lmax, np.random.default_rng(4))
    assert np.abs(degree_power(plan.forward(a.values)) - degree_power(c)).max() < 1e-12 * degree_power(c).max()


def test_decay_scales_degrees():
    c0 = random_coeffs(5, np.random.default_rng(0))
    c1 = random_coeffs(5, np.random.default_rng(0), decay=1.0)
    assert np.allclose(c1, c0 / (np.arange(6) + 1.0)[:, None, None])


def test_identity_teachers_reproduce_inputs():
    lmax = 6
    g = gl_grid(lmax)
    spec = TeacherSpec("equivariant", lmax, kernel={"eq.weights": np.ones((lmax + 1, 1, 1))})
    ds = teacher_pairs(spec, 3, g)
    assert rel(ds.targets, ds.inputs) < 1e-12
    spec = TeacherSpec("anisotropic", lmax, kernel={"aniso.raw_dirs": np.array([[0.0, 0.0, 1.0]])})
    ds = teacher_pairs(spec, 3, g)
    assert rel(ds.targets, ds.inputs) < 1e-12


def test_anisotropic_teacher_matches_double_quadrature_oracle():
    lmax = 6
    g = gl_grid(2 * lmax)
    spec = TeacherSpec("anisotropic", lmax, seed=3)
    ds = teacher_pairs(spec, 3, g)
    d = teacher_block(spec).anisotropic.directions[0]
    l = np.arange(lmax + 1)
    # g_l = 2l+1 cancels the 1/(2l+1) produced by the rotation integral
    greens = GreensFunctionSpec("anisotropic", legendre_weights=2.0 * l + 1, directions=d)
    for i in range(3):
        f = GridField(g, ds.inputs[i])
        assert rel(oracle_apply(greens, f, lmax).values, ds.targets[i]) < 1e-6


def test_teacher_symmetries(rng):
    lmax = 8
    g = gl_grid(lmax)
    f = random_bandlimited(lmax, 1, g, channels=2)
    eq = teacher_block(TeacherSpec("equivariant", lmax, 2, seed=1))
    inv = teacher_block(TeacherSpec("invariant", lmax, 2, seed=1))
    for _ in range(3):
        r = Rotation.random(rng)
        fr = rotate_field(f, r, lmax)
        a = rotate_field(GridField(g, block_forward(eq, f.values, g)[0]), r, lmax).values
        assert rel(a, block_forward(eq, fr.values, g)[0]) < 1e-8
        assert rel(block_forward(inv, fr.values, g)[0], block_forward(inv, f.values, g)[0]) < 1e-9


def test_teacher_pairs_reproducible_and_spec_round_trip():
    g = gl_grid(5)
    spec = TeacherSpec("fused", 5, 2, seed=9)
    a, b = teacher_pairs(spec, 2, g), teacher_pairs(spec, 2, g)
    assert np.array_equal(a.targets, b.targets)
    again = TeacherSpec.from_dict(spec.to_dict())
    assert np.array_equal(teacher_pairs(again, 2, g).targets, a.targets)


def test_advection_examples():
    lmax = 8
    g = gl_grid(lmax)
    axis = np.array([0.3, -0.4, 0.866])
    axis /= np.linalg.norm(axis)
    still = rotation_advection_dataset(axis, 0.0, 3, 0, g, lmax)
    assert rel(still.targets, still.inputs) < 1e-12
    n = 12
    traj = rotation_advection_trajectories(axis, 2 * math.pi / n, n, 0, g, lmax)
    assert rel(traj[0, n], traj[0, 0]) < 1e-9
    one = rotation_advection_dataset(axis, 0.4, 1, 5, g, lmax)
    c = sht_forward(GridField(g, one.inputs[0]), lmax)
    want = get_plan(g, lmax).inverse(rotate_coeffs(c, Rotation.about_axis(axis, 0.4)).values)
    assert rel(one.targets[0], want) < 1e-9


def test_advection_pairs_layout():
    g = gl_grid(4)
    ds = rotation_advection_dataset([0, 0, 1], 0.1, 5, 1, g, 4, n_trajectories=3)
    assert ds.inputs.shape == (15,) + g.shape + (1,)
    traj = rotation_advection_trajectories([0, 0, 1], 0.1, 5, 1, g, 4, n_trajectories=3)
    assert np.array_equal(ds.inputs[5:10], traj[1, :-1])
    assert np.array_equal(ds.targets[5:10], traj[1, 1:])


# -- IDX and MNIST --------------------------------------------------------------


def _write_idx(path, arr, magic):
    arr = np.asarray(arr, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    data = header + arr.tobytes()
    if str(path).endswith(".gz"):
        with gzip.open(path, "wb") as fh:
            fh.write(data)
    else:
        Path(path).write_bytes(data)


def synthetic_mnist(directory, n=10, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
    labels = np.arange(n, dtype=np.uint8) % 10
    for split, prefix in (("train", "train"), ("test", "t10k")):
        _write_idx(Path(directory) / f"{prefix}-images-idx3-ubyte", images, 0x803)
        _write_idx(Path(directory) / f"{prefix}-labels-idx1-ubyte", labels, 0x801)
    return images, labels


def test_idx_round_trip(tmp_path):
    images, labels = synthetic_mnist(tmp_path)
    x, y = mnist_ingest(tmp_path, "train")
    assert x.shape == (10, 28, 28) and x.min() >= 0 and x.max() <= 1
    assert np.array_equal(np.round(x * 255).astype(np.uint8), images)
    assert np.array_equal(y, labels)
    assert np.array_equal(read_idx(tmp_path / "train-images-idx3-ubyte"), read_idx(tmp_path / "train-images-idx3-ubyte"))


def test_idx_gzip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    _write_idx(tmp_path / "a.gz", arr, 0x803)
    assert np.array_equal(read_idx(tmp_path / "a.gz"), arr)


def test_idx_errors(tmp_path):
    _write_idx(tmp_path / "bad", np.zeros((2, 2)), 0x802)
    with pytest.raises(FormatError):
        read_idx(tmp_path / "bad")
    _write_idx(tmp_path / "ok", np.zeros((4, 2, 2)), 0x803)
    data = (tmp_path / "ok").read_bytes()
    (tmp_path / "short").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        read_idx(tmp_path / "short")
    (tmp_path / "tiny").write_bytes(data[:6])
    with pytest.raises(FormatError):
        read_idx(tmp_path / "tiny")
    with pytest.raises(FormatError):
        mnist_ingest(tmp_path / "missing")


def test_projection_examples():
    g = make_grid("equiangular", 32, 32)
    assert np.all(project_to_sphere(np.zeros((28, 28)), g).values == 0)
    ones = project_to_sphere(np.ones((28, 28)), g).values[..., 0]
    inside = ones > 0
    assert inside.any() and not inside.all()
    assert np.abs(ones[inside] - 1).max() < 1e-12
    # footprint lies in the northern hemisphere
    assert np.all(g.colatitudes[np.nonzero(inside)[0]] < math.pi / 2)


@pytest.mark.parametrize("pixel", [(14, 14), (5, 20), (22, 9)])
def test_bright_pixel_lands_on_forward_projection(pixel):
    g = make_grid("equiangular", 64, 64)
    img = np.zeros((28, 28))
    img[pixel] = 1.0
    vals = project_to_sphere(img, g).values[..., 0]
    i, j = np.unravel_index(np.argmax(vals), vals.shape)
    th, ph = pixel_direction(*pixel)
    dth = g.colatitudes[1] - g.colatitudes[0]
    assert abs(g.colatitudes[i] - th) <= dth
    # longitude distance scaled by sin(theta): within one cell on the sphere
    dph = (g.longitudes[j] - ph + math.pi) % (2 * math.pi) - math.pi
    assert abs(dph) * math.sin(th) <= 2 * math.pi / g.nlon + 1e-12 or th < dth


@pytest.mark.skipif(not MNIST_DIR.exists(), reason="MNIST files not available")
def test_real_mnist_counts():
    x, y = mnist_ingest(MNIST_DIR, "train")
    assert x.shape == (60000, 28, 28)
    assert set(np.unique(y)) <= set(range(10))
    xt, _ = mnist_ingest(MNIST_DIR, "test")
    assert xt.shape[0] == 10000
