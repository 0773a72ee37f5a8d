"""Synthetic fields, teacher-operator pairs, rotation advection, spherical MNIST."""

from __future__ import annotations

import dataclasses
import gzip
import math
import struct
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import FormatError, InvalidArgument
from .model import GsnoModel
from .operators import AnisotropicKernel, EquivariantKernel, GsnoBlock, InvariantKernel, block_forward
from .sht import get_plan, triangle_mask
from .so3 import Rotation, rotate_half
from .sphere import GridField, SphericalGrid

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DEFAULT_FOV_DEG = 100.0


@dataclasses.dataclass(eq=False)
class Dataset:
    grid: SphericalGrid
    inputs: np.ndarray  # (N, nlat, nlon, C)
    targets: np.ndarray | None = None  # (N, nlat, nlon, C')
    labels: np.ndarray | None = None  # (N,)
    meta: dict = dataclasses.field(default_factory=dict)

    def __len__(self):
        return self.inputs.shape[0]


# -- band-limited random fields ---------------------------------------------------------


def random_coeffs(lmax: int, rng: np.random.Generator, shape=(), channels: int = 1, decay: float = 0.0):
    """I.i.d. complex normal coefficients with real m=0 terms; unit variance per (l, m).

    ``decay`` scales degree l by (l+1)^-decay.
    """
    full_shape = tuple(shape) + (lmax + 1, lmax + 1, channels)
    re = rng.standard_normal(full_shape)
    im = rng.standard_normal(full_shape)
    c = (re + 1j * im) / math.sqrt(2.0)
    c[..., :, 0, :] = re[..., :, 0, :]
    c *= triangle_mask(lmax)[:, :, None]
    if decay:
        c *= ((np.arange(lmax + 1) + 1.0) ** -decay)[:, None, None]
    return c


def random_bandlimited(lmax: int, seed, grid: SphericalGrid, channels: int = 1, decay: float = 0.0) -> GridField:
    plan = get_plan(grid, lmax)
    c = random_coeffs(lmax, np.random.default_rng(seed), (), channels, decay)
    return GridField(grid, plan.inverse(c))


def random_batch(lmax, seed, grid, n, channels=1, decay=0.0):
    """``n`` fields; sample i is drawn from seed (seed, i) so it does not depend on n."""
    plan = get_plan(grid, lmax)
    coeffs = np.stack(
        [random_coeffs(lmax, np.random.default_rng([seed, i]), (), channels, decay) for i in range(n)]
    )
    return plan.inverse(coeffs), coeffs


# -- teacher operators --------------------------------------------------------------------

TEACHER_BRANCHES = ("equivariant", "invariant", "anisotropic", "fused")
_BRANCH_CODE = {"equivariant": "E", "invariant": "I", "anisotropic": "A", "fused": "EIA"}


@dataclasses.dataclass
class TeacherSpec:
    branch: str
    lmax: int
    channels: int = 1
    seed: int = 0
    kernel: dict | None = None  # explicit ground-truth arrays; drawn from seed when None

    def __post_init__(self):
        if self.branch not in TEACHER_BRANCHES:
            raise InvalidArgument(f"unknown teacher branch {self.branch!r}")

    def to_dict(self) -> dict:
        kern = None
        if self.kernel is not None:
            kern = {}
            for k, v in self.kernel.items():
                v = np.asarray(v)
                kern[k] = {"re": v.real.tolist(), "im": v.imag.tolist()} if np.iscomplexobj(v) else v.tolist()
        return {"branch": self.branch, "lmax": self.lmax, "channels": self.channels, "seed": self.seed, "kernel": kern}

    @classmethod
    def from_dict(cls, d: dict) -> TeacherSpec:
        kern = d.get("kernel")
        if kern is not None:
            kern = {
                k: (np.asarray(v["re"]) + 1j * np.asarray(v["im"])) if isinstance(v, dict) else np.asarray(v, float)
                for k, v in kern.items()
            }
        return cls(d["branch"], int(d["lmax"]), int(d.get("channels", 1)), int(d.get("seed", 0)), kern)


def teacher_block(spec: TeacherSpec) -> GsnoBlock:
    """Linear single block (identity activation, no residual) realizing the teacher."""
    L, C = spec.lmax, spec.channels
    rng = np.random.default_rng([spec.seed, 7])
    kern = dict(spec.kernel or {})
    code = _BRANCH_CODE[spec.branch]
    block = GsnoBlock(L, C, C, code, activation="identity", residual=False)
    if "E" in code:
        w = kern.get("eq.weights")
        if w is None:
            w = np.eye(C)[None] * rng.uniform(0.5, 1.5, (L + 1, 1, 1)) + 0.3 * rng.standard_normal((L + 1, C, C)) / math.sqrt(C)
        block.equivariant = EquivariantKernel(np.array(w, dtype=float))
    if "I" in code:
        s = kern.get("inv.shape_table")
        if s is None:
            s = (rng.standard_normal((L + 1, L + 1, C)) + 1j * rng.standard_normal((L + 1, L + 1, C))) * 0.1
            s *= triangle_mask(L)[:, :, None]
            s[:, 0, :] = s[:, 0, :].real
        mix = kern.get("inv.input_mix")
        if mix is None:
            mix = np.eye(C) + 0.3 * rng.standard_normal((C, C))
        block.invariant = InvariantKernel(np.array(s, dtype=complex), np.array(mix, dtype=float))
    if "A" in code:
        d = kern.get("aniso.raw_dirs")
        if d is None:
            d = rng.standard_normal((C, 3))
        block.anisotropic = AnisotropicKernel(np.array(d, dtype=float))
    block.mix_weight = np.tile(np.eye(C), (1, len(code)))
    block.mix_bias = np.zeros(C)
    block.validate()
    return block


def teacher_pairs(spec: TeacherSpec, n: int, grid: SphericalGrid, decay: float = 0.0) -> Dataset:
    inputs, _ = random_batch(spec.lmax, spec.seed, grid, n, spec.channels, decay)
    block = teacher_block(spec)
    targets, _ = block_forward(block, inputs, grid)
    return Dataset(grid, inputs, targets, meta={"task": "teacher", "teacher": spec.to_dict()})


def teacher_transfer(block: GsnoBlock) -> np.ndarray:
    """Effective per-degree channel map of a linear E-only block: mix @ W[l]."""
    if block.branches != "E":
        raise InvalidArgument("transfer function is defined for equivariant-only blocks")
    return np.einsum("oc,lci->loi", block.mix_weight, block.equivariant.weights)


# -- rotation advection ------------------------------------------------------------------


def rotation_advection_trajectories(
    axis, dt: float, n_steps: int, seed, grid: SphericalGrid, lmax: int,
    n_trajectories: int = 1, decay: float = 1.0, channels: int = 1,
) -> np.ndarray:
    """States f_t = R^t f_0 with R the rotation by angle ``dt`` about ``axis``.

    Rotation is applied exactly in the spectral domain, so the trajectory has
    no time-integration error. Returns (n_trajectories, n_steps+1, nlat, nlon, C).
    """
    plan = get_plan(grid, lmax)
    rot = Rotation.about_axis(np.asarray(axis, float), dt)
    _, c = random_batch(lmax, seed, grid, n_trajectories, channels, decay)
    states = [plan.inverse(c)]
    for _ in range(n_steps):
        c = rotate_half(c, rot)
        states.append(plan.inverse(c))
    return np.stack(states, axis=1)


def rotation_advection_dataset(
    axis, dt: float, n_steps: int, seed, grid: SphericalGrid, lmax: int,
    n_trajectories: int = 1, decay: float = 1.0, channels: int = 1,
) -> Dataset:
    """One-step pairs (state_t, state_{t+1}) from every trajectory."""
    traj = rotation_advection_trajectories(axis, dt, n_steps, seed, grid, lmax, n_trajectories, decay, channels)
    x = traj[:, :-1].reshape((-1,) + traj.shape[2:])
    y = traj[:, 1:].reshape((-1,) + traj.shape[2:])
    meta = {"task": "advection", "axis": list(map(float, axis)), "dt": dt, "n_steps": n_steps, "lmax": lmax}
    return Dataset(grid, x, y, meta=meta)


def rollout(model: GsnoModel, x0: np.ndarray, n: int) -> np.ndarray:
    """Autoregressive predictions for steps 1..n: shape (n, *x0.shape)."""
    out = []
    x = x0
    for _ in range(n):
        x = model(x)
        out.append(x)
    return np.stack(out)


# -- MNIST ------------------------------------------------------------------------------


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed) of unsigned bytes."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    count = int(np.prod(dims))
    if len(data) - header != count:
        raise FormatError(f"{path}: payload has {len(data) - header} bytes, expected {count}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def _find(directory: Path, stem: str) -> Path:
    # both "train-images-idx3-ubyte" and "train-images.idx3-ubyte" circulate
    alt = stem.replace("-idx", ".idx")
    for name in (stem, alt, stem + ".gz", alt + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FormatError(f"{stem} not found in {directory}")


def mnist_ingest(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] with shape (N, 28, 28), and uint8 labels."""
    if split not in MNIST_FILES:
        raise InvalidArgument(f"split must be 'train' or 'test', got {split!r}")
    directory = Path(directory)
    img_name, lab_name = MNIST_FILES[split]
    img_path, lab_path = _find(directory, img_name), _find(directory, lab_name)
    images = read_idx(img_path)
    labels = read_idx(lab_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError("unexpected IDX dimensionality for MNIST")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise FormatError("label outside 0..9")
    return images.astype(np.float64) / 255.0, labels.copy()


def projection_matrix(grid: SphericalGrid, height: int = 28, width: int = 28, fov_deg: float = DEFAULT_FOV_DEG):
    """Sparse (nlat*nlon, height*width) backward ray-casting + bilinear operator.

    Each sphere point u in the northern hemisphere is cast along the ray from
    the sphere centre to the plane tangent at the north pole, hitting it at
    tan(theta) * (cos phi, sin phi). The image spans a square of half-width
    tan(fov/2) in that plane (x along columns, y up the rows); points outside
    it are zero.
    """
    half = math.tan(math.radians(fov_deg) / 2)
    th, ph = np.meshgrid(grid.colatitudes, grid.longitudes, indexing="ij")
    th, ph = th.ravel(), ph.ravel()
    front = th < np.pi / 2
    r = np.where(front, np.tan(np.where(front, th, 0.0)), np.inf)
    with np.errstate(invalid="ignore"):
        px = r * np.cos(ph)
        py = r * np.sin(ph)
    inside = front & (np.abs(px) <= half) & (np.abs(py) <= half)
    col = (px + half) / (2 * half) * width - 0.5
    row = (half - py) / (2 * half) * height - 0.5

    rows, cols, vals = [], [], []
    idx = np.nonzero(inside)[0]
    c0 = np.floor(col[idx]).astype(int)
    r0 = np.floor(row[idx]).astype(int)
    fc = col[idx] - c0
    fr = row[idx] - r0
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = np.clip(r0 + dr, 0, height - 1)
        cc = np.clip(c0 + dc, 0, width - 1)
        rows.append(idx)
        cols.append(rr * width + cc)
        vals.append(w)
    m = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.nlat * grid.nlon, height * width),
    )
    return m.tocsr()


def pixel_direction(row: float, col: float, height: int = 28, width: int = 28, fov_deg: float = DEFAULT_FOV_DEG):
    """Forward projection of a pixel centre onto the sphere: (theta, phi)."""
    half = math.tan(math.radians(fov_deg) / 2)
    x = (col + 0.5) / width * 2 * half - half
    y = half - (row + 0.5) / height * 2 * half
    return math.atan(math.hypot(x, y)), math.atan2(y, x) % (2 * math.pi)


def project_to_sphere(image, grid: SphericalGrid, fov_deg: float = DEFAULT_FOV_DEG) -> GridField:
    img = np.asarray(image, dtype=float)
    values = project_images(img[None], grid, fov_deg)[0]
    return GridField(grid, values)


def project_images(images: np.ndarray, grid: SphericalGrid, fov_deg: float = DEFAULT_FOV_DEG) -> np.ndarray:
    """(N, H, W) images -> (N, nlat, nlon, 1) fields."""
    n, h, w = images.shape
    m = projection_matrix(grid, h, w, fov_deg)
    flat = images.reshape(n, h * w)
    out = (m @ flat.T).T
    return out.reshape(n, grid.nlat, grid.nlon, 1)


def spherical_mnist(
    directory, grid: SphericalGrid, n_train: int, n_test: int, fov_deg: float = DEFAULT_FOV_DEG
) -> tuple[Dataset, Dataset]:
    """The first ``n_train`` / ``n_test`` images of the official splits, projected."""
    out = []
    for split, n in (("train", n_train), ("test", n_test)):
        images, labels = mnist_ingest(directory, split)
        images, labels = images[:n], labels[:n]
        fields = project_images(images, grid, fov_deg)
        out.append(Dataset(grid, fields, labels=labels.astype(np.int64), meta={"task": "mnist", "split": split}))
    return out[0], out[1]
