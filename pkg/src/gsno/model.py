"""Stacked GSNO model, optional pooled classification head, and checkpoints.

A checkpoint is a directory holding ``manifest.json`` (architecture and the
ordered parameter list) and ``params.bin`` (little-endian float64, arrays
concatenated in manifest order, C-contiguous).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument
from .operators import (
    AnisotropicKernel,
    EquivariantKernel,
    GsnoBlock,
    InvariantKernel,
    block_forward,
    check_chain,
)
from .sphere import SphericalGrid, grid_from_descriptor, integrate

FORMAT_VERSION = 1


@dataclasses.dataclass(eq=False)
class ClassifierHead:
    """Quadrature-weighted global mean pooling followed by a dense softmax layer."""

    weight: np.ndarray  # (n_classes, channels)
    bias: np.ndarray  # (n_classes,)

    @classmethod
    def init(cls, channels: int, n_classes: int, rng: np.random.Generator) -> ClassifierHead:
        w = rng.standard_normal((n_classes, channels)) / math.sqrt(channels)
        return cls(w, np.zeros(n_classes))


def pool(values: np.ndarray, grid: SphericalGrid) -> np.ndarray:
    return integrate(values, grid) / (4 * math.pi)


@dataclasses.dataclass(eq=False)
class GsnoModel:
    grid: SphericalGrid
    blocks: list[GsnoBlock]
    head: ClassifierHead | None = None

    def __post_init__(self):
        check_chain(self.blocks)

    @classmethod
    def init(
        cls,
        grid: SphericalGrid,
        lmax: int,
        channels: list[int],
        rng: np.random.Generator,
        n_classes: int | None = None,
        output_activation: str | None = None,
        **block_kwargs,
    ) -> GsnoModel:
        """``channels`` lists the channel count at every layer boundary.

        ``output_activation`` replaces the activation of the last block only;
        None keeps the shared one.
        """
        pairs = list(zip(channels[:-1], channels[1:]))
        blocks = []
        for i, (c_in, c_out) in enumerate(pairs):
            kwargs = dict(block_kwargs)
            if output_activation is not None and i == len(pairs) - 1:
                kwargs["activation"] = output_activation
            blocks.append(GsnoBlock.init(lmax, c_in, c_out, rng, **kwargs))
        head = ClassifierHead.init(channels[-1], n_classes, rng) if n_classes else None
        return cls(grid, blocks, head)

    @property
    def in_channels(self) -> int:
        return self.blocks[0].c_in if self.blocks else -1

    def features(self, x: np.ndarray) -> np.ndarray:
        for block in self.blocks:
            x, _ = block_forward(block, x, self.grid)
        return x

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Grid output, or logits when a head is attached."""
        h = self.features(x)
        if self.head is None:
            return h
        return pool(h, self.grid) @ self.head.weight.T + self.head.bias

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, block in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{name}", arr) for name, arr in block.parameters())
        if self.head is not None:
            out.append(("head.weight", self.head.weight))
            out.append(("head.bias", self.head.bias))
        return out

    def parameter_blob(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in self.parameters())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.parameter_blob()).hexdigest()

    def manifest(self) -> dict:
        return {
            "format": "gsno-checkpoint",
            "version": FORMAT_VERSION,
            "grid": self.grid.descriptor(),
            "blocks": [b.config() for b in self.blocks],
            "head": None if self.head is None else {"n_classes": int(self.head.bias.size)},
            "parameters": [{"name": n, "shape": list(a.shape)} for n, a in self.parameters()],
            "dtype": "<f8",
        }

    def copy(self) -> GsnoModel:
        clone = _skeleton(self.manifest())
        for (_, dst), (_, src) in zip(clone.parameters(), self.parameters()):
            dst[...] = src
        return clone


def _skeleton(manifest: dict) -> GsnoModel:
    grid = grid_from_descriptor(manifest["grid"])
    blocks = []
    for cfg in manifest["blocks"]:
        L, ci, co = cfg["lmax"], cfg["c_in"], cfg["c_out"]
        block = GsnoBlock(L, ci, co, cfg["branches"], cfg["activation"], cfg["residual"])
        if "E" in block.branches:
            block.equivariant = EquivariantKernel(np.zeros((L + 1, ci, ci)))
        if "I" in block.branches:
            block.invariant = InvariantKernel(
                np.zeros((L + 1, L + 1, ci), dtype=complex), np.zeros((ci, ci))
            )
        if "A" in block.branches:
            shape = (ci, L + 1, 3) if cfg.get("per_degree_dirs") else (ci, 3)
            gain = np.zeros((L + 1, ci)) if cfg.get("aniso_gain") else None
            block.anisotropic = AnisotropicKernel(np.zeros(shape), gain)
        block.mix_weight = np.zeros((co, block.concat_width))
        block.mix_bias = np.zeros(co)
        block.validate()
        blocks.append(block)
    head = None
    if manifest.get("head"):
        n = manifest["head"]["n_classes"]
        c = blocks[-1].c_out if blocks else 1
        head = ClassifierHead(np.zeros((n, c)), np.zeros(n))
    return GsnoModel(grid, blocks, head)


def save_checkpoint(model: GsnoModel, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(model.manifest(), indent=2, sort_keys=True) + "\n")
    (path / "params.bin").write_bytes(model.parameter_blob())
    return path


def load_checkpoint(path) -> GsnoModel:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "params.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint at {path}: {exc}") from None
    if manifest.get("format") != "gsno-checkpoint":
        raise FormatError("not a gsno checkpoint manifest")
    try:
        model = _skeleton(manifest)
    except (KeyError, InvalidArgument) as exc:
        raise FormatError(f"bad checkpoint manifest: {exc}") from None
    params = model.parameters()
    declared = [(p["name"], tuple(p["shape"])) for p in manifest["parameters"]]
    if declared != [(n, a.shape) for n, a in params]:
        raise FormatError("manifest parameter list does not match the architecture")
    total = sum(a.size for _, a in params)
    if len(blob) != 8 * total:
        raise FormatError(f"parameter blob has {len(blob)} bytes, expected {8 * total}")
    flat = np.frombuffer(blob, dtype="<f8")
    offset = 0
    for _, arr in params:
        arr[...] = flat[offset : offset + arr.size].reshape(arr.shape)
        offset += arr.size
    return model
