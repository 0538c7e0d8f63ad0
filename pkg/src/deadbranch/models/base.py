"""Shared machinery for the surrogate similarity models.

Every model computes in float64.  Parameters are kept at float32-representable
values so a saved and reloaded model is bit-identical to the original.
"""
from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from ..cfg import BinaryFunction
from ..features import FeatureView, extract

log = logging.getLogger(__name__)

DTYPE = torch.float64
WEIGHTS_MAGIC = b"DBWT"
WEIGHTS_VERSION = 1
# fixed so that results never depend on how many workers share the batches
CHUNK = 1024


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    """Targeted: 1 - sim; untargeted: sim; plus ``eps_reg * ||delta||_p``."""
    mode: str = "targeted"
    eps_reg: float = 0.01
    p: int = 2

    def __post_init__(self):
        if self.mode not in ("targeted", "untargeted"):
            raise ValueError(f"mode must be targeted or untargeted, got {self.mode!r}")
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")
        if not (np.isfinite(self.eps_reg) and self.eps_reg >= 0):
            raise ValueError("eps_reg must be finite and >= 0")

    def base_loss(self, sim: torch.Tensor) -> torch.Tensor:
        return 1.0 - sim if self.mode == "targeted" else sim

    def penalty(self, delta: torch.Tensor) -> torch.Tensor:
        if self.eps_reg == 0:
            return delta.new_zeros(())
        if self.p == 1:
            return self.eps_reg * delta.abs().sum()
        return self.eps_reg * torch.sqrt((delta * delta).sum())


@dataclass
class ModelWeights:
    family: str
    seed: int
    config: dict
    tensors: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)

    def equal(self, other: ModelWeights) -> bool:
        return (self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def snap_f32(t: torch.Tensor) -> torch.Tensor:
    return t.to(torch.float32).to(DTYPE)


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(1 + cos) / 2 via unit vectors, so identical inputs give exactly 1."""
    ua = a / torch.sqrt((a * a).sum(-1, keepdim=True) + 1e-24)
    ub = b / torch.sqrt((b * b).sum(-1, keepdim=True) + 1e-24)
    diff = ua - ub
    return (1.0 - 0.25 * (diff * diff).sum(-1)).clamp(0.0, 1.0)


class SimilarityModel(nn.Module):
    family: str = ""
    symmetric_embedding = True

    def __init__(self, seed: int = 0, **config):
        super().__init__()
        self.seed = seed
        self.config = config

    # -- construction helpers -------------------------------------------------
    def _param(self, gen: torch.Generator, *shape: int, scale: float | None = None) -> nn.Parameter:
        fan_in = shape[0] if len(shape) > 1 else 1
        s = scale if scale is not None else 1.0 / np.sqrt(fan_in)
        w = torch.randn(*shape, generator=gen, dtype=DTYPE) * s
        return nn.Parameter(snap_f32(w))

    def snap(self) -> None:
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(snap_f32(p))

    # -- feature side -----------------------------------------------------------
    def view(self, f: BinaryFunction | FeatureView) -> FeatureView:
        if isinstance(f, BinaryFunction):
            return extract(self.family, f, getattr(self, "vocab", None))
        if f.family != self.family:
            raise ValueError(f"{self.family} model cannot score a {f.family} view")
        return f

    def collate(self, views: Sequence[FeatureView]) -> dict:
        raise NotImplementedError

    def encode(self, batch: dict) -> torch.Tensor:
        raise NotImplementedError

    def pair_scores(self, a: dict, b: dict) -> torch.Tensor:
        """Similarity of row i of ``a`` with row i of ``b`` (or b's single row)."""
        return cosine_sim(self.encode(a), self.encode(b))

    # -- public scoring -------------------------------------------------------------
    @torch.no_grad()
    def sim(self, f1, f2) -> float:
        a, b = self.view(f1), self.view(f2)
        return float(self.pair_scores(self.collate([a]), self.collate([b]))[0])

    @torch.no_grad()
    def sim_many(self, views: Sequence[FeatureView], other, workers: int = 1) -> np.ndarray:
        """Scores of every view against ``other``, in fixed-size chunks."""
        other_batch = self.collate([self.view(other)])
        chunks = [views[k:k + CHUNK] for k in range(0, len(views), CHUNK)]

        @torch.no_grad()  # grad mode is thread-local
        def run(chunk):
            return self.pair_scores(self.collate(chunk), other_batch).numpy()

        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(c) for c in chunks]
        return np.concatenate(parts) if parts else np.zeros(0)

    # -- relaxed (white-box) side -------------------------------------------------------
    def relaxed_batch(self, relaxed, delta: torch.Tensor) -> dict:
        raise NotImplementedError

    def _relaxed_loss(self, relaxed, delta: torch.Tensor, other, spec: LossSpec):
        if tuple(delta.shape) != tuple(relaxed.delta_shape):
            raise ShapeMismatch(f"delta has shape {tuple(delta.shape)}, expected {relaxed.delta_shape}")
        other_batch = self.collate([self.view(other)])
        s = self.pair_scores(self.relaxed_batch(relaxed, delta), other_batch)[0]
        return spec.base_loss(s) + spec.penalty(delta), s

    def loss_and_gradient(self, relaxed, delta: np.ndarray, other, spec: LossSpec):
        """Loss at ``delta`` and its gradient with respect to ``delta``."""
        d = torch.tensor(np.asarray(delta, dtype=np.float64), requires_grad=True)
        loss, _ = self._relaxed_loss(relaxed, d, other, spec)
        (g,) = torch.autograd.grad(loss, d)
        return float(loss.detach()), g.numpy().copy()

    @torch.no_grad()
    def loss_value(self, relaxed, delta: np.ndarray, other, spec: LossSpec) -> float:
        loss, _ = self._relaxed_loss(relaxed, torch.tensor(np.asarray(delta, dtype=np.float64)),
                                     other, spec)
        return float(loss)

    @torch.no_grad()
    def relaxed_sim(self, relaxed, delta: np.ndarray, other) -> float:
        _, s = self._relaxed_loss(relaxed, torch.tensor(np.asarray(delta, dtype=np.float64)),
                                  other, LossSpec(eps_reg=0.0))
        return float(s)

    # -- weights ------------------------------------------------------------------
    def weights(self) -> ModelWeights:
        tensors = {k: v.detach().numpy().copy() for k, v in self.state_dict().items()}
        return ModelWeights(self.family, self.seed, dict(self.config), tensors, self._extra())

    def _extra(self) -> dict:
        return {}

    def load_weights(self, w: ModelWeights) -> None:
        if w.family != self.family:
            raise ValueError(f"weights are for {w.family}, model is {self.family}")
        state = {k: torch.tensor(v, dtype=DTYPE) for k, v in w.tensors.items()}
        self.load_state_dict(state)


def save_weights(w: ModelWeights, path: str | Path) -> None:
    manifest = {"family": w.family, "seed": w.seed, "config": w.config, "extra": w.extra,
                "tensors": []}
    blobs, offset = [], 0
    for name in sorted(w.tensors):
        arr = np.ascontiguousarray(w.tensors[name], dtype="<f4")
        manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset,
                                    "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def read_manifest(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"{path}: not a weights file")
        version, n = struct.unpack("<II", fh.read(8))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"{path}: unsupported weights version {version}")
        manifest = json.loads(fh.read(n).decode("utf-8"))
    manifest["version"] = version
    manifest["data_offset"] = 12 + n
    return manifest


def load_weights(path: str | Path) -> ModelWeights:
    manifest = read_manifest(path)
    with open(path, "rb") as fh:
        fh.seek(manifest["data_offset"])
        data = np.frombuffer(fh.read(), dtype="<f4")
    tensors = {}
    for t in manifest["tensors"]:
        arr = data[t["offset"]:t["offset"] + t["count"]].astype(np.float64)
        tensors[t["name"]] = arr.reshape(t["shape"])
    return ModelWeights(manifest["family"], manifest["seed"], manifest["config"], tensors,
                        manifest.get("extra", {}))


def describe(path: str | Path) -> str:
    m = read_manifest(path)
    lines = [f"family: {m['family']}", f"format version: {m['version']}", f"seed: {m['seed']}",
             f"config: {json.dumps(m['config'], sort_keys=True)}"]
    total = 0
    for t in m["tensors"]:
        lines.append(f"  {t['name']:<24} {'x'.join(map(str, t['shape'])) or 'scalar'}")
        total += t["count"]
    lines.append(f"total float32 values: {total}")
    return "\n".join(lines)
