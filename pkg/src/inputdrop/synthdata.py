"""Seeded synthetic RGB+D datasets.

Classification: each image holds one object whose class is (shape, height
profile). The profile is a dome or a bowl; depth always shows it, while the
RGB image shows it as brightness only for a ``1 - rho`` share of samples.
For the rest the object is flat-lit, so RGB alone cannot tell the two
profiles apart.

Dehazing: clear procedural scenes with a smooth depth field, hazed with the
atmospheric scattering model ``I = J t + A (1 - t)``, ``t = exp(-beta d)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .container import read_container, write_container
from .modality import ModalityLayout, MultimodalBatch
from .seeding import derive_seed

SHAPES = ("disk", "square", "diamond", "cross")
SPLITS = ("train", "val", "test")

# height field: background 0, object heights in [BASE, BASE + AMPLITUDE]
HEIGHT_BASE = 0.3
HEIGHT_AMPLITUDE = 0.6


def spec_hash(spec) -> str:
    payload = json.dumps(asdict(spec), sort_keys=True, default=list)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SynthClassTaskSpec:
    num_classes: int = 6
    n_train: int = 600
    n_val: int = 200
    n_test: int = 1200
    image_size: int = 32
    rgb_noise: float = 0.35
    rho: float = 0.5
    rgb_cue_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes % 2 or self.num_classes // 2 > len(SHAPES):
            raise ValueError(f"num_classes must be even and at most {2 * len(SHAPES)}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.rgb_noise < 0:
            raise ValueError("rgb_noise must be non-negative")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


@dataclass
class LabeledSplit:
    batch: MultimodalBatch
    labels: torch.Tensor
    cue_in_rgb: torch.Tensor

    def __len__(self):
        return len(self.labels)


RGBD_LAYOUT = ModalityLayout((("rgb", 3), ("depth", 1)), canonical="rgb")


def _shape_mask(shape: str, cx, cy, r, yy, xx) -> np.ndarray:
    if shape == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "square":
        return (np.abs(xx - cx) <= 0.85 * r) & (np.abs(yy - cy) <= 0.85 * r)
    if shape == "diamond":
        return np.abs(xx - cx) + np.abs(yy - cy) <= 1.2 * r
    if shape == "cross":
        return ((np.abs(xx - cx) <= 0.35 * r) & (np.abs(yy - cy) <= r)) | (
            (np.abs(yy - cy) <= 0.35 * r) & (np.abs(xx - cx) <= r)
        )
    raise ValueError(shape)


def _classification_split(spec: SynthClassTaskSpec, split: str):
    n = spec.split_size(split)
    size = spec.image_size
    rng = np.random.default_rng(derive_seed(spec.seed, SPLITS.index(split), "synth/classification"))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.zeros((n, 4, size, size), dtype=np.float32)
    labels = np.arange(n) % spec.num_classes
    cue = np.zeros(n, dtype=bool)
    scale = size / 32.0
    mid = HEIGHT_BASE + HEIGHT_AMPLITUDE / 2
    for i in range(n):
        shape = SHAPES[labels[i] // 2]
        dome = labels[i] % 2 == 0
        r = rng.uniform(6, 10) * scale
        cx, cy = rng.uniform(r, size - r, size=2)
        mask = _shape_mask(shape, cx, cy, r, yy, xx)
        bump = np.clip(1 - ((xx - cx) ** 2 + (yy - cy) ** 2) / (r * r), 0, 1)
        if dome:
            height = mask * (HEIGHT_BASE + HEIGHT_AMPLITUDE * bump)
        else:
            height = mask * (HEIGHT_BASE + HEIGHT_AMPLITUDE * (1 - bump))
        cue[i] = rng.random() >= spec.rho
        background = rng.uniform(0.0, 0.2, 3)
        albedo = rng.uniform(0.8, 1.0) + rng.uniform(-0.1, 0.1, 3)
        if cue[i]:
            shading = mask * (mid + spec.rgb_cue_strength * (height - mid))
        else:
            shading = mask * mid
        rgb = np.where(mask[None], albedo[:, None, None] * shading[None], background[:, None, None])
        rgb = rgb + rng.normal(0.0, spec.rgb_noise, rgb.shape)
        images[i, :3] = np.clip(rgb, 0.0, 1.0)
        images[i, 3] = height
    order = rng.permutation(n)
    return images[order], labels[order], cue[order]


def generate_classification_dataset(spec: SynthClassTaskSpec) -> dict[str, LabeledSplit]:
    out = {}
    for split in SPLITS:
        images, labels, cue = _classification_split(spec, split)
        out[split] = LabeledSplit(
            MultimodalBatch(torch.from_numpy(images), RGBD_LAYOUT),
            torch.from_numpy(labels).long(),
            torch.from_numpy(cue),
        )
    return out


# ---------------------------------------------------------------------------
# haze


@dataclass(frozen=True)
class SynthHazeParams:
    airlight: tuple[float, float, float] = (0.9, 0.9, 0.9)
    beta: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.airlight, dtype=np.float64)
        if a.shape != (3,) or np.any(a <= 0) or np.any(a > 1):
            raise ValueError("airlight must be three values in (0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


def _airlight(airlight, like: np.ndarray) -> np.ndarray:
    a = np.asarray(airlight, dtype=np.float64)
    # broadcast over the channel axis of C x H x W or N x C x H x W
    return a.reshape((3, 1, 1) if like.ndim == 3 else (1, 3, 1, 1))


def transmission(depth, beta: float) -> np.ndarray:
    return np.exp(-beta * np.asarray(depth, dtype=np.float64))


def synthesize_haze(clear, depth, params: SynthHazeParams) -> np.ndarray:
    """``I = J t + A (1 - t)`` per pixel; ``depth`` broadcasts over channels."""
    clear = np.asarray(clear, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if params.beta < 0:
        raise ValueError("beta must be non-negative")
    if np.any(depth < 0):
        raise ValueError("depth must be non-negative")
    if np.any(clear < 0) or np.any(clear > 1):
        raise ValueError("clear image must lie in [0, 1]")
    t = transmission(depth, params.beta)
    a = _airlight(params.airlight, clear)
    return clear * t + a * (1.0 - t)


def remove_haze(hazy, depth, params: SynthHazeParams) -> np.ndarray:
    """Invert :func:`synthesize_haze` given the true depth, airlight and beta."""
    hazy = np.asarray(hazy, dtype=np.float64)
    t = transmission(depth, params.beta)
    a = _airlight(params.airlight, hazy)
    return (hazy - a * (1.0 - t)) / t


@dataclass(frozen=True)
class SynthDehazeTaskSpec:
    n_train: int = 256
    n_val: int = 32
    n_test: int = 64
    image_size: int = 32
    beta_range: tuple[float, float] = (0.8, 2.0)
    airlight_range: tuple[float, float] = (0.75, 0.95)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beta_range", tuple(self.beta_range))
        object.__setattr__(self, "airlight_range", tuple(self.airlight_range))
        lo, hi = self.beta_range
        if lo < 0 or hi < lo:
            raise ValueError("beta_range must be 0 <= lo <= hi")
        alo, ahi = self.airlight_range
        if not (0 < alo <= ahi <= 1):
            raise ValueError("airlight_range must satisfy 0 < lo <= hi <= 1")

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


@dataclass
class DehazeSplit:
    batch: MultimodalBatch  # hazy rgb + depth
    clear: torch.Tensor
    beta: torch.Tensor
    airlight: torch.Tensor

    def __len__(self):
        return len(self.clear)


def _smooth_field(rng, size, n_bumps=4) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    f = np.zeros((size, size))
    for _ in range(n_bumps):
        cx, cy = rng.uniform(0, 1, 2)
        s = rng.uniform(0.15, 0.4)
        f += rng.uniform(-1, 1) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    return f


def _clear_scene(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    # far at the top, near at the bottom, gently perturbed
    depth = 0.95 - 0.8 * yy + 0.08 * _smooth_field(rng, size)
    top, bottom = rng.uniform(0.2, 0.9, 3), rng.uniform(0.1, 0.8, 3)
    rgb = top[:, None, None] * (1 - yy) + bottom[:, None, None] * yy
    rgb = rgb + 0.1 * _smooth_field(rng, size)[None]
    for _ in range(rng.integers(2, 5)):
        w, h = rng.integers(size // 8, size // 3, 2)
        x0, y0 = rng.integers(0, size - w), rng.integers(0, size - h)
        rgb[:, y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.0, 1.0, 3)[:, None, None]
        # objects stand in front of the background
        depth[y0 : y0 + h, x0 : x0 + w] = np.minimum(
            depth[y0 : y0 + h, x0 : x0 + w], rng.uniform(0.05, 0.6)
        )
    return np.clip(rgb, 0.0, 1.0), np.clip(depth, 0.0, 1.0)


def generate_dehaze_dataset(spec: SynthDehazeTaskSpec) -> dict[str, DehazeSplit]:
    out = {}
    for k, split in enumerate(SPLITS):
        n, size = spec.split_size(split), spec.image_size
        rng = np.random.default_rng(derive_seed(spec.seed, k, "synth/dehaze"))
        hazy = np.zeros((n, 3, size, size))
        clear = np.zeros((n, 3, size, size))
        depth = np.zeros((n, 1, size, size))
        betas = np.zeros(n)
        airs = np.zeros((n, 3))
        for i in range(n):
            j, d = _clear_scene(rng, size)
            params = SynthHazeParams(
                airlight=tuple(rng.uniform(*spec.airlight_range) * np.ones(3)),
                beta=float(rng.uniform(*spec.beta_range)),
            )
            hazy[i] = synthesize_haze(j, d[None], params)
            clear[i], depth[i] = j, d
            betas[i], airs[i] = params.beta, params.airlight
        data = torch.from_numpy(np.concatenate([hazy, depth], axis=1).astype(np.float32))
        out[split] = DehazeSplit(
            MultimodalBatch(data, RGBD_LAYOUT),
            torch.from_numpy(clear.astype(np.float32)),
            torch.from_numpy(betas),
            torch.from_numpy(airs),
        )
    return out


# ---------------------------------------------------------------------------
# persistence


def save_classification_dataset(data: dict[str, LabeledSplit], spec: SynthClassTaskSpec, path) -> Path:
    arrays = {}
    for split, s in data.items():
        arrays[f"{split}/images"] = s.batch.data.numpy()
        arrays[f"{split}/labels"] = s.labels.numpy()
        arrays[f"{split}/cue_in_rgb"] = s.cue_in_rgb.numpy()
    return write_container(
        path,
        arrays,
        layout=RGBD_LAYOUT.to_dict(),
        seed=spec.seed,
        spec_hash=spec_hash(spec),
        meta={"kind": "classification", "spec": asdict(spec)},
    )


def load_classification_dataset(path) -> tuple[dict[str, LabeledSplit], SynthClassTaskSpec]:
    header, arrays = read_container(path)
    if header["meta"].get("kind") != "classification":
        raise ValueError(f"{path} does not hold a classification dataset")
    layout = ModalityLayout.from_dict(header["layout"])
    spec = SynthClassTaskSpec(**header["meta"]["spec"])
    out = {}
    for split in SPLITS:
        out[split] = LabeledSplit(
            MultimodalBatch(torch.from_numpy(arrays[f"{split}/images"]), layout),
            torch.from_numpy(arrays[f"{split}/labels"]).long(),
            torch.from_numpy(arrays[f"{split}/cue_in_rgb"]).bool(),
        )
    return out, spec


def save_dehaze_dataset(data: dict[str, DehazeSplit], spec: SynthDehazeTaskSpec, path) -> Path:
    arrays = {}
    for split, s in data.items():
        arrays[f"{split}/input"] = s.batch.data.numpy()
        arrays[f"{split}/clear"] = s.clear.numpy()
        arrays[f"{split}/beta"] = s.beta.numpy()
        arrays[f"{split}/airlight"] = s.airlight.numpy()
    return write_container(
        path,
        arrays,
        layout=RGBD_LAYOUT.to_dict(),
        seed=spec.seed,
        spec_hash=spec_hash(spec),
        meta={"kind": "dehaze", "spec": asdict(spec)},
    )


def load_dehaze_dataset(path) -> tuple[dict[str, DehazeSplit], SynthDehazeTaskSpec]:
    header, arrays = read_container(path)
    if header["meta"].get("kind") != "dehaze":
        raise ValueError(f"{path} does not hold a dehazing dataset")
    layout = ModalityLayout.from_dict(header["layout"])
    spec = SynthDehazeTaskSpec(**header["meta"]["spec"])
    out = {}
    for split in SPLITS:
        out[split] = DehazeSplit(
            MultimodalBatch(torch.from_numpy(arrays[f"{split}/input"]), layout),
            torch.from_numpy(arrays[f"{split}/clear"]),
            torch.from_numpy(arrays[f"{split}/beta"].astype(np.float64)),
            torch.from_numpy(arrays[f"{split}/airlight"].astype(np.float64)),
        )
    return out, spec
