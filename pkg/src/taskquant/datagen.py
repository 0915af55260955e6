"""Procedural synthetic segmentation scenes.

Each scene is a flat background (class 0) with 3-8 occluding shapes whose
class decides a base colour. The last shape drawn is always a small object
(under 1% of the pixels), so it is never occluded.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# class 0 is the background. Classes 1/2 and 3/4 are near hues (0.17 apart in
# one channel): telling them apart matters to the segmenter but costs little
# pixel error, which is where task-driven and pixel-driven codecs diverge.
PALETTE = np.array([
    [0.30, 0.30, 0.32],
    [0.85, 0.15, 0.15],
    [0.85, 0.32, 0.15],
    [0.15, 0.25, 0.85],
    [0.15, 0.42, 0.85],
    [0.15, 0.75, 0.20],
    [0.90, 0.85, 0.15],
    [0.80, 0.20, 0.80],
    [0.15, 0.80, 0.80],
    [0.95, 0.55, 0.10],
    [0.55, 0.30, 0.10],
    [0.95, 0.95, 0.95],
    [0.05, 0.05, 0.05],
    [0.50, 0.80, 0.50],
    [0.50, 0.10, 0.45],
    [0.60, 0.60, 0.90],
])
NOISE_AMPLITUDE = 0.05
COLOR_JITTER = 0.06
SMALL_FRACTION = 0.01

TRAIN_TAG = 0
VAL_TAG = 1


@dataclass(frozen=True)
class LabeledScene:
    image: np.ndarray   # (H, W, 3) float64 in [0, 1]
    labels: np.ndarray  # (H, W) uint8 class indices
    seed: int

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.image, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.uint8).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 200
    n_val: int = 50
    H: int = 64
    W: int = 64
    m: int = 5
    master_seed: int = 7

    def __post_init__(self):
        if self.H % 32 or self.W % 32:
            raise ValueError("H and W must be divisible by 32")
        if self.n_train < 0 or self.n_val < 0:
            raise ValueError("scene counts must be non-negative")


def mix_seed(master_seed: int, tag: int, index: int) -> int:
    """Derive an independent 64-bit scene seed from (master, split, index)."""
    ss = np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, tag, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF))


def _shape_mask(rng: np.random.Generator, kind: int, H: int, W: int,
                hh: int, ww: int) -> np.ndarray:
    top = int(rng.integers(0, H - hh + 1))
    left = int(rng.integers(0, W - ww + 1))
    yy, xx = np.mgrid[0:H, 0:W]
    yc, xc = yy + 0.5, xx + 0.5
    if kind == 0:
        return (yy >= top) & (yy < top + hh) & (xx >= left) & (xx < left + ww)
    if kind == 1:
        cy, cx = top + hh / 2, left + ww / 2
        return ((yc - cy) / (hh / 2)) ** 2 + ((xc - cx) / (ww / 2)) ** 2 <= 1.0
    # triangle: apex on the top edge, base on the bottom edge of the box
    apex = left + rng.uniform(0.0, ww)
    p = [(top, apex), (top + hh, left), (top + hh, left + ww)]

    def edge(a, b):
        return (xc - a[1]) * (b[0] - a[0]) - (yc - a[0]) * (b[1] - a[1])

    d0, d1, d2 = edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])
    neg = (d0 < 0) | (d1 < 0) | (d2 < 0)
    pos = (d0 > 0) | (d1 > 0) | (d2 > 0)
    return ~(neg & pos)


def generate_scene(seed: int, H: int, W: int, m: int,
                   noise: float = NOISE_AMPLITUDE) -> LabeledScene:
    if m < 1:
        raise ValueError("need at least one class")
    if m > len(PALETTE):
        raise ValueError(f"class count {m} exceeds palette size {len(PALETTE)}")
    if H < 16 or W < 16:
        raise ValueError("scenes must be at least 16x16")
    rng = _rng(seed)
    labels = np.zeros((H, W), dtype=np.uint8)
    clean = np.broadcast_to(PALETTE[0], (H, W, 3)).copy()

    n_shapes = int(rng.integers(3, 9))
    small_side = max(1, int(np.sqrt(SMALL_FRACTION * H * W * 0.8)))
    small_min = min(2, small_side)
    for s in range(n_shapes):
        kind = int(rng.integers(0, 3))
        cls = int(rng.integers(1, m)) if m > 1 else 0
        if s == n_shapes - 1:
            kind = 0
            hh = int(rng.integers(small_min, small_side + 1))
            ww = int(rng.integers(small_min, small_side + 1))
        else:
            hh = int(rng.integers(H // 8, H // 2 + 1))
            ww = int(rng.integers(W // 8, W // 2 + 1))
        mask = _shape_mask(rng, kind, H, W, hh, ww)
        color = np.clip(PALETTE[cls] + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3), 0.0, 1.0)
        if m > 1:
            labels[mask] = cls
            clean[mask] = color

    pixel_noise = rng.uniform(-1.0, 1.0, (H, W, 3))
    image = np.clip(clean + noise * pixel_noise, 0.0, 1.0)
    return LabeledScene(image=image, labels=labels, seed=seed)


def make_dataset(spec: DatasetSpec) -> tuple[list[LabeledScene], list[LabeledScene]]:
    train = [generate_scene(mix_seed(spec.master_seed, TRAIN_TAG, i), spec.H, spec.W, spec.m)
             for i in range(spec.n_train)]
    val = [generate_scene(mix_seed(spec.master_seed, VAL_TAG, i), spec.H, spec.W, spec.m)
           for i in range(spec.n_val)]
    return train, val


def stack(scenes: list[LabeledScene], dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Batch scenes into (N, H, W, 3) images and (N, H, W) labels."""
    if not scenes:
        return np.zeros((0, 0, 0, 3), dtype=dtype), np.zeros((0, 0, 0), dtype=np.uint8)
    return (np.stack([s.image for s in scenes]).astype(dtype),
            np.stack([s.labels for s in scenes]))


def export_scene(scene: LabeledScene, m: int, path: str | Path) -> None:
    """Write b"GOSD", u16 H, u16 W, u8 m, then RGB bytes and label bytes, row-major."""
    H, W = scene.labels.shape
    rgb = np.round(scene.image * 255.0).astype(np.uint8)
    Path(path).write_bytes(b"GOSD" + struct.pack("<HHB", H, W, m)
                           + rgb.tobytes() + scene.labels.astype(np.uint8).tobytes())


def import_scene(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    blob = Path(path).read_bytes()
    if blob[:4] != b"GOSD":
        raise ValueError("bad scene magic")
    H, W, m = struct.unpack_from("<HHB", blob, 4)
    off = 9
    rgb = np.frombuffer(blob, np.uint8, H * W * 3, off).reshape(H, W, 3)
    labels = np.frombuffer(blob, np.uint8, H * W, off + H * W * 3).reshape(H, W)
    return rgb, labels, m
