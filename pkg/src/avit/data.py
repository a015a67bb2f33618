"""Datasets on disk, the synthetic lesion generator, and k-fold splits."""
from __future__ import annotations

import os
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from . import netpbm
from .errors import InputError
from .tensor import interp_matrix
from .train import Sample

PathLike = Union[str, os.PathLike]


# resizing -------------------------------------------------------------------


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear (half-pixel) resize of a (C, H, W) float image to size x size."""
    _, H, W = img.shape
    if (H, W) == (size, size):
        return img
    Ah = interp_matrix(H, size)
    Aw = interp_matrix(W, size)
    return (Ah @ img.astype(np.float64) @ Aw.T).astype(img.dtype)


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    _, H, W = mask.shape
    if (H, W) == (size, size):
        return mask
    rows = np.minimum(((np.arange(size) + 0.5) * H / size).astype(int), H - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * W / size).astype(int), W - 1)
    return mask[:, rows][:, :, cols]


# loading --------------------------------------------------------------------


def load_dataset(directory: PathLike, image_size: int = None) -> List[Sample]:
    """Read ``<id>.ppm`` / ``<id>_mask.pgm`` pairs in lexicographic id order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"dataset directory {directory} does not exist")
    samples = []
    for img_path in sorted(directory.glob("*.ppm")):
        sid = img_path.stem
        mask_path = directory / f"{sid}_mask.pgm"
        if not mask_path.exists():
            raise InputError(f"image {sid!r} has no mask file {mask_path.name}")
        rgb = netpbm.read(img_path)
        m = netpbm.read(mask_path)
        if rgb.ndim != 3 or m.ndim != 2:
            raise InputError(f"{sid}: expected an RGB .ppm and a greyscale .pgm")
        if rgb.shape[:2] != m.shape:
            raise InputError(f"{sid}: image {rgb.shape[:2]} and mask {m.shape} sizes differ")
        image = rgb.transpose(2, 0, 1).astype(np.float32) / 255.0
        mask = (m >= 128).astype(np.float32)[None]
        if image_size is not None:
            image = resize_image(image, image_size)
            mask = resize_nearest(mask, image_size)
        samples.append(Sample(image, mask, sid))
    return samples


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def write_sample(directory: PathLike, sample: Sample) -> None:
    directory = Path(directory)
    netpbm.write(directory / f"{sample.id}.ppm", to_uint8(sample.image.transpose(1, 2, 0)))
    netpbm.write(directory / f"{sample.id}_mask.pgm", (sample.mask[0] > 0.5).astype(np.uint8) * 255)


# synthetic lesions ----------------------------------------------------------

MIN_FRACTION = 0.02
MAX_FRACTION = 0.60


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    A = interp_matrix(cells, size)
    return A @ coarse @ A.T


def _ellipses(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        ay, ax = rng.uniform(0.08, 0.3, size=2) * size
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(th) + dx * np.sin(th)
        v = -dy * np.sin(th) + dx * np.cos(th)
        mask |= (u / ay) ** 2 + (v / ax) ** 2 <= 1.0
    return mask


def synth_sample(rng: np.random.Generator, size: int, easy: bool = False, sid: str = "") -> Sample:
    """One skin-like image: smooth shaded background, 1-3 textured elliptical lesions."""
    while True:
        mask = _ellipses(rng, size)
        frac = mask.mean()
        if MIN_FRACTION <= frac <= MAX_FRACTION:
            break
    skin = np.array([0.85, 0.65, 0.55]) + rng.uniform(-0.05, 0.05, size=3)
    if easy:
        lesion = np.array([0.15, 0.08, 0.05]) + rng.uniform(0.0, 0.05, size=3)
        shade, noise, texture = 0.03, 0.01, 0.01
    else:
        lesion = skin - rng.uniform(0.18, 0.4) * np.array([1.0, 1.1, 1.2])
        shade, noise, texture = 0.22, 0.05, 0.06
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    g = rng.uniform(-1, 1, size=2)
    shading = shade * (g[0] * yy + g[1] * xx) * 2 + 0.5 * shade * _smooth_noise(rng, size, 4)
    tex = texture * _smooth_noise(rng, size, size // 4)
    img = np.where(mask[None], lesion[:, None, None] + tex[None], skin[:, None, None])
    img = img + shading[None] + noise * rng.standard_normal((3, size, size))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, mask[None].astype(np.float32), sid)


def synth_dataset(n: int, size: int, seed: int, easy: bool = False) -> List[Sample]:
    rng = np.random.default_rng(seed)
    width = max(4, len(str(n - 1)))
    return [synth_sample(rng, size, easy, f"s{i:0{width}d}") for i in range(n)]


def make_synthetic(n: int, size: int, out_dir: PathLike, seed: int = 0, easy: bool = False) -> List[Sample]:
    """Write ``n`` synthetic samples as PPM/PGM pairs; byte-reproducible given ``seed``."""
    if size % 16 or size % 4:
        raise InputError(f"synthetic image size must be divisible by 16, got {size}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = synth_dataset(n, size, seed, easy)
    for s in samples:
        write_sample(out, s)
    return samples


def threshold_predict(sample: Sample, level: float = 0.4) -> np.ndarray:
    """Intensity-threshold baseline: dark pixels are lesion."""
    return sample.image.mean(axis=0) < level


# k-fold ---------------------------------------------------------------------


def kfold_split(n_samples: int, k: int, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle cut into k contiguous folds; the first n % k folds get one extra."""
    if k < 2:
        raise InputError(f"need at least 2 folds, got {k}")
    if n_samples < k:
        raise InputError(f"cannot split {n_samples} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n_samples)
    base, extra = divmod(n_samples, k)
    folds = []
    start = 0
    for i in range(k):
        stop = start + base + (1 if i < extra else 0)
        test = np.sort(perm[start:stop])
        train = np.sort(np.concatenate([perm[:start], perm[stop:]]))
        folds.append((train, test))
        start = stop
    return folds


def subset(samples: Sequence[Sample], idx) -> List[Sample]:
    return [samples[int(i)] for i in idx]
