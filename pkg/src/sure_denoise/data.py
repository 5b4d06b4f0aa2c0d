"""Dataset ingestion (MNIST IDX, PGM, synthetic), patching, batching and
image metrics. All images are float64 [N,C,H,W] with intensities in [0,1]."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import DataError

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class Dataset:
    """Clean images are optional: GT-free datasets carry only noisy images
    and refuse any ground-truth access."""

    noisy: Optional[np.ndarray] = None     # [N,C,H,W]
    clean: Optional[np.ndarray] = None     # [N,C,H,W]
    sigma: Optional[np.ndarray] = None     # per-sample noise level, [N]
    labels: Optional[np.ndarray] = None
    name: str = "dataset"

    def __len__(self):
        arr = self.noisy if self.noisy is not None else self.clean
        return 0 if arr is None else arr.shape[0]

    @property
    def has_clean(self) -> bool:
        return self.clean is not None

    def require_clean(self) -> np.ndarray:
        if self.clean is None:
            raise DataError(
                f"dataset '{self.name}' has no ground truth; "
                "this code path requires clean images"
            )
        return self.clean


@dataclass
class Batch:
    y: np.ndarray                     # [M,C,H,W]
    x: Optional[np.ndarray]           # same shape, or None for GT-free
    sigma: Optional[np.ndarray]       # [M]
    epoch: int
    index: int
    sel: Optional[np.ndarray] = None  # dataset indices of the batch samples


# ---------------------------------------------------------------------------
# MNIST IDX
# ---------------------------------------------------------------------------

def _read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise DataError(f"{path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != IDX_MAGIC_IMAGES:
        raise DataError(f"{path}: bad IDX magic {magic:#010x}, expected {IDX_MAGIC_IMAGES:#010x}")
    expected = 16 + n * rows * cols
    if len(raw) < expected:
        raise DataError(f"{path}: truncated IDX payload ({len(raw)} < {expected} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def _read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">ii", raw[:8])
    if magic != IDX_MAGIC_LABELS:
        raise DataError(f"{path}: bad IDX magic {magic:#010x}, expected {IDX_MAGIC_LABELS:#010x}")
    if len(raw) < 8 + n:
        raise DataError(f"{path}: truncated IDX payload")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).copy()


def load_mnist_idx(images_path, labels_path=None) -> Dataset:
    images = _read_idx_images(images_path)
    labels = None
    if labels_path is not None:
        labels = _read_idx_labels(labels_path)
        if labels.shape[0] != images.shape[0]:
            raise DataError(
                f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}"
            )
    return Dataset(clean=images, labels=labels, name=str(images_path))


# ---------------------------------------------------------------------------
# synthetic images
# ---------------------------------------------------------------------------

def _stroke_image(h, w, rng) -> np.ndarray:
    """A few thick random polyline strokes on black background, lightly
    blurred; crude stand-in for handwritten-digit-like content."""
    img = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(2, 5)):
        npts = rng.integers(2, 4)
        pts = rng.uniform([2, 2], [h - 3, w - 3], size=(npts + 1, 2))
        thickness = rng.uniform(0.9, 1.8)
        ink = rng.uniform(0.7, 1.0)
        for a, b in zip(pts[:-1], pts[1:]):
            for t in np.linspace(0, 1, 3 * int(np.hypot(*(b - a)) + 1)):
                cy, cx = a + t * (b - a)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= thickness ** 2
                img[mask] = ink
    # 3x3 box blur softens the edges
    p = np.pad(img, 1)
    img = sum(
        p[i:i + h, j:j + w] for i in range(3) for j in range(3)
    ) / 9.0
    return np.clip(img, 0.0, 1.0)


def _gradient_image(h, w, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    a, b = rng.uniform(-1, 1, size=2)
    ramp = a * xx / w + b * yy / h
    ramp = ramp + 0.3 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * xx / w + rng.uniform(0, 2 * np.pi))
    lo, hi = ramp.min(), ramp.max()
    return (ramp - lo) / (hi - lo) if hi > lo else np.full((h, w), 0.5)


def _checker_image(h, w, rng, period: int = 8) -> np.ndarray:
    oy, ox = rng.integers(0, period, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    cells = ((yy + oy) // period + (xx + ox) // period) % 2
    return np.where(cells == 0, 0.2, 0.8)


_SYNTH_KINDS = {
    "strokes": _stroke_image,
    "gradients": _gradient_image,
    "checker": _checker_image,
}


def generate_synthetic(n: int, size: Tuple[int, int], kind: str, rng) -> Dataset:
    if kind not in _SYNTH_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    h, w = size
    images = np.stack([_SYNTH_KINDS[kind](h, w, rng) for _ in range(n)])
    return Dataset(clean=images[:, None, :, :], name=f"synthetic-{kind}")


# ---------------------------------------------------------------------------
# patches / batches
# ---------------------------------------------------------------------------

def extract_patches(ds: Dataset, patch: Tuple[int, int], count: int, rng) -> Dataset:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    ph, pw = patch
    src = ds.clean if ds.clean is not None else ds.noisy
    n, c, h, w = src.shape
    if ph > h or pw > w:
        raise DataError(f"patch {patch} larger than image {(h, w)}")
    idx = rng.integers(0, n, size=count)
    tops = rng.integers(0, h - ph + 1, size=count)
    lefts = rng.integers(0, w - pw + 1, size=count)

    def crop(arr):
        return np.stack([
            arr[i, :, t:t + ph, l:l + pw] for i, t, l in zip(idx, tops, lefts)
        ])

    return Dataset(
        noisy=crop(ds.noisy) if ds.noisy is not None else None,
        clean=crop(ds.clean) if ds.clean is not None else None,
        sigma=ds.sigma[idx].copy() if ds.sigma is not None else None,
        name=f"{ds.name}-patches",
    )


def batches(ds: Dataset, M: int, epoch_seed: int, epoch: int = 0) -> Iterator[Batch]:
    """One epoch of minibatches: fresh random permutation, every sample used
    exactly once, final short batch kept."""
    n = len(ds)
    if M > n:
        raise DataError(f"batch size {M} exceeds dataset size {n}")
    perm = np.random.default_rng(epoch_seed).permutation(n)
    for bi, start in enumerate(range(0, n, M)):
        sel = perm[start:start + M]
        yield Batch(
            y=ds.noisy[sel] if ds.noisy is not None else None,
            x=ds.clean[sel] if ds.clean is not None else None,
            sigma=ds.sigma[sel] if ds.sigma is not None else None,
            epoch=epoch,
            index=bi,
            sel=sel,
        )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); identical inputs give the inf sentinel."""
    if a.shape != b.shape:
        raise DataError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise DataError("psnr peak must be > 0")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255)
# ---------------------------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 4 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise DataError(f"write_pgm expects a single grayscale image, got shape {img.shape}")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(raw):
        # skip whitespace and '#' comments
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace():
            i += 1
        tokens.append(raw[start:i])
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary P5 PGM")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval} (only 255)")
    i += 1  # single whitespace after maxval
    if len(raw) - i < w * h:
        raise DataError(f"{path}: truncated PGM payload")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=i)
    return pixels.reshape(h, w).astype(np.float64) / 255.0
