"""Image I/O, paired low/normal-light datasets, patch sampling and PSNR/SSIM.

Images live in two layouts:

* ``ImageTensor`` at the I/O boundary: a float32 numpy array of shape
  ``(H, W, C)`` with values in ``[0, 1]``.
* batched torch tensors ``(N, C, H, W)`` inside the models and losses.

:func:`to_tensor` and :func:`to_image` convert between the two.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import (
    CorruptData,
    EmptyDataset,
    ImageTooSmall,
    InvalidImage,
    MissingFile,
    PatchTooLarge,
    ShapeMismatch,
    UnsupportedFormat,
    WriteFailure,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def check_image(img, name: str = "image") -> None:
    """Raise :class:`InvalidImage` unless ``img`` is finite and inside [0, 1]."""
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    if arr.ndim < 2 or min(arr.shape[:2]) < 1:
        raise InvalidImage(f"{name}: expected H x W (x C) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidImage(f"{name}: contains NaN or Inf")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InvalidImage(f"{name}: values outside [0, 1] (min={arr.min()}, max={arr.max()})")


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """``(H, W, C)`` numpy image -> ``(1, C, H, W)`` float32 tensor."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def to_image(t: torch.Tensor) -> np.ndarray:
    """``(1, C, H, W)`` or ``(C, H, W)`` tensor -> ``(H, W, C)`` float32 numpy image."""
    t = t.detach().cpu()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ShapeMismatch(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    return np.ascontiguousarray(t.numpy().transpose(1, 2, 0)).astype(np.float32)


# ----------------------------------------------------------------------------
# I/O


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG/JPEG into an ``(H, W, C)`` float32 array in [0, 1].

    Grayscale files give ``C = 1``; everything else is converted to RGB.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise UnsupportedFormat(f"{path}: format {im.format!r} is not PNG/JPEG")
            if im.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise UnsupportedFormat(f"{path}: mode {im.mode!r} is not 8-bit")
            im.load()
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.uint8)[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptData(f"{path}: {exc}") from exc
    return arr.astype(np.float32) / np.float32(255.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-half-up to the 8-bit grid: ``floor(v * 255 + 0.5)`` clamped to [0, 255]."""
    q = np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write an image-valued array as an 8-bit PNG."""
    check_image(img)
    arr = quantize(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 3 and arr.shape[2] != 3:
        raise InvalidImage(f"cannot save {arr.shape[2]}-channel image")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise WriteFailure(f"could not write {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class PairedSample:
    low: np.ndarray
    high: np.ndarray
    identifier: str

    def __post_init__(self):
        if self.low.shape != self.high.shape:
            raise ShapeMismatch(
                f"{self.identifier}: low {self.low.shape} vs high {self.high.shape}"
            )


@dataclass(frozen=True)
class Dataset:
    samples: tuple[PairedSample, ...]
    root: Path | None = None

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def _image_files(directory: Path) -> dict[str, Path]:
    return {
        p.name: p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


def load_dataset(root) -> Dataset:
    """Pair ``<root>/low/<name>`` with ``<root>/high/<name>`` by filename."""
    root = Path(root)
    low_dir, high_dir = root / "low", root / "high"
    for d in (low_dir, high_dir):
        if not d.is_dir():
            raise MissingFile(f"dataset directory missing: {d}")
    low, high = _image_files(low_dir), _image_files(high_dir)
    unmatched = sorted(set(low) ^ set(high))
    if unmatched:
        log.warning("skipping %d unpaired files: %s", len(unmatched), ", ".join(unmatched[:5]))
    names = sorted(set(low) & set(high))
    if not names:
        raise EmptyDataset(f"no paired images under {root}")
    samples = tuple(
        PairedSample(load_image(low[n]), load_image(high[n]), Path(n).stem) for n in names
    )
    return Dataset(samples, root)


def sample_patch_pair(
    sample: PairedSample,
    size: int,
    rng: np.random.Generator,
    levels: int = 1,
    hflip: bool = False,
) -> PairedSample:
    """Crop the same ``size x size`` window from both images of a pair.

    The top-left offset is uniform over all valid positions. With ``hflip``
    the pair is mirrored horizontally with probability 1/2 (same draw for both).
    """
    h, w = sample.low.shape[:2]
    if size > min(h, w):
        raise PatchTooLarge(f"patch {size} exceeds image {h}x{w}")
    if size < 1 or size % (2**levels):
        raise ValueError(f"patch size {size} must be a positive multiple of 2^{levels}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    low = sample.low[y : y + size, x : x + size]
    high = sample.high[y : y + size, x : x + size]
    if hflip and rng.random() < 0.5:
        low, high = low[:, ::-1], high[:, ::-1]
    return PairedSample(np.ascontiguousarray(low), np.ascontiguousarray(high), sample.identifier)


# ----------------------------------------------------------------------------
# Metrics


def _pair_arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; ``inf`` for identical inputs."""
    a, b = _pair_arrays(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64):
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable mean SSIM of two ``(N, C, H, W)`` batches.

    Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), evaluated on
    valid window positions only and averaged over positions, channels and batch.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ImageTooSmall(f"SSIM needs sides >= {SSIM_WINDOW}, got {tuple(a.shape[-2:])}")
    c = a.shape[1]
    win = gaussian_window(dtype=a.dtype).to(a.device).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(x):
        return F.conv2d(x, win, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()


def ssim(a, b) -> float:
    """Mean SSIM of two ``(H, W[, C])`` images (see :func:`ssim_torch`)."""
    a, b = _pair_arrays(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    ta = torch.from_numpy(a.transpose(2, 0, 1).copy())[None]
    tb = torch.from_numpy(b.transpose(2, 0, 1).copy())[None]
    return float(ssim_torch(ta, tb))


def batch_from_samples(samples: Sequence[PairedSample]) -> tuple[torch.Tensor, torch.Tensor]:
    low = torch.cat([to_tensor(s.low) for s in samples])
    high = torch.cat([to_tensor(s.high) for s in samples])
    return low, high


@dataclass
class SyntheticPairs:
    """Deterministic synthetic low/normal-light pairs for smoke runs and tests.

    Normal-light images are smooth color fields with a few soft blobs; the
    low-light counterpart is a gamma-darkened, attenuated copy plus mild noise.
    """

    count: int = 4
    size: int = 64
    channels: int = 3
    gain: float = 0.15
    gamma: float = 1.4
    noise: float = 0.01
    seed: int = 0
    names: list[str] = field(default_factory=list)

    def build(self) -> Dataset:
        rng = np.random.default_rng(self.seed)
        yy, xx = np.mgrid[0 : self.size, 0 : self.size] / max(self.size - 1, 1)
        samples = []
        for i in range(self.count):
            high = np.empty((self.size, self.size, self.channels))
            for c in range(self.channels):
                a, bx, by = rng.uniform(0.2, 0.6), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)
                plane = a + bx * xx + by * yy
                for _ in range(3):
                    cx, cy = rng.uniform(0, 1, size=2)
                    r = rng.uniform(0.08, 0.25)
                    plane += rng.uniform(-0.3, 0.3) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
                high[:, :, c] = plane
            high = np.clip(high, 0.0, 1.0)
            low = self.gain * high**self.gamma + rng.normal(0.0, self.noise, high.shape)
            low = np.clip(low, 0.0, 1.0)
            name = self.names[i] if i < len(self.names) else f"pair{i:03d}"
            # snap to the 8-bit grid so on-disk round trips are lossless
            samples.append(
                PairedSample(
                    quantize(low).astype(np.float32) / np.float32(255.0),
                    quantize(high).astype(np.float32) / np.float32(255.0),
                    name,
                )
            )
        return Dataset(tuple(samples))

    def write(self, root) -> Dataset:
        root = Path(root)
        data = self.build()
        for s in data:
            save_image(s.low, root / "low" / f"{s.identifier}.png")
            save_image(s.high, root / "high" / f"{s.identifier}.png")
        return Dataset(data.samples, root)
