"""Multi-level orthonormal 2D Haar transform.

All functions act on the last two axes, so they accept ``(H, W)``,
``(C, H, W)`` or ``(N, C, H, W)`` tensors (numpy arrays are converted).
One analysis step maps every non-overlapping 2x2 block ``[[a, b], [c, d]]`` to::

    A = (a + b + c + d) / 2      H = (a + b - c - d) / 2
    V = (a - b + c - d) / 2      D = (a - b - c + d) / 2

The transform is orthonormal, so a constant image ``c`` has ``A = 2c`` after
one level and ``A = 2**K * c`` after ``K`` levels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch

from .errors import IndivisibleDimensions, LevelMismatch, OddDimensions, ShapeMismatch

MAX_LEVELS = 3


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


@dataclass
class SubbandTriple:
    V: torch.Tensor
    H: torch.Tensor
    D: torch.Tensor

    def __post_init__(self):
        if not (self.V.shape == self.H.shape == self.D.shape):
            raise ShapeMismatch(
                f"detail bands differ: V{tuple(self.V.shape)} H{tuple(self.H.shape)} D{tuple(self.D.shape)}"
            )

    def __iter__(self) -> Iterator[torch.Tensor]:
        return iter((self.V, self.H, self.D))

    @property
    def shape(self):
        return self.V.shape

    def map(self, fn) -> "SubbandTriple":
        return SubbandTriple(fn(self.V), fn(self.H), fn(self.D))


@dataclass
class WaveletPyramid:
    """``approx`` is A^K; ``details[k - 1]`` holds the level-k triple (k = 1 finest)."""

    approx: torch.Tensor
    details: list[SubbandTriple]

    @property
    def levels(self) -> int:
        return len(self.details)

    def validate(self) -> None:
        if not self.details:
            raise LevelMismatch("pyramid has no detail levels")
        for k, triple in enumerate(self.details, start=1):
            if k > 1:
                prev = self.details[k - 2].shape
                expect = (*prev[:-2], prev[-2] // 2, prev[-1] // 2)
                if tuple(triple.shape) != tuple(expect) or prev[-2] % 2 or prev[-1] % 2:
                    raise ShapeMismatch(f"level {k} bands {tuple(triple.shape)}, expected {expect}")
        if tuple(self.approx.shape) != tuple(self.details[-1].shape):
            raise ShapeMismatch(
                f"approx {tuple(self.approx.shape)} does not match level-{self.levels} bands "
                f"{tuple(self.details[-1].shape)}"
            )


def dwt2(x):
    """One level of the orthonormal Haar analysis. Returns ``(A, V, H, D)``."""
    x = _as_tensor(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise OddDimensions(f"dwt2 needs even height and width, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    A = (a + b + c + d) / 2
    H = (a + b - c - d) / 2
    V = (a - b + c - d) / 2
    D = (a - b - c + d) / 2
    return A, V, H, D


def idwt2(A, V, H, D) -> torch.Tensor:
    """Exact inverse of :func:`dwt2`."""
    A, V, H, D = (_as_tensor(t) for t in (A, V, H, D))
    if not (A.shape == V.shape == H.shape == D.shape):
        raise ShapeMismatch(
            f"bands differ: A{tuple(A.shape)} V{tuple(V.shape)} H{tuple(H.shape)} D{tuple(D.shape)}"
        )
    a = (A + H + V + D) / 2
    b = (A + H - V - D) / 2
    c = (A - H + V - D) / 2
    d = (A - H - V + D) / 2
    h, w = A.shape[-2:]
    # interleave: (..., h, 2, w, 2) -> (..., 2h, 2w)
    top = torch.stack((a, b), dim=-1)
    bottom = torch.stack((c, d), dim=-1)
    out = torch.stack((top, bottom), dim=-3)
    return out.reshape(*A.shape[:-2], 2 * h, 2 * w)


def decompose(x, levels: int) -> WaveletPyramid:
    """K-level decomposition: recursive :func:`dwt2` on the approximation band."""
    x = _as_tensor(x)
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    h, w = x.shape[-2:]
    step = 2**levels
    if h % step or w % step:
        raise IndivisibleDimensions(f"{h}x{w} is not divisible by 2^{levels}")
    details = []
    approx = x
    for _ in range(levels):
        approx, V, H, D = dwt2(approx)
        details.append(SubbandTriple(V, H, D))
    return WaveletPyramid(approx, details)


def reconstruct(p: WaveletPyramid) -> torch.Tensor:
    """Inverse of :func:`decompose`, synthesising from the coarsest level down."""
    p.validate()
    x = p.approx
    for triple in reversed(p.details):
        x = idwt2(x, triple.V, triple.H, triple.D)
    return x


def approximations(p: WaveletPyramid) -> list[torch.Tensor]:
    """Approximation bands ``[A^1, ..., A^K]`` implied by the pyramid.

    A^K is stored; finer ones are partial reconstructions through the
    pyramid's own detail bands.
    """
    p.validate()
    out = [p.approx]
    x = p.approx
    for triple in reversed(p.details[1:]):
        x = idwt2(x, triple.V, triple.H, triple.D)
        out.append(x)
    return out[::-1]


def visualize_band(band: torch.Tensor) -> tuple[np.ndarray, float, float]:
    """Affinely map a band to [0, 1]; returns ``(image, lo, hi)`` with ``v' = (v - lo) / (hi - lo)``."""
    arr = band.detach().cpu().double().numpy()
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        return np.zeros_like(arr, dtype=np.float32), lo, lo + 1.0
    return ((arr - lo) / (hi - lo)).astype(np.float32), lo, hi
