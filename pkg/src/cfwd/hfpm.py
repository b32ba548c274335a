"""High-frequency perception module: detail-band enhancement and the hybrid
wavelet/Fourier spectral loss.

Enhancement of one ``(V, H, D)`` triple with ``C`` channels and feature width ``F``:

1. per-band depthwise-separable conv ``C -> F`` (+ SiLU)
2. cross-attention: queries from D features, keys/values from a 1x1 fusion of
   the V and H features; single head over spatial positions; added back to D
3. dilated residual stage on ``concat(V, H, D)`` features: 3x3 dilation 2 ->
   SiLU -> 3x3 dilation 3, residual-added
4. depthwise-separable projection ``3F -> 3C`` giving per-band residuals

The output is ``input + residual``; zeroing the last pointwise layer
(:meth:`HFPM.make_identity`) makes the module an exact identity.

One parameter set is shared across wavelet levels.
"""

from __future__ import annotations

import enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import fan_in_uniform_
from .errors import LevelMismatch, ShapeMismatch
from .spectral import dft_amp_phase, spectral_l1_loss
from .wavelet import SubbandTriple, WaveletPyramid, approximations


class HfpmVersion(str, enum.Enum):
    V1 = "v1"  # approximation-band spectra, no enhancement
    V2 = "v2"  # finest detail level only
    V3 = "v3"  # every detail level

    @classmethod
    def parse(cls, value) -> "HfpmVersion":
        return value if isinstance(value, cls) else cls(str(value).lower())


class DSConv(nn.Module):
    """Depthwise 3x3 followed by pointwise 1x1."""

    def __init__(self, cin: int, cout: int, dilation: int = 1):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, padding=dilation, dilation=dilation, groups=cin)
        self.pointwise = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class CrossAttention(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fuse = nn.Conv2d(2 * width, width, 1)
        self.q = nn.Conv2d(width, width, 1)
        self.k = nn.Conv2d(width, width, 1)
        self.v = nn.Conv2d(width, width, 1)
        self.out = nn.Conv2d(width, width, 1)

    def forward(self, d_feat, v_feat, h_feat):
        n, c, hh, ww = d_feat.shape
        vh = self.fuse(torch.cat([v_feat, h_feat], dim=1))
        q = self.q(d_feat).reshape(n, 1, c, hh * ww).transpose(-1, -2)
        k = self.k(vh).reshape(n, 1, c, hh * ww).transpose(-1, -2)
        v = self.v(vh).reshape(n, 1, c, hh * ww).transpose(-1, -2)
        att = F.scaled_dot_product_attention(q, k, v)
        att = att.transpose(-1, -2).reshape(n, c, hh, ww)
        return d_feat + self.out(att)


class DilatedStage(nn.Module):
    def __init__(self, channels: int, rates=(2, 3)):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=rates[0], dilation=rates[0])
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=rates[1], dilation=rates[1])

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(x)))


class HFPM(nn.Module):
    def __init__(self, channels: int = 3, width: int = 16):
        super().__init__()
        self.channels = channels
        self.width = width
        self.extract = nn.ModuleDict({b: DSConv(channels, width) for b in "VHD"})
        self.cross = CrossAttention(width)
        self.dilated = DilatedStage(3 * width)
        self.project = DSConv(3 * width, 3 * channels)

    @property
    def fingerprint(self) -> str:
        return f"hfpm/v1/channels={self.channels}/width={self.width}"

    def forward(self, triple: SubbandTriple) -> SubbandTriple:
        V, H, D = triple
        if V.shape[1] != self.channels:
            raise ShapeMismatch(f"expected {self.channels} channels, got {V.shape[1]}")
        fv = F.silu(self.extract["V"](V))
        fh = F.silu(self.extract["H"](H))
        fd = F.silu(self.extract["D"](D))
        fd = self.cross(fd, fv, fh)
        feats = self.dilated(torch.cat([fv, fh, fd], dim=1))
        dv, dh, dd = self.project(feats).chunk(3, dim=1)
        return SubbandTriple(V + dv, H + dh, D + dd)

    def make_identity(self) -> "HFPM":
        with torch.no_grad():
            self.project.pointwise.weight.zero_()
            self.project.pointwise.bias.zero_()
        return self


def init_hfpm(seed: int, channels: int = 3, width: int = 16, zero_output: bool = True) -> HFPM:
    """Seeded fan-in init. ``zero_output`` zeroes the last projection so training
    starts from the identity map on detail bands."""
    model = HFPM(channels, width)
    fan_in_uniform_(model, torch.Generator().manual_seed(int(seed)))
    if zero_output:
        model.make_identity()
    return model


def enhance_details(triple: SubbandTriple, params: HFPM) -> SubbandTriple:
    return params(triple)


def _band_spectra(triples):
    return [dft_amp_phase(band) for triple in triples for band in triple]


def spectral_loss_from_enhanced(
    enhanced: list[SubbandTriple],
    pyramid_ref: WaveletPyramid,
    version=HfpmVersion.V3,
    amp_weight: float = 1.0,
    phase_weight: float = 1.0,
    wrapped_phase: bool = False,
    pyramid_low: WaveletPyramid | None = None,
) -> torch.Tensor:
    """Spectral L1 loss given already-enhanced low-light triples (levels 1..K).

    v3 averages over all levels and the three bands of each level, v2 uses
    level 1 only. v1 compares the approximation bands ``A^1..A^K`` of
    ``pyramid_low`` and ``pyramid_ref`` instead and ignores ``enhanced``.
    """
    version = HfpmVersion.parse(version)
    if version is HfpmVersion.V1:
        if pyramid_low is None:
            raise ValueError("v1 needs pyramid_low")
        pred = [dft_amp_phase(a) for a in approximations(pyramid_low)]
        ref = [dft_amp_phase(a) for a in approximations(pyramid_ref)]
        return spectral_l1_loss(pred, ref, amp_weight, phase_weight, wrapped_phase)
    if len(enhanced) != pyramid_ref.levels:
        raise LevelMismatch(f"{len(enhanced)} enhanced levels vs reference K={pyramid_ref.levels}")
    n = 1 if version is HfpmVersion.V2 else pyramid_ref.levels
    pred = _band_spectra(enhanced[:n])
    ref = _band_spectra(pyramid_ref.details[:n])
    return spectral_l1_loss(pred, ref, amp_weight, phase_weight, wrapped_phase)


def hfpm_loss(
    pyramid_low: WaveletPyramid,
    pyramid_ref: WaveletPyramid,
    params: HFPM,
    version=HfpmVersion.V3,
    amp_weight: float = 1.0,
    phase_weight: float = 1.0,
    wrapped_phase: bool = False,
) -> torch.Tensor:
    """Enhance the low-light detail bands, then compare their Fourier amplitude
    and phase with the reference image's raw detail bands."""
    if pyramid_low.levels != pyramid_ref.levels:
        raise LevelMismatch(f"K={pyramid_low.levels} vs K={pyramid_ref.levels}")
    for lo, hi in zip(pyramid_low.details, pyramid_ref.details):
        if lo.shape != hi.shape:
            raise ShapeMismatch(f"band shapes differ: {tuple(lo.shape)} vs {tuple(hi.shape)}")
    version = HfpmVersion.parse(version)
    if version is HfpmVersion.V1:
        enhanced = []
    else:
        n = 1 if version is HfpmVersion.V2 else pyramid_low.levels
        enhanced = [params(t) for t in pyramid_low.details[:n]] + list(pyramid_low.details[n:])
    return spectral_loss_from_enhanced(
        enhanced, pyramid_ref, version, amp_weight, phase_weight, wrapped_phase, pyramid_low
    )
