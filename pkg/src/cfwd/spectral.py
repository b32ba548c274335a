"""Fourier amplitude/phase decomposition and the L1 spectral loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import EmptyList, ShapeMismatch


@dataclass
class Spectrum:
    amplitude: torch.Tensor
    phase: torch.Tensor


def dft_amp_phase(x: torch.Tensor) -> Spectrum:
    """Unnormalised forward 2D DFT over the last two axes, split into modulus and argument.

    Phase lies in (-pi, pi]; bins with zero modulus get phase 0. Safe to
    backpropagate through (no NaN gradients at zero bins).
    """
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(x)
    if not torch.isfinite(x).all():
        raise ValueError("dft_amp_phase: input contains NaN or Inf")
    z = torch.fft.fft2(x, norm="backward")
    amp = z.abs()
    zero = amp == 0
    safe = torch.where(zero, torch.ones_like(z), z)
    phase = torch.where(zero, torch.zeros_like(amp), torch.angle(safe))
    # atan2 can return exactly -pi (negative real, imag == -0.0)
    phase = torch.where(phase <= -math.pi, torch.full_like(phase, math.pi), phase)
    return Spectrum(amp, phase)


def wrapped_difference(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Angular distance in [0, pi] between two phase arrays."""
    d = torch.remainder(a - b + math.pi, 2 * math.pi) - math.pi
    return d.abs()


def spectral_terms(
    pred: Sequence[Spectrum], ref: Sequence[Spectrum], wrapped_phase: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-scale mean absolute amplitude and phase differences, averaged over scales."""
    if len(pred) == 0 or len(ref) == 0:
        raise EmptyList("spectral loss needs at least one spectrum")
    if len(pred) != len(ref):
        raise ShapeMismatch(f"{len(pred)} predicted spectra vs {len(ref)} reference spectra")
    amp_terms, pha_terms = [], []
    for p, r in zip(pred, ref):
        if p.amplitude.shape != r.amplitude.shape:
            raise ShapeMismatch(
                f"spectrum shapes differ: {tuple(p.amplitude.shape)} vs {tuple(r.amplitude.shape)}"
            )
        amp_terms.append((p.amplitude - r.amplitude).abs().mean())
        if wrapped_phase:
            pha_terms.append(wrapped_difference(p.phase, r.phase).mean())
        else:
            pha_terms.append((p.phase - r.phase).abs().mean())
    k = len(pred)
    return sum(amp_terms) / k, sum(pha_terms) / k


def spectral_l1_loss(
    pred: Sequence[Spectrum],
    ref: Sequence[Spectrum],
    amp_weight: float = 1.0,
    phase_weight: float = 1.0,
    wrapped_phase: bool = False,
) -> torch.Tensor:
    """``amp_weight * L_amp + phase_weight * L_pha`` over a list of scales."""
    l_amp, l_pha = spectral_terms(pred, ref, wrapped_phase)
    return amp_weight * l_amp + phase_weight * l_pha
