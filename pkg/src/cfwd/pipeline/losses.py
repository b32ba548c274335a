"""Diffusion, content and total training losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ..diffusion import NoiseSchedule, predict_x0, q_sample
from ..errors import ShapeMismatch
from ..hfpm import HFPM, HfpmVersion, spectral_loss_from_enhanced
from ..imaging import ssim_torch
from ..vlg import Embedder, PromptPair, guided_vlg_loss, to_image_range
from ..wavelet import WaveletPyramid, approximations, decompose, reconstruct
from .config import TrainConfig

TERMS = ("diffusion", "vlg", "spectral", "content")


@dataclass
class DiffusionTerms:
    noise: torch.Tensor  # mean squared noise-prediction error
    latent: torch.Tensor  # mean squared error of the one-shot x0 preview
    t: torch.Tensor
    x0_hat: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.noise + self.latent


def to_latent(approx: torch.Tensor, levels: int) -> torch.Tensor:
    """Map a level-K Haar approximation from its native ``[0, 2^K]`` range to ``[-1, 1]``."""
    return approx / 2.0 ** (levels - 1) - 1.0


def from_latent(z: torch.Tensor, levels: int) -> torch.Tensor:
    return (z + 1.0) * 2.0 ** (levels - 1)


def diffusion_terms(x0, condition, denoiser, s: NoiseSchedule, generator=None) -> DiffusionTerms:
    if x0.shape != condition.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs condition {tuple(condition.shape)}")
    n = x0.shape[0]
    t = torch.randint(1, s.T + 1, (n,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, s)
    eps_hat = denoiser(x_t, condition, t)
    x0_hat = predict_x0(x_t, eps_hat, t, s)
    return DiffusionTerms(
        ((eps - eps_hat) ** 2).mean(), ((x0_hat - x0) ** 2).mean(), t, x0_hat
    )


def diffusion_loss(x0, condition, denoiser, s: NoiseSchedule, generator=None) -> torch.Tensor:
    """Noise-prediction MSE plus MSE between the predicted and true clean latent,
    at one uniformly drawn timestep per sample."""
    return diffusion_terms(x0, condition, denoiser, s, generator).total


def content_loss(enhanced, reference, embedder: Embedder, layer_weights) -> torch.Tensor:
    """Weighted feature-map MSE over the embedder's five layers plus ``1 - SSIM``."""
    if enhanced.shape != reference.shape:
        raise ShapeMismatch(f"{tuple(enhanced.shape)} vs {tuple(reference.shape)}")
    feats_e = embedder.image_features(enhanced)
    feats_r = embedder.image_features(reference)
    loss = enhanced.new_zeros(())
    for g, fe, fr in zip(layer_weights, feats_e, feats_r):
        if g:
            loss = loss + g * ((fe - fr) ** 2).mean()
    return loss + (1.0 - ssim_torch(enhanced, reference))


@dataclass
class Preview:
    pyramid: WaveletPyramid
    image: torch.Tensor
    approximations: list[torch.Tensor]  # image-range A^1..A^K


def build_preview(x0_hat: torch.Tensor, enhanced_details) -> Preview:
    pyr = WaveletPyramid(x0_hat, list(enhanced_details))
    image = reconstruct(pyr).clamp(0.0, 1.0)
    approx = [to_image_range(a, k) for k, a in enumerate(approximations(pyr), start=1)]
    return Preview(pyr, image, approx)


def total_loss(
    low: torch.Tensor,
    high: torch.Tensor,
    denoiser,
    hfpm: HFPM,
    config: TrainConfig,
    embedder: Embedder,
    schedule: NoiseSchedule,
    prompts: PromptPair | None = None,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Sum of diffusion, guidance, spectral and content terms for one batch.

    Guidance and content terms act on a one-shot enhancement preview: the
    predicted clean approximation at the sampled timestep, recombined with the
    HFPM-enhanced low-light details through the inverse transform. The total
    is accumulated in float64 so the breakdown adds up exactly.
    """
    if low.shape != high.shape:
        raise ShapeMismatch(f"low {tuple(low.shape)} vs high {tuple(high.shape)}")
    if low.shape[0] == 0:
        raise ValueError("empty batch")
    prompts = prompts or PromptPair(config.prompt_positive, config.prompt_negative)
    pyr_low = decompose(low, config.levels)
    pyr_high = decompose(high, config.levels)

    x0, cond = pyr_high.approx, pyr_low.approx
    if config.normalize_latent:
        x0, cond = to_latent(x0, config.levels), to_latent(cond, config.levels)
    diff = diffusion_terms(x0, cond, denoiser, schedule, generator)
    x0_hat = from_latent(diff.x0_hat, config.levels) if config.normalize_latent else diff.x0_hat
    enhanced = [hfpm(t) for t in pyr_low.details]
    preview = build_preview(x0_hat, enhanced)

    terms = {"diffusion": diff.total}
    zero = low.new_zeros(())
    if config.use_vlg and config.guidance_scale > 0:
        terms["vlg"] = guided_vlg_loss(
            preview.approximations, preview.image, prompts, embedder, config.guidance_scale, config.vlg_mode
        )
    else:
        terms["vlg"] = zero
    if config.use_hfpm:
        terms["spectral"] = spectral_loss_from_enhanced(
            enhanced, pyr_high, HfpmVersion.parse(config.hfpm_version),
            config.amp_weight, config.phase_weight, config.wrapped_phase, preview.pyramid,
        )
    else:
        terms["spectral"] = zero
    terms["content"] = (
        content_loss(preview.image, high, embedder, config.layer_weights) if config.use_content else zero
    )

    total = torch.zeros((), dtype=torch.float64)
    breakdown = {}
    for name in TERMS:
        term = terms[name].to(torch.float64)
        total = total + term
        breakdown[name] = float(term.detach())
    return total, breakdown
