"""Visual-language guidance: embedder interface, a deterministic stub embedder,
an adapter for pretrained CLIP checkpoints, and the cosine-similarity
guidance losses.

Images passed to embedders are ``(N, C, H, W)`` tensors in [0, 1].
"""

from __future__ import annotations

import hashlib
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateEmbedding, EmbedderUnavailable, EmptyList

DEFAULT_POSITIVE = "a well-lit, high-contrast photo"
DEFAULT_NEGATIVE = "a dark, underexposed, noisy photo"
COS_FLOOR = 1e-4
FEATURE_LAYERS = 5


class Embedder(Protocol):
    dim: int

    def embed_image(self, images: torch.Tensor) -> torch.Tensor: ...

    def embed_text(self, text: str) -> torch.Tensor: ...

    def image_features(self, images: torch.Tensor) -> list[torch.Tensor]: ...


@dataclass
class PromptPair:
    positive: str = DEFAULT_POSITIVE
    negative: str = DEFAULT_NEGATIVE
    positive_embedding: torch.Tensor | None = None
    negative_embedding: torch.Tensor | None = None

    def __post_init__(self):
        if not self.positive.strip() or not self.negative.strip():
            raise ValueError("prompts must be non-empty")
        for emb in (self.positive_embedding, self.negative_embedding):
            if emb is not None and abs(float(emb.norm()) - 1.0) > 1e-5:
                raise DegenerateEmbedding("precomputed prompt embeddings must be unit norm")

    @classmethod
    def from_file(cls, path, positive=DEFAULT_POSITIVE, negative=DEFAULT_NEGATIVE) -> "PromptPair":
        """Load fixed ("learned") prompt embeddings from a ``.npy`` array of shape ``(2, D)``,
        row 0 positive, row 1 negative."""
        arr = torch.from_numpy(np.load(path)).float()
        arr = arr / arr.norm(dim=1, keepdim=True)
        return cls(positive, negative, arr[0], arr[1])

    def embeddings(self, embedder: Embedder) -> tuple[torch.Tensor, torch.Tensor]:
        pos = self.positive_embedding if self.positive_embedding is not None else embedder.embed_text(self.positive)
        neg = self.negative_embedding if self.negative_embedding is not None else embedder.embed_text(self.negative)
        return _unit(pos), _unit(neg)


def _unit(v: torch.Tensor) -> torch.Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    if (norm < 1e-8).any():
        raise DegenerateEmbedding("embedder returned a zero vector")
    return v / norm


# ----------------------------------------------------------------------------
# Stub embedder

_POSITIVE_WORDS = {"well-lit", "bright", "high-contrast", "sunny", "clear", "normal", "vivid", "daylight"}
_NEGATIVE_WORDS = {"dark", "underexposed", "noisy", "dim", "low-light", "night", "gloomy", "blurry"}

# descriptor layout: luminance, contrast, R, G, B, gradient energy, constant.
# Pixel-level gradient energy is dominated by noise, so it counts toward the
# negative ("dark, noisy") anchor rather than the positive one.
_BIAS = 0.25
_POSITIVE_ANCHOR = torch.tensor([1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
_NEGATIVE_ANCHOR = torch.tensor([0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
_LUMA = (0.299, 0.587, 0.114)


class StubEmbedder:
    """Hand-built, dependency-free stand-in for a vision-language encoder.

    Images map to a 7-d descriptor (mean luminance, luminance contrast,
    per-channel means, mean absolute luminance gradient, constant 0.25),
    normalised and lifted into ``dim`` dimensions by a fixed orthonormal
    basis, so cosines equal descriptor cosines. Text is matched against a
    small lexicon: bright/contrasty phrases map to the brightness, contrast and
    colour directions, dark/noisy phrases to gradient energy plus the constant
    axis, anything else to a hash-seeded unit vector.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 7:
            raise ValueError("stub embedding dimension must be >= 7")
        self.dim = dim
        g = torch.Generator().manual_seed(seed)
        q, _ = torch.linalg.qr(torch.randn(dim, 7, generator=g, dtype=torch.float64))
        self.basis = q

    def _lift(self, desc: torch.Tensor) -> torch.Tensor:
        desc = desc / desc.norm(dim=-1, keepdim=True)
        return desc @ self.basis.to(desc.dtype).T

    @staticmethod
    def _rgb(images: torch.Tensor) -> torch.Tensor:
        return images.expand(-1, 3, -1, -1) if images.shape[1] == 1 else images[:, :3]

    def _luminance(self, images):
        rgb = self._rgb(images)
        w = torch.tensor(_LUMA, dtype=images.dtype, device=images.device)
        return (rgb * w[None, :, None, None]).sum(1)

    def descriptor(self, images: torch.Tensor) -> torch.Tensor:
        lum = self._luminance(images)
        flat = lum.flatten(1)
        mean = flat.mean(1)
        contrast = torch.sqrt(flat.var(1, unbiased=False) + 1e-8)
        chan = self._rgb(images).flatten(2).mean(2)
        grad = torch.zeros_like(mean)
        if lum.shape[-1] > 1:
            grad = grad + (lum[..., :, 1:] - lum[..., :, :-1]).abs().flatten(1).mean(1)
        if lum.shape[-2] > 1:
            grad = grad + (lum[..., 1:, :] - lum[..., :-1, :]).abs().flatten(1).mean(1)
        bias = torch.full_like(mean, _BIAS)
        return torch.stack([mean, contrast, chan[:, 0], chan[:, 1], chan[:, 2], grad, bias], dim=1)

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        return self._lift(self.descriptor(images))

    def embed_text(self, text: str) -> torch.Tensor:
        words = set(re.findall(r"[a-z\-]+", text.lower()))
        pos, neg = len(words & _POSITIVE_WORDS), len(words & _NEGATIVE_WORDS)
        if pos > neg:
            desc = _POSITIVE_ANCHOR
        elif neg > pos:
            desc = _NEGATIVE_ANCHOR
        else:
            seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
            desc = torch.randn(7, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        return self._lift(desc[None])[0].float()

    def image_features(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Five maps: the image average-pooled by 2**l with its horizontal and vertical differences."""
        feats = []
        for level in range(FEATURE_LAYERS):
            k = 2**level
            if min(images.shape[-2:]) >= k:
                x = F.avg_pool2d(images, k)
            else:
                x = F.adaptive_avg_pool2d(images, 1)
            dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1))
            dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
            feats.append(torch.cat([x, dx, dy], dim=1))
        return feats


# ----------------------------------------------------------------------------
# Pretrained adapter


class PretrainedEmbedder:
    """Adapter around a local Hugging Face CLIP checkpoint directory.

    Image features for the content loss are five evenly spaced hidden states
    of the vision tower. Calls are serialised with a lock.
    """

    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, path):
        path = Path(path) if path else None
        if path is None or not path.exists():
            raise EmbedderUnavailable(
                f"pretrained vision-language checkpoint not found at {path!s}; "
                "pass a local CLIP model directory or use the stub embedder (--embedder stub)"
            )
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise EmbedderUnavailable("the pretrained embedder needs the 'transformers' package") from exc
        self.model = CLIPModel.from_pretrained(str(path), local_files_only=True).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(str(path), local_files_only=True)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.dim = self.model.config.projection_dim
        self.size = self.model.config.vision_config.image_size
        self._lock = threading.Lock()

    def _prep(self, images):
        x = images.expand(-1, 3, -1, -1) if images.shape[1] == 1 else images
        x = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
        mean = torch.tensor(self.MEAN, dtype=x.dtype)[None, :, None, None]
        std = torch.tensor(self.STD, dtype=x.dtype)[None, :, None, None]
        return (x - mean) / std

    def embed_image(self, images):
        with self._lock:
            return _unit(self.model.get_image_features(pixel_values=self._prep(images)))

    def embed_text(self, text):
        with self._lock, torch.no_grad():
            tokens = self.tokenizer([text], padding=True, return_tensors="pt")
            return _unit(self.model.get_text_features(**tokens))[0]

    def image_features(self, images):
        with self._lock:
            out = self.model.vision_model(pixel_values=self._prep(images), output_hidden_states=True)
        hidden = out.hidden_states
        idx = np.linspace(0, len(hidden) - 1, FEATURE_LAYERS).round().astype(int)
        return [hidden[i] for i in idx]


def make_embedder(kind: str = "stub", path=None) -> Embedder:
    if kind == "stub":
        return StubEmbedder()
    if kind == "pretrained":
        return PretrainedEmbedder(path)
    raise ValueError(f"unknown embedder {kind!r}")


# ----------------------------------------------------------------------------
# Losses


def prompt_cosines(images: torch.Tensor, prompts: PromptPair, embedder: Embedder):
    """Per-image cosine with the positive and negative prompt, each ``(N,)``."""
    img = _unit(embedder.embed_image(images))
    pos, neg = prompts.embeddings(embedder)
    pos = pos.to(img.dtype)
    neg = neg.to(img.dtype)
    return img @ pos, img @ neg


def similarity_loss_1(
    approximations: Sequence[torch.Tensor],
    prompts: PromptPair,
    embedder: Embedder,
    mode: str = "corrected",
) -> torch.Tensor:
    """Per-level prompt guidance summed over the given (image-range) approximations.

    Each level adds ``cos_neg / max(cos_pos, 1e-4)`` plus ``cos_pos`` (literal)
    or ``1 - cos_pos`` (corrected). Averaged over the batch.
    """
    if len(approximations) == 0:
        raise EmptyList("similarity_loss_1 needs at least one approximation")
    if mode not in ("literal", "corrected"):
        raise ValueError(f"unknown mode {mode!r}")
    total = 0.0
    for a in approximations:
        cp, cn = prompt_cosines(a, prompts, embedder)
        ratio = cn / cp.clamp_min(COS_FLOOR)
        tail = cp if mode == "literal" else 1.0 - cp
        total = total + (ratio + tail).mean()
    return total


def similarity_loss_2(enhanced: torch.Tensor, prompts: PromptPair, embedder: Embedder) -> torch.Tensor:
    """Two-way softmax probability of the negative prompt, averaged over the batch."""
    cp, cn = prompt_cosines(enhanced, prompts, embedder)
    return torch.softmax(torch.stack([cn, cp], dim=-1), dim=-1)[..., 0].mean()


def vlg_loss(approximations, enhanced, prompts, embedder, mode: str = "corrected") -> torch.Tensor:
    return similarity_loss_1(approximations, prompts, embedder, mode) + similarity_loss_2(
        enhanced, prompts, embedder
    )


def guidance_levels(scale: int, levels: int) -> list[int]:
    """Wavelet levels k whose approximation receives per-level guidance at scale M.

    M=0 and M=1 use none (M=1 keeps only the final-image term), M=2 the
    coarsest level K, M=3 every level 1..K.
    """
    if scale not in (0, 1, 2, 3):
        raise ValueError(f"guidance scale must be in 0..3, got {scale}")
    if scale <= 1:
        return []
    if scale == 2:
        return [levels]
    return list(range(1, levels + 1))


def guided_vlg_loss(approximations, enhanced, prompts, embedder, scale: int, mode: str = "corrected"):
    """Guidance loss at scale M. ``approximations[k - 1]`` is the image-range A^k."""
    if scale == 0:
        return enhanced.new_zeros(())
    loss = similarity_loss_2(enhanced, prompts, embedder)
    ks = guidance_levels(scale, len(approximations))
    if ks:
        loss = loss + similarity_loss_1([approximations[k - 1] for k in ks], prompts, embedder, mode)
    return loss


def to_image_range(approx: torch.Tensor, level: int) -> torch.Tensor:
    """Rescale a level-k Haar approximation by 2**-k and clamp to [0, 1]."""
    return (approx / 2**level).clamp(0.0, 1.0)
