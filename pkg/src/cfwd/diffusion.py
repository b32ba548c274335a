"""Noise schedules, the closed-form forward process and conditional reverse sampling.

Timesteps are 1-based: ``t = 1..T``. Schedule arrays are stored with a
leading entry for ``t = 0`` (``alpha_bar[0] = 1``, ``beta[0] = 0``) so they can
be indexed directly by ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import InvalidRange, ShapeMismatch, StepCountInvalid, StepOutOfRange

Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def descriptor(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_descriptor(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]), d["kind"])


def _cosine_betas(T: int, s: float = 0.008) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
    alpha_bar = f / f[0]
    betas = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    return np.clip(betas, 1e-8, 0.999)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2, kind: str = "linear") -> NoiseSchedule:
    """Build a schedule. ``linear`` spaces beta evenly (inclusive); ``cosine`` uses the
    squared-cosine alpha_bar and ignores the beta range apart from validation."""
    if T < 1:
        raise InvalidRange(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRange(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        betas = _cosine_betas(T)
    else:
        raise InvalidRange(f"unknown schedule kind {kind!r}")
    return schedule_from_betas(kind, T, beta_start, beta_end, betas)


def schedule_from_betas(kind, T, beta_start, beta_end, betas: np.ndarray) -> NoiseSchedule:
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(kind, T, float(beta_start), float(beta_end), beta, alpha, alpha_bar, sigma)


def _check_t(t, s: NoiseSchedule, low: int = 1) -> None:
    tt = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if tt.size == 0 or tt.min() < low or tt.max() > s.T:
        raise StepOutOfRange(f"timestep {t} outside [{low}, {s.T}]")


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule coefficients at ``t`` and shape them to broadcast against ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.detach().cpu().long().numpy()
        c = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
        return c.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.as_tensor(values[int(t)], dtype=like.dtype, device=like.device)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Draw from q(x_t | x_0): ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    _same_shape(x0, eps, "q_sample")
    _check_t(t, s)
    return _coef(np.sqrt(s.alpha_bar), t, x0) * x0 + _coef(np.sqrt(1.0 - s.alpha_bar), t, x0) * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Invert :func:`q_sample` given a noise estimate."""
    _same_shape(x_t, eps_hat, "predict_x0")
    _check_t(t, s)
    return (x_t - _coef(np.sqrt(1.0 - s.alpha_bar), t, x_t) * eps_hat) / _coef(np.sqrt(s.alpha_bar), t, x_t)


def posterior_mean(x_t: torch.Tensor, eps_hat: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Reverse-step mean ``(x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)``."""
    _same_shape(x_t, eps_hat, "posterior_mean")
    _check_t(t, s)
    scale = _coef(s.beta / np.sqrt(np.maximum(1.0 - s.alpha_bar, 1e-300)), t, x_t)
    return (x_t - scale * eps_hat) / _coef(np.sqrt(s.alpha), t, x_t)


def strided_timesteps(T: int, steps: int) -> list[int]:
    """``steps`` evenly spaced timesteps from T down to 1 (just ``[T]`` for one step)."""
    if not 1 <= steps <= T:
        raise StepCountInvalid(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return [T]
    ts = np.round(np.linspace(T, 1, steps)).astype(int)
    return [int(v) for v in ts]


def respace(s: NoiseSchedule, timesteps: list[int]) -> NoiseSchedule:
    """Schedule over the sub-sequence ``timesteps`` with the same alpha_bar at each kept step."""
    kept = sorted(timesteps)
    abar = s.alpha_bar[kept]
    prev = np.concatenate([[1.0], abar[:-1]])
    betas = 1.0 - abar / prev
    return schedule_from_betas(s.kind, len(kept), s.beta_start, s.beta_end, betas)


def _batched_t(t: int, x: torch.Tensor) -> torch.Tensor:
    return torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)


@torch.no_grad()
def sample(
    denoiser: Denoiser,
    condition: torch.Tensor,
    s: NoiseSchedule,
    steps: int,
    mode: str = "implicit",
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Conditional reverse process starting from unit Gaussian noise.

    ``denoiser(x_t, condition, t)`` receives the schedule's own timestep
    values (a ``(N,)`` long tensor). ``implicit`` runs the deterministic
    non-Markovian update over ``steps`` evenly strided timesteps;
    ``ancestral`` draws ``x_{t-1} = mu + sigma_t z`` (``z = 0`` at the last step)
    over the same subset, using the respaced betas when ``steps < T``.
    """
    timesteps = strided_timesteps(s.T, steps)
    if noise is None:
        noise = torch.randn(condition.shape, generator=generator, dtype=condition.dtype, device=condition.device)
    _same_shape(noise, condition, "sample")
    x = noise

    if mode == "implicit":
        x0 = x
        for i, t in enumerate(timesteps):
            eps = denoiser(x, condition, _batched_t(t, x))
            x0 = predict_x0(x, eps, t, s)
            if i + 1 < len(timesteps):
                t_next = timesteps[i + 1]
                ab = float(s.alpha_bar[t_next])
                x = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
        return x0

    if mode == "ancestral":
        sub = respace(s, timesteps) if len(timesteps) < s.T else s
        for j, t in zip(range(sub.T, 0, -1), timesteps):
            eps = denoiser(x, condition, _batched_t(t, x))
            x = posterior_mean(x, eps, j, sub)
            if j > 1:
                z = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
                x = x + float(sub.sigma[j]) * z
        return x

    raise ValueError(f"unknown sampling mode {mode!r}")
