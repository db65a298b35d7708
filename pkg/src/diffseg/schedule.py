"""Noise schedule, forward noising, reverse sampling, timestep embedding.

The (beta_start, beta_end) pair is quoted for a 1000-step baseline and
rescaled by 1000/T, so shorter schedules keep the same cumulative signal
decay (alpha_bar[0] stays near 1, alpha_bar[T-1] stays near 0). All
schedule coefficients are kept in float64; step coefficients are cast to
the working dtype at use.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .config import ConfigError


class NoiseSchedule:
    """Per-step beta/alpha-bar coefficients; immutable after construction."""

    def __init__(self, total_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
        scale = 1000.0 / total_steps
        betas = torch.linspace(
            beta_start * scale, beta_end * scale, total_steps, dtype=torch.float64
        )
        if not bool((betas > 0).all() and (betas < 1).all()):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if total_steps > 1 and not bool((betas.diff() >= 0).all()):
            raise ConfigError("betas must be non-decreasing")
        self.total_steps = total_steps
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)
        # alpha_bar_prev[0] = 1 makes the t=0 posterior variance exactly 0
        self.alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bars[:-1]])
        self.posterior_variance = betas * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bars)

    def _check_t(self, t: int) -> None:
        if not 0 <= t < self.total_steps:
            raise IndexError(f"step index {t} outside 0..{self.total_steps - 1}")

    def forward_noise(self, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

        ``t`` is a step index or a 1-D tensor of per-sample indices (then the
        leading dimension of x0 is the batch).
        """
        if eps.shape != x0.shape:
            raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            if int(t.min()) < 0 or int(t.max()) >= self.total_steps:
                raise IndexError(f"step indices outside 0..{self.total_steps - 1}")
            ab = self.alpha_bars[t].to(x0.dtype)
            ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
            return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
        t = int(t)
        self._check_t(t)
        ab = float(self.alpha_bars[t])
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps

    def reverse_step(
        self, x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, z: torch.Tensor | None = None
    ) -> torch.Tensor:
        """One posterior step: mu(x_t, eps) + sigma_t * z, with sigma_0 = 0."""
        if x_t.shape != eps_pred.shape:
            raise ValueError(f"x_t shape {tuple(x_t.shape)} != eps_pred shape {tuple(eps_pred.shape)}")
        if not (torch.isfinite(x_t).all() and torch.isfinite(eps_pred).all()):
            raise FloatingPointError("non-finite input to reverse_step")
        self._check_t(t)
        beta = float(self.betas[t])
        alpha = float(self.alphas[t])
        ab = float(self.alpha_bars[t])
        mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(alpha)
        sigma = math.sqrt(float(self.posterior_variance[t]))
        if z is None or sigma == 0.0:
            return mean
        if z.shape != x_t.shape:
            raise ValueError("z shape mismatch")
        return mean + sigma * z


class TimestepEmbedding(nn.Module):
    """Learnable per-step lookup table shared across the denoiser."""

    def __init__(self, total_steps: int, embed_dim: int = 64):
        super().__init__()
        self.total_steps = total_steps
        self.embed_dim = embed_dim
        self.table = nn.Parameter(torch.randn(total_steps, embed_dim))

    def forward(self, t) -> torch.Tensor:
        """Row(s) of the table; ``t`` is an index or a 1-D LongTensor."""
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            if int(t.min()) < 0 or int(t.max()) >= self.total_steps:
                raise IndexError(f"step indices outside 0..{self.total_steps - 1}")
            return self.table[t]
        t = int(t)
        if not 0 <= t < self.total_steps:
            raise IndexError(f"step index {t} outside 0..{self.total_steps - 1}")
        return self.table[t]


def sample(
    model,
    image: torch.Tensor,
    steps: int = 100,
    rng_seed: int = 0,
) -> torch.Tensor:
    """Draw one segmentation probability map by iterative denoising.

    ``model`` must provide ``noise_schedule()``, ``condition_context(images)``
    and ``predict_noise(x_t, t, context)`` (see models.SegDiffusionModel).
    Deterministic given ``rng_seed``; output clamped to [0, 1].
    """
    out = sample_batch(model, image.unsqueeze(0), [rng_seed], steps=steps)
    return out[0]


def sample_batch(
    model,
    images: torch.Tensor,
    rng_seeds,
    steps: int = 100,
) -> torch.Tensor:
    """Vectorized sampler: one independent noise stream per seed.

    ``images`` is [B, C, H, W] with one seed per row; each row's stream is
    the one ``sample`` would use with that seed.
    """
    schedule: NoiseSchedule = model.noise_schedule()
    if steps > schedule.total_steps:
        raise ConfigError(f"steps {steps} exceeds schedule total_steps {schedule.total_steps}")
    if images.ndim != 4:
        raise ValueError("images must be [B, C, H, W]")
    if len(rng_seeds) != images.shape[0]:
        raise ValueError("one rng seed per image row required")

    gens = [torch.Generator().manual_seed(int(s)) for s in rng_seeds]
    b, _, h, w = images.shape
    shape = (1, h, w)

    def draw() -> torch.Tensor:
        return torch.stack([torch.randn(shape, generator=g, dtype=images.dtype) for g in gens])

    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            context = model.condition_context(images)
            x = draw()
            for t in reversed(range(steps)):
                eps = model.predict_noise(x, t, context)
                z = draw() if t > 0 else None
                x = schedule.reverse_step(x, eps, t, z)
    finally:
        if was_training and hasattr(model, "train"):
            model.train()
    return x.clamp(0.0, 1.0)
