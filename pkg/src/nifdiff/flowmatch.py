"""Flow matching over normalized latents: statistics, shifted logit-normal
timesteps, the velocity loss and a guided Euler sampler.

Convention: ``u_t = (1 - t) * noise + t * data``, so ``t = 0`` is pure noise and
the target velocity is ``data - noise``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import torch

SIGMA_FLOOR = 1e-6
STATS_VERSION = 1


@dataclass
class LatentStats:
    mu: torch.Tensor  # (C,)
    sigma: torch.Tensor  # (C,)
    fingerprint: str = ""

    @property
    def channels(self) -> int:
        return self.mu.numel()

    def _view(self, latent: torch.Tensor):
        c = latent.shape[-3]
        if c != self.channels:
            raise ValueError(f"latent has {c} channels, stats have {self.channels}")
        shape = (c, 1, 1)
        mu = self.mu.to(latent.dtype).view(shape)
        sigma = self.sigma.clamp_min(SIGMA_FLOOR).to(latent.dtype).view(shape)
        return mu, sigma

    def save(self, path) -> None:
        payload = {
            "format_version": STATS_VERSION,
            "mu": self.mu.double().tolist(),
            "sigma": self.sigma.double().tolist(),
            "fingerprint": self.fingerprint,
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)

    @classmethod
    def load(cls, path) -> "LatentStats":
        with open(path) as f:
            payload = json.load(f)
        if payload.get("format_version") != STATS_VERSION:
            raise ValueError(f"{path}: unsupported stats format {payload.get('format_version')}")
        return cls(
            torch.tensor(payload["mu"], dtype=torch.float64),
            torch.tensor(payload["sigma"], dtype=torch.float64),
            payload.get("fingerprint", ""),
        )


def normalize(latent: torch.Tensor, stats: LatentStats) -> torch.Tensor:
    mu, sigma = stats._view(latent)
    return (latent - mu) / sigma


def denormalize(z_norm: torch.Tensor, stats: LatentStats) -> torch.Tensor:
    mu, sigma = stats._view(z_norm)
    return z_norm * sigma + mu


class StatsAccumulator:
    """Per-channel running sum and sum of squares in float64."""

    def __init__(self):
        self.count = 0
        self.total = None
        self.total_sq = None

    def update(self, latents: torch.Tensor) -> None:
        if latents.dim() == 3:
            latents = latents.unsqueeze(0)
        x = latents.detach().double().transpose(0, 1).reshape(latents.shape[1], -1)
        if self.total is None:
            self.total = torch.zeros(x.shape[0], dtype=torch.float64)
            self.total_sq = torch.zeros(x.shape[0], dtype=torch.float64)
        self.total += x.sum(1)
        self.total_sq += x.pow(2).sum(1)
        self.count += x.shape[1]

    def finalize(self, fingerprint: str = "") -> LatentStats:
        if self.count == 0:
            raise ValueError("cannot compute latent statistics of an empty dataset")
        mu = self.total / self.count
        var = (self.total_sq / self.count - mu.pow(2)).clamp_min(0.0)
        return LatentStats(mu, var.sqrt(), fingerprint)


@dataclass
class TimestepShiftConfig:
    s: float = 32.0
    logit_mu: float = 0.0
    logit_sigma: float = 1.0
    delta2: float = 1e-8

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError(f"shift factor must be positive, got {self.s}")
        if self.delta2 < 0:
            raise ValueError("delta2 must be non-negative")


def shift_timestep(t0, s: float, delta2: float = 1e-8):
    """``t0 / (t0 + (1 - t0) * s)``; large ``s`` pushes mass toward ``t = 0`` (noise).

    ``delta2`` floors the denominator. For ``t0`` in ``[0, 1]`` the denominator is at
    least ``min(1, s)``, so the floor only matters for ``s < delta2``.
    """
    den = t0 + (1 - t0) * s
    if isinstance(den, torch.Tensor):
        den = den.clamp_min(delta2)
    else:
        den = max(den, delta2)
    return t0 / den


def sample_timestep(generator: torch.Generator, cfg: TimestepShiftConfig, n: int = 1, dtype=torch.float32):
    xi = torch.randn(n, generator=generator, dtype=torch.float64) * cfg.logit_sigma + cfg.logit_mu
    t = shift_timestep(torch.sigmoid(xi), cfg.s, cfg.delta2)
    return t.to(dtype)


@dataclass
class FlowSample:
    u_t: torch.Tensor
    t: torch.Tensor  # (B,)
    epsilon: torch.Tensor
    target_v: torch.Tensor


def make_flow_sample(z_norm: torch.Tensor, t: torch.Tensor, epsilon: torch.Tensor) -> FlowSample:
    tb = t.to(z_norm.dtype).view(-1, *([1] * (z_norm.dim() - 1)))
    return FlowSample(
        u_t=(1 - tb) * epsilon + tb * z_norm,
        t=t,
        epsilon=epsilon,
        target_v=z_norm - epsilon,
    )


def draw_flow_sample(z_norm: torch.Tensor, generator: torch.Generator, cfg: TimestepShiftConfig) -> FlowSample:
    t = sample_timestep(generator, cfg, z_norm.shape[0], dtype=z_norm.dtype)
    eps = torch.randn(z_norm.shape, generator=generator, dtype=z_norm.dtype)
    return make_flow_sample(z_norm, t, eps)


def flow_matching_loss(
    denoiser: Callable,
    z_norm: torch.Tensor,
    text_cond,
    generator: torch.Generator,
    cfg: TimestepShiftConfig,
) -> torch.Tensor:
    """Mean squared error between predicted and target velocity for one random draw."""
    if not torch.isfinite(z_norm).all():
        raise ValueError("normalized latent contains non-finite values")
    sample = draw_flow_sample(z_norm, generator, cfg)
    v = denoiser(sample.u_t, sample.t, text_cond)
    loss = (v - sample.target_v).pow(2).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite flow-matching loss at t={sample.t.tolist()}")
    return loss


def make_inference_schedule(steps: int, s: float) -> list[tuple[float, float]]:
    """``(t_k, dt_k)`` pairs from the shifted uniform grid ``{0, 1/steps, ..., 1}``; runs exactly from 0 to 1."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    ts = [shift_timestep(k / steps, s) for k in range(steps + 1)]
    return [(ts[k], ts[k + 1] - ts[k]) for k in range(steps)]


def guided_velocity(v_cond: torch.Tensor, v_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    return v_uncond + scale * (v_cond - v_uncond)


@torch.no_grad()
def euler_sample(
    denoiser: Callable,
    shape,
    text_cond,
    steps: int = 25,
    cfg_scale: float = 4.0,
    shift_cfg: TimestepShiftConfig | None = None,
    generator: torch.Generator | None = None,
    null_cond=None,
    noise: torch.Tensor | None = None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Integrate from Gaussian noise at ``t = 0`` to ``t = 1`` with classifier-free guidance.

    ``null_cond`` is the unconditional input; it is only evaluated when
    ``cfg_scale != 1`` (scale 1 is plain conditional sampling).
    """
    shift_cfg = shift_cfg or TimestepShiftConfig()
    u = noise.clone() if noise is not None else torch.randn(tuple(shape), generator=generator, dtype=dtype)
    guided = cfg_scale != 1.0
    if guided and null_cond is None:
        raise ValueError("cfg_scale != 1 needs an unconditional input")
    batch = u.shape[0]
    for step, (t, dt) in enumerate(make_inference_schedule(steps, shift_cfg.s)):
        tt = torch.full((batch,), t, dtype=u.dtype)
        v = denoiser(u, tt, text_cond)
        if guided:
            v = guided_velocity(v, denoiser(u, tt, null_cond), cfg_scale)
        u = u + dt * v
        if not torch.isfinite(u).all():
            raise FloatingPointError(f"sampler state became non-finite at step {step} (t={t:.6f})")
    return u

