"""Semantic distillation into the NIF latent: frozen teacher features, a pooled
projection branch, margin-based cosine and relational losses, and the
gradient-ratio weight that balances distillation against reconstruction."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

COS_EPS = 1e-8


@dataclass
class DistillConfig:
    m_cos: float = 0.5
    m_dist: float = 0.25
    K: int = 256
    w_base: float = 0.1
    delta1: float = 1e-4
    clamp_max: float = 1e8

    def __post_init__(self):
        if not (0.0 <= self.m_cos <= 1.0 and 0.0 <= self.m_dist <= 1.0):
            raise ValueError("margins must lie in [0, 1]")
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if self.delta1 <= 0:
            raise ValueError("delta1 must be positive")


@dataclass
class TeacherConfig:
    backend: str = "stub"
    weights: str | None = None
    image_size: int = 32
    patch_size: int = 8
    feature_dim: int = 64
    seed: int = 0


class TeacherUnavailableError(RuntimeError):
    pass


class StubTeacher(nn.Module):
    """Deterministic frozen conv stack producing a ``(D_t, H/p, W/p)`` patch-feature map.

    Weights come from a private generator seeded by ``seed``, so two processes with
    the same seed produce identical features.
    """

    def __init__(self, image_size=32, patch_size=8, feature_dim=64, seed=0):
        super().__init__()
        if image_size % patch_size:
            raise ValueError(f"image_size {image_size} not divisible by patch_size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        gen = torch.Generator().manual_seed(seed)
        width = 32
        self.stem = nn.Conv2d(3, width, 3, padding=1)
        self.patchify = nn.Conv2d(width, feature_dim, patch_size, stride=patch_size)
        self.mix = nn.Conv2d(feature_dim, feature_dim, 1)
        with torch.no_grad():
            for layer in (self.stem, self.patchify, self.mix):
                fan_in = layer.weight[0].numel()
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen) / fan_in**0.5)
                layer.bias.copy_(torch.randn(layer.bias.shape, generator=gen) * 0.1)
        self.requires_grad_(False)
        self.eval()

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return n, n

    @torch.no_grad()
    def forward(self, image: torch.Tensor) -> torch.Tensor:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        image = image.detach().float()
        if image.shape[-2:] != (self.image_size, self.image_size):
            image = F.interpolate(image, size=(self.image_size,) * 2, mode="bilinear", antialias=True, align_corners=False)
        x = F.gelu(self.stem(image * 2 - 1))
        x = F.gelu(self.patchify(x))
        out = self.mix(x)
        return out[0] if squeeze else out


class TorchScriptTeacher(nn.Module):
    """Adapter for an exported pretrained ViT returning ``(B, D_t, H_p, W_p)`` patch features."""

    def __init__(self, weights: str, image_size: int, patch_size: int):
        super().__init__()
        self.module = torch.jit.load(weights, map_location="cpu")
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.image_size = image_size
        self.patch_size = patch_size

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return n, n

    @torch.no_grad()
    def forward(self, image: torch.Tensor) -> torch.Tensor:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        image = F.interpolate(image.detach().float(), size=(self.image_size,) * 2, mode="bilinear", antialias=True)
        out = self.module(image).detach()
        return out[0] if squeeze else out


def make_teacher(cfg: TeacherConfig) -> nn.Module:
    if cfg.backend == "stub":
        return StubTeacher(cfg.image_size, cfg.patch_size, cfg.feature_dim, cfg.seed)
    if cfg.backend == "torchscript":
        if not cfg.weights or not Path(cfg.weights).is_file():
            raise TeacherUnavailableError(
                f"teacher backend 'torchscript' needs a readable weights file, got {cfg.weights!r}"
            )
        return TorchScriptTeacher(cfg.weights, cfg.image_size, cfg.patch_size)
    raise TeacherUnavailableError(f"teacher backend {cfg.backend!r} is not available (use 'stub' or 'torchscript')")


class ProjectionBranch(nn.Module):
    """Average-pool the latent to the teacher grid, then a 1x1 conv to the teacher width.

    Only the distillation losses consume its output; the renderer never sees it.
    """

    def __init__(self, latent_channels: int, teacher_dim: int, grid: tuple[int, int]):
        super().__init__()
        self.grid = tuple(grid)
        self.proj = nn.Conv2d(latent_channels, teacher_dim, 1)

    def pool(self, latent: torch.Tensor) -> torch.Tensor:
        h, w = latent.shape[-2:]
        if self.grid[0] > h or self.grid[1] > w:
            raise ValueError(f"pool target {self.grid} larger than latent grid {(h, w)}")
        return F.adaptive_avg_pool2d(latent, self.grid)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        squeeze = latent.dim() == 3
        if squeeze:
            latent = latent.unsqueeze(0)
        out = self.proj(self.pool(latent))
        return out[0] if squeeze else out


def _as_vectors(features: torch.Tensor) -> torch.Tensor:
    """``(B, D, H, W)`` or ``(D, H, W)`` -> unit vectors ``(B, N, D)``."""
    if features.dim() == 3:
        features = features.unsqueeze(0)
    b, d = features.shape[:2]
    vec = features.reshape(b, d, -1).transpose(1, 2)
    return F.normalize(vec, dim=-1, eps=COS_EPS)


def _check_pair(student, teacher):
    if student.shape != teacher.shape:
        raise ValueError(f"student {tuple(student.shape)} and teacher {tuple(teacher.shape)} grids differ")


def margin_cosine_loss(student: torch.Tensor, teacher: torch.Tensor, m_cos: float = 0.5) -> torch.Tensor:
    """Mean over positions of ``max(0, 1 - m_cos - cos(student_i, teacher_i))``."""
    _check_pair(student, teacher)
    cos = (_as_vectors(student) * _as_vectors(teacher)).sum(-1)
    return F.relu(1.0 - m_cos - cos).mean()


def sample_positions(n: int, k: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """``k`` positions out of ``n`` uniformly without replacement (all of them if ``k >= n``)."""
    if k >= n:
        return torch.arange(n)
    return torch.randperm(n, generator=generator)[:k]


def distance_matrix_loss(
    student: torch.Tensor,
    teacher: torch.Tensor,
    K: int = 256,
    m_dist: float = 0.25,
    generator: torch.Generator | None = None,
    index: torch.Tensor | None = None,
) -> torch.Tensor:
    """Hinged mismatch between student and teacher cosine-similarity matrices.

    One index set of ``K`` positions is shared by student and teacher (and across the
    batch). Pass ``index`` to fix it explicitly.
    """
    _check_pair(student, teacher)
    s, t = _as_vectors(student), _as_vectors(teacher)
    if index is None:
        index = sample_positions(s.shape[1], K, generator)
    s, t = s[:, index], t[:, index]
    d_s = s @ s.transpose(1, 2)
    d_t = t @ t.transpose(1, 2)
    return F.relu((d_s - d_t).abs() - m_dist).mean()


def distill_loss(student, teacher, cfg: DistillConfig, generator=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(L_mcos, L_mdms)``; their sum is the distillation loss."""
    return (
        margin_cosine_loss(student, teacher, cfg.m_cos),
        distance_matrix_loss(student, teacher, cfg.K, cfg.m_dist, generator),
    )


def adaptive_weight(grad_rec_norm: float, grad_distill_norm: float, cfg: DistillConfig) -> float:
    """``w_base * clamp(grad_rec_norm / (grad_distill_norm + delta1), 0, 1e8)`` as a plain float."""
    grad_rec_norm, grad_distill_norm = float(grad_rec_norm), float(grad_distill_norm)
    if grad_rec_norm < 0 or grad_distill_norm < 0:
        raise ValueError(f"gradient norms must be non-negative, got {grad_rec_norm}, {grad_distill_norm}")
    ratio = grad_rec_norm / (grad_distill_norm + cfg.delta1)
    return cfg.w_base * min(max(ratio, 0.0), cfg.clamp_max)


def grad_norm(loss: torch.Tensor, params) -> float:
    """Norm of ``d loss / d params``; keeps the graph so the loss can be backpropagated later."""
    params = list(params)
    if not loss.requires_grad:
        return 0.0
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    sq = sum(float(g.detach().pow(2).sum()) for g in grads if g is not None)
    return sq**0.5
