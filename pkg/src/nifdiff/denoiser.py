"""Text-conditioned DiT velocity predictor over normalized NIF latents."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass
class DenoiserConfig:
    latent_channels: int = 16
    hidden_dim: int = 256
    num_blocks: int = 8
    num_heads: int = 4
    patch_size: int = 4
    bottleneck_dim: int = 256
    text_refine_blocks: int = 2
    repa_block_index: int = 4
    repa_weight: float = 0.5
    repa_dim: int = 64
    repa_hidden: int = 256
    text_len: int = 16
    text_dim: int = 64
    mlp_ratio: float = 8 / 3

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if (self.hidden_dim // self.num_heads) % 4:
            raise ValueError("head dim must be divisible by 4 for axial 2D rotary encoding")
        if not 0 <= self.repa_block_index < self.num_blocks:
            raise ValueError(f"repa_block_index {self.repa_block_index} outside [0, {self.num_blocks})")

    @classmethod
    def full_scale(cls) -> "DenoiserConfig":
        """Full-size layout (16x512x512 latent, 1024 tokens); constructed, never trained here."""
        return cls(
            latent_channels=16,
            hidden_dim=1536,
            num_blocks=16,
            num_heads=24,
            patch_size=16,
            bottleneck_dim=1024,
            text_refine_blocks=4,
            repa_block_index=8,
            repa_weight=0.5,
            repa_dim=768,
            repa_hidden=2048,
            text_len=128,
            text_dim=2048,
        )


@dataclass
class TextCondition:
    """Text tokens ``(B, L, D_text)``; rows flagged in ``null`` use the learned null embedding."""

    tokens: torch.Tensor
    null: torch.Tensor  # (B,) bool

    def with_dropped(self, drop: torch.Tensor) -> "TextCondition":
        return TextCondition(self.tokens, self.null | drop)

    @classmethod
    def cat(cls, conds) -> "TextCondition":
        return cls(torch.cat([c.tokens for c in conds]), torch.cat([c.null for c in conds]))


class StubTextEncoder:
    """Frozen hashed-vocabulary text encoder.

    Words are lower-cased, split on whitespace, hashed with CRC32 into a fixed random
    embedding table and padded/truncated to ``max_len``. The empty prompt maps to
    the denoiser's null embedding.
    """

    name = "stub"

    def __init__(self, max_len: int = 16, dim: int = 64, vocab_size: int = 4096, seed: int = 0):
        self.max_len = max_len
        self.dim = dim
        self.vocab_size = vocab_size
        gen = torch.Generator().manual_seed(seed)
        self.table = torch.randn(vocab_size, dim, generator=gen)
        self.pad = torch.zeros(dim)

    def token_ids(self, prompt: str) -> list[int]:
        words = prompt.lower().split()[: self.max_len]
        return [zlib.crc32(w.encode("utf-8")) % self.vocab_size for w in words]

    def encode(self, prompt: str) -> TextCondition:
        ids = self.token_ids(prompt)
        tokens = self.pad.expand(self.max_len, self.dim).clone()
        if ids:
            tokens[: len(ids)] = self.table[ids]
        return TextCondition(tokens.unsqueeze(0), torch.tensor([len(ids) == 0]))

    def encode_batch(self, prompts) -> TextCondition:
        return TextCondition.cat([self.encode(p) for p in prompts])

    def null(self, batch: int = 1) -> TextCondition:
        return TextCondition(torch.zeros(batch, self.max_len, self.dim), torch.ones(batch, dtype=torch.bool))


def make_text_encoder(backend: str, max_len: int, dim: int, seed: int = 0):
    if backend == "stub":
        return StubTextEncoder(max_len, dim, seed=seed)
    raise ValueError(f"text backend {backend!r} is not available (only 'stub' ships)")


def patchify(z: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, C, H, W) -> (B, (H/p)(W/p), C p p)``, row-major over patches."""
    b, c, h, w = z.shape
    if h % p or w % p:
        raise ValueError(f"latent {h}x{w} not divisible by patch size {p}")
    z = z.view(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
    return z.reshape(b, (h // p) * (w // p), c * p * p)


def unpatchify(tokens: torch.Tensor, c: int, h: int, w: int, p: int) -> torch.Tensor:
    b = tokens.shape[0]
    z = tokens.view(b, h // p, w // p, c, p, p).permute(0, 3, 1, 4, 2, 5)
    return z.reshape(b, c, h, w)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.double()[:, None] * 1000.0) * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(t.dtype if t.is_floating_point() else torch.float32)


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t):
        return self.mlp(timestep_embedding(t, self.freq_dim).to(self.mlp[0].weight.dtype))


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


def rope_2d(h: int, w: int, head_dim: int, base: float = 10000.0):
    """Axial rotary angles: the first half of each head rotates with the row index,
    the second half with the column index. Returns ``(cos, sin)`` of shape ``(N, head_dim/2)``."""
    quarter = head_dim // 4
    freqs = 1.0 / base ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    ang = torch.cat([ys.reshape(-1, 1) * freqs, xs.reshape(-1, 1) * freqs], dim=-1)
    return ang.cos(), ang.sin()


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x (B, heads, N, hd); pairs (x[2i], x[2i+1]) rotate together
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = cos.to(x.dtype), sin.to(x.dtype)
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class Attention(nn.Module):
    """Multi-head attention with RMS-normalized queries/keys; self- or cross-attention."""

    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.q_norm = nn.RMSNorm(self.head_dim, eps=1e-6)
        self.k_norm = nn.RMSNorm(self.head_dim, eps=1e-6)
        self.proj = nn.Linear(dim, dim)

    def _heads(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context=None, rope=None):
        context = x if context is None else context
        q = self.q_norm(self._heads(self.q(x)))
        k, v = self.kv(context).chunk(2, dim=-1)
        k, v = self.k_norm(self._heads(k)), self._heads(v)
        if rope is not None:
            q, k = apply_rope(q, *rope), apply_rope(k, *rope)
        out = F.scaled_dot_product_attention(q, k, v)
        b, _, n, _ = out.shape
        return self.proj(out.transpose(1, 2).reshape(b, n, -1))


class SwiGLU(nn.Module):
    def __init__(self, dim, ratio):
        super().__init__()
        hidden = int(dim * ratio)
        self.w12 = nn.Linear(dim, 2 * hidden)
        self.w3 = nn.Linear(hidden, dim)

    def forward(self, x):
        a, b = self.w12(x).chunk(2, dim=-1)
        return self.w3(F.silu(a) * b)


class TextRefineBlock(nn.Module):
    """Self-attention + FFN on text tokens, AdaLN-modulated by the timestep embedding."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(d, cfg.num_heads)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.ffn = SwiGLU(d, cfg.mlp_ratio)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x, c):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1[:, None] * self.attn(modulate(self.norm1(x), sh1, sc1))
        return x + g2[:, None] * self.ffn(modulate(self.norm2(x), sh2, sc2))


class ImageBlock(nn.Module):
    """Gated self-attention (2D RoPE), gated cross-attention to text, gated SwiGLU.

    All three residual branches are scaled by AdaLN gates that start at zero, so a
    freshly built block is the identity on image tokens.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.self_attn = Attention(d, cfg.num_heads)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.cross_attn = Attention(d, cfg.num_heads)
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.ffn = SwiGLU(d, cfg.mlp_ratio)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 9 * d))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x, c, text, rope):
        mods = self.ada(c).chunk(9, dim=-1)
        sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3 = mods
        x = x + g1[:, None] * self.self_attn(modulate(self.norm1(x), sh1, sc1), rope=rope)
        x = x + g2[:, None] * self.cross_attn(modulate(self.norm2(x), sh2, sc2), context=text)
        return x + g3[:, None] * self.ffn(modulate(self.norm3(x), sh3, sc3))


class FinalLayer(nn.Module):
    def __init__(self, hidden, out_dim):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))
        self.linear = nn.Linear(hidden, out_dim)
        for layer in (self.ada[1], self.linear):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x, c):
        shift, scale = self.ada(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class RepaHead(nn.Module):
    """Two-layer MLP mapping denoiser tokens to the teacher feature width."""

    def __init__(self, hidden, proj_hidden, out_dim):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(hidden, proj_hidden), nn.SiLU(), nn.Linear(proj_hidden, out_dim))

    def forward(self, x):
        return self.net(x)


class Denoiser(nn.Module):
    """``(u_t, t, text) -> velocity`` with the same shape as ``u_t``.

    The number of image tokens is ``(H/p)(W/p)`` of the latent and is independent of
    any resolution the latent is later rendered at.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d, p, c = cfg.hidden_dim, cfg.patch_size, cfg.latent_channels
        self.patch_in = nn.Linear(c * p * p, cfg.bottleneck_dim)
        self.patch_hidden = nn.Linear(cfg.bottleneck_dim, d)
        self.t_embed = TimestepEmbedder(d)
        self.text_proj = nn.Linear(cfg.text_dim, d)
        self.null_text = nn.Parameter(torch.randn(cfg.text_len, cfg.text_dim) * 0.02)
        self.text_blocks = nn.ModuleList([TextRefineBlock(cfg) for _ in range(cfg.text_refine_blocks)])
        self.blocks = nn.ModuleList([ImageBlock(cfg) for _ in range(cfg.num_blocks)])
        self.final = FinalLayer(d, c * p * p)
        self.repa_head = RepaHead(d, cfg.repa_hidden, cfg.repa_dim)

    def num_tokens(self, height: int, width: int) -> int:
        p = self.cfg.patch_size
        if height % p or width % p:
            raise ValueError(f"latent {height}x{width} not divisible by patch size {p}")
        return (height // p) * (width // p)

    def patch_embed(self, z: torch.Tensor) -> torch.Tensor:
        return self.patch_hidden(self.patch_in(patchify(z, self.cfg.patch_size)))

    def resolve_text(self, cond: TextCondition) -> torch.Tensor:
        """Raw text tokens with null rows replaced by the learned null embedding."""
        tokens = cond.tokens.to(self.null_text.dtype)
        null = cond.null.view(-1, 1, 1).to(tokens.device)
        return torch.where(null, self.null_text.expand_as(tokens), tokens)

    def forward(self, u_t: torch.Tensor, t: torch.Tensor, cond: TextCondition) -> torch.Tensor:
        b, c, h, w = u_t.shape
        p = self.cfg.patch_size
        if t.dim() == 0:
            t = t.expand(b)
        x = self.patch_embed(u_t)
        temb = self.t_embed(t)
        text = self.text_proj(self.resolve_text(cond))
        for blk in self.text_blocks:
            text = blk(text, temb)
        rope = rope_2d(h // p, w // p, self.cfg.hidden_dim // self.cfg.num_heads)
        for i, blk in enumerate(self.blocks):
            x = blk(x, temb, text, rope)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after image block {i}")
        return unpatchify(self.final(x, temb), c, h, w, p)


def repa_loss(
    block_features: torch.Tensor,
    teacher: torch.Tensor,
    head: nn.Module | None = None,
    token_grid: tuple[int, int] | None = None,
) -> torch.Tensor:
    """Mean of ``1 - cos`` between projected denoiser tokens and teacher features.

    ``block_features`` is ``(B, N, hidden)``; ``teacher`` is ``(B, D_t, H_p, W_p)`` and is
    bilinearly resized to ``token_grid`` (default: square grid of N) when its grid differs.
    Pass ``head=None`` when the features are already projected.
    """
    proj = head(block_features) if head is not None else block_features
    b, n, d = proj.shape
    teacher = teacher.detach()
    if teacher.dim() == 3:
        teacher = teacher.unsqueeze(0)
    if teacher.shape[1] != d:
        raise ValueError(f"projected width {d} does not match teacher width {teacher.shape[1]}")
    if token_grid is None:
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"cannot infer a square token grid for N={n}; pass token_grid")
        token_grid = (side, side)
    if tuple(teacher.shape[-2:]) != tuple(token_grid):
        teacher = F.interpolate(teacher, size=token_grid, mode="bilinear", align_corners=False)
    target = teacher.flatten(2).transpose(1, 2).to(proj.dtype)
    cos = (F.normalize(proj, dim=-1, eps=1e-8) * F.normalize(target, dim=-1, eps=1e-8)).sum(-1)
    return (1 - cos).mean()


def save_denoiser(model: Denoiser, path, extra: dict | None = None, text_backend: str = "stub") -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "denoiser",
        "config": asdict(model.cfg),
        "text_backend": text_backend,
        "state_dict": model.state_dict(),
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_denoiser(path, use_ema: bool = True) -> tuple[Denoiser, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION or payload.get("kind") != "denoiser":
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} denoiser checkpoint")
    model = Denoiser(DenoiserConfig(**payload["config"]))
    state = payload.get("ema_state_dict") if use_ema and payload.get("ema_state_dict") else payload["state_dict"]
    model.load_state_dict(state)
    return model, payload
