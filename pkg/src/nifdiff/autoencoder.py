"""Stage-1 representation: a no-downsampling EDSR encoder and the coordinate-queried
attention renderer (CQAR) that decodes a dense latent on any coordinate grid."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import CoordGrid, partition_windows, query_geometry, reverse_windows

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    latent_channels: int = 16
    num_blocks: int = 8
    kernel_size: int = 3

    def __post_init__(self):
        if self.latent_channels < 1 or self.num_blocks < 0:
            raise ValueError(f"invalid encoder config {self}")


@dataclass
class RendererConfig:
    hidden_dim: int = 256
    num_blocks: int = 4
    num_heads: int = 4
    window: int = 8
    ffn_expansion: int = 2

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.num_blocks < 1:
            raise ValueError("renderer needs at least one block")
        if self.window < 2 or self.window % 2:
            raise ValueError(f"window must be even and >= 2, got {self.window}")


def conv(in_channels, out_channels, kernel_size, bias=True):
    return nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2, bias=bias)


class ResBlock(nn.Module):
    def __init__(self, n_feats, kernel_size, res_scale=1.0):
        super().__init__()
        self.body = nn.Sequential(
            conv(n_feats, n_feats, kernel_size), nn.ReLU(inplace=True), conv(n_feats, n_feats, kernel_size)
        )
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.body(x) * self.res_scale


class Encoder(nn.Module):
    """EDSR-style encoder without upsampling: ``(B, 3, H, W) -> (B, C, H, W)``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c, k = cfg.latent_channels, cfg.kernel_size
        self.head = conv(3, c, k)
        self.body = nn.Sequential(*[ResBlock(c, k) for _ in range(cfg.num_blocks)])
        self.tail = conv(c, c, k)

    @property
    def last_layer(self) -> nn.Module:
        """Final convolution; its gradient norms drive the adaptive distillation weight."""
        return self.tail

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            return self.forward(image.unsqueeze(0))[0]
        if image.shape[1] != 3:
            raise ValueError(f"encoder expects 3 input channels, got {image.shape[1]}")
        x = self.head(image - 0.5)
        return x + self.tail(self.body(x))


class RelativePositionBias(nn.Module):
    """Learned ``(2W-1)^2 x heads`` table gathered into a ``(heads, W^2, W^2)`` bias."""

    def __init__(self, window: int, num_heads: int):
        super().__init__()
        self.window = window
        self.table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.table, std=0.02)
        ys, xs = torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
        pos = torch.stack([ys.flatten(), xs.flatten()])  # (2, W^2)
        rel = pos[:, :, None] - pos[:, None, :] + (window - 1)
        self.register_buffer("index", rel[0] * (2 * window - 1) + rel[1], persistent=False)

    def forward(self) -> torch.Tensor:
        n = self.window * self.window
        return self.table[self.index.view(-1)].view(n, n, -1).permute(2, 0, 1)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, window: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = RelativePositionBias(window, num_heads)

    def forward(self, windows: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # windows (B, nW, N, D); mask (nW, N, N)
        b, nw, n, d = windows.shape
        qkv = self.qkv(windows).view(b, nw, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(3, 0, 1, 4, 2, 5)  # each (B, nW, heads, N, hd)
        bias = self.rel_bias().to(windows.dtype)[None, None] + mask[None, :, None]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias)
        return self.proj(out.transpose(2, 3).reshape(b, nw, n, d))


class GatedFFN(nn.Module):
    def __init__(self, dim: int, expansion: int):
        super().__init__()
        self.fc_in = nn.Linear(dim, 2 * expansion * dim)
        self.fc_out = nn.Linear(expansion * dim, dim)

    def forward(self, x):
        x1, x2 = self.fc_in(x).chunk(2, dim=-1)
        return self.fc_out(F.gelu(x1) * x2)


class RendererBlock(nn.Module):
    """Pre-norm (shifted-)window attention followed by a pre-norm gated FFN."""

    def __init__(self, cfg: RendererConfig, shift: int):
        super().__init__()
        self.window = cfg.window
        self.shift = shift
        self.norm1 = nn.LayerNorm(cfg.hidden_dim)
        self.attn = WindowAttention(cfg.hidden_dim, cfg.num_heads, cfg.window)
        self.norm2 = nn.LayerNorm(cfg.hidden_dim)
        self.ffn = GatedFFN(cfg.hidden_dim, cfg.ffn_expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x (B, H', W', D); a grid that fits in one window has nothing to exchange across windows
        fits = x.shape[1] <= self.window and x.shape[2] <= self.window
        windows, mask, layout = partition_windows(self.norm1(x), self.window, 0 if fits else self.shift)
        x = x + reverse_windows(self.attn(windows, mask), layout)
        return x + self.ffn(self.norm2(x))


class Renderer(nn.Module):
    """Renders RGB at every point of a :class:`CoordGrid` from a dense latent.

    One token per output pixel is built from the nearest latent feature, the offset
    to that latent center, the scale-relative cell size and the absolute coordinate
    (concatenated in that order), then refined by windowed transformer blocks.
    """

    def __init__(self, latent_channels: int, cfg: RendererConfig):
        super().__init__()
        self.cfg = cfg
        self.latent_channels = latent_channels
        self.embed = nn.Linear(latent_channels + 6, cfg.hidden_dim)
        self.blocks = nn.ModuleList(
            [RendererBlock(cfg, shift=(cfg.window // 2 if i % 2 else 0)) for i in range(cfg.num_blocks)]
        )
        self.norm = nn.LayerNorm(cfg.hidden_dim)
        self.to_rgb = nn.Linear(cfg.hidden_dim, 3)
        nn.init.zeros_(self.to_rgb.weight)
        nn.init.zeros_(self.to_rgb.bias)

    def token_inputs(self, latent: torch.Tensor, grid: CoordGrid) -> torch.Tensor:
        """Concatenated ``(feature, delta_q, delta_c, q)`` per query: ``(B, H', W', C + 6)``."""
        if latent.dim() != 4 or latent.shape[1] != self.latent_channels:
            raise ValueError(f"expected latent (B, {self.latent_channels}, H, W), got {tuple(latent.shape)}")
        b, _, h, w = latent.shape
        geo = query_geometry(grid, h, w)
        iy, ix = geo.nearest_index[..., 0], geo.nearest_index[..., 1]
        feats = latent[:, :, iy, ix].permute(0, 2, 3, 1)  # (B, H', W', C)
        extras = torch.cat([geo.delta_q, geo.delta_c, grid.coords], dim=-1).to(latent)
        return torch.cat([feats, extras.expand(b, -1, -1, -1)], dim=-1)

    def build_tokens(self, latent: torch.Tensor, grid: CoordGrid) -> torch.Tensor:
        return self.embed(self.token_inputs(latent, grid))

    def forward(self, latent: torch.Tensor, grid: CoordGrid) -> torch.Tensor:
        squeeze = latent.dim() == 3
        if squeeze:
            latent = latent.unsqueeze(0)
        x = self.build_tokens(latent, grid)
        for block in self.blocks:
            x = block(x)
        rgb = self.to_rgb(self.norm(x)) + 0.5
        rgb = rgb.permute(0, 3, 1, 2)
        return rgb[0] if squeeze else rgb


class PerceptualLoss(Protocol):
    def __call__(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor: ...


class RandomConvPerceptual(nn.Module):
    """Frozen three-layer random conv stack; a download-free stand-in for LPIPS.

    Distance is the mean squared difference of channel-normalized activations,
    averaged over layers.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for c_out in widths:
            layer = nn.Conv2d(c_in, c_out, 3, padding=1)
            with torch.no_grad():
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen) * (2.0 / (9 * c_in)) ** 0.5)
                layer.bias.zero_()
            layers.append(layer)
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if pred.dim() == 3:
            pred, target = pred.unsqueeze(0), target.unsqueeze(0)
        x, y = pred - 0.5, target - 0.5
        total = 0.0
        for layer in self.layers:
            weight, bias = layer.weight.to(x.dtype), layer.bias.to(x.dtype)
            x = F.relu(F.conv2d(x, weight, bias, padding=1))
            y = F.relu(F.conv2d(y, weight, bias, padding=1))
            diff = F.normalize(x, dim=1, eps=1e-8) - F.normalize(y, dim=1, eps=1e-8)
            total = total + diff.pow(2).sum(dim=1).mean()
        return total / len(self.layers)


def make_perceptual(name: str, seed: int = 0) -> PerceptualLoss | None:
    if name == "none":
        return None
    if name == "random_conv":
        return RandomConvPerceptual(seed)
    raise ValueError(f"unknown perceptual backend {name!r} (expected 'none' or 'random_conv')")


def reconstruction_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    omega: float = 0.1,
    perceptual: PerceptualLoss | None = None,
) -> torch.Tensor:
    """Mean absolute error plus ``omega`` times a perceptual distance."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if omega < 0:
        raise ValueError(f"omega must be non-negative, got {omega}")
    loss = (pred - target).abs().mean()
    if omega > 0 and perceptual is not None:
        loss = loss + omega * perceptual(pred, target)
    return loss


class NIFAutoencoder(nn.Module):
    """Encoder + renderer pair; the unit saved and loaded as a Stage-1 checkpoint."""

    def __init__(self, encoder_cfg: EncoderConfig, renderer_cfg: RendererConfig):
        super().__init__()
        self.encoder = Encoder(encoder_cfg)
        self.renderer = Renderer(encoder_cfg.latent_channels, renderer_cfg)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return self.encoder(image)

    def render(self, latent: torch.Tensor, grid: CoordGrid) -> torch.Tensor:
        return self.renderer(latent, grid)

    def forward(self, image: torch.Tensor, grid: CoordGrid) -> torch.Tensor:
        return self.render(self.encode(image), grid)

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.encoder.cfg), "renderer": asdict(self.renderer.cfg)}

    @classmethod
    def from_config_dict(cls, cfg: dict) -> "NIFAutoencoder":
        return cls(EncoderConfig(**cfg["encoder"]), RendererConfig(**cfg["renderer"]))


def save_autoencoder(model: NIFAutoencoder, path, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "nif_autoencoder",
        "config": model.config_dict(),
        "state_dict": model.state_dict(),
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_autoencoder(path) -> tuple[NIFAutoencoder, dict]:
    """Load a Stage-1 checkpoint; parameter shapes are validated against the stored config."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION or payload.get("kind") != "nif_autoencoder":
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} autoencoder checkpoint")
    model = NIFAutoencoder.from_config_dict(payload["config"])
    expected = model.state_dict()
    for name, tensor in payload["state_dict"].items():
        if name in expected and expected[name].shape != tensor.shape:
            raise ValueError(f"{path}: {name} has shape {tuple(tensor.shape)}, config implies {tuple(expected[name].shape)}")
    model.load_state_dict(payload["state_dict"])
    return model, payload
