"""Stage-1 (NIF + semantic distillation) and Stage-2 (flow matching) optimization."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import torch
import torch.nn as nn

from .autoencoder import NIFAutoencoder, reconstruction_loss
from .data import resize
from .denoiser import Denoiser, StubTextEncoder, TextCondition, repa_loss
from .flowmatch import LatentStats, StatsAccumulator, TimestepShiftConfig, flow_matching_loss, normalize
from .geometry import CoordGrid, make_coord_grid
from .guidance import DistillConfig, ProjectionBranch, adaptive_weight, distill_loss

log = logging.getLogger(__name__)

TRAIN_STATE_VERSION = 1


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 2000
    lr: float = 2e-4
    batch_size: int = 4
    seed: int = 0
    w_base: float = 0.1
    omega: float = 0.1
    perceptual: str = "random_conv"
    shift: float = 32.0
    repa_weight: float = 0.5
    cfg_drop: float = 0.1
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    scale_min: float = 1.0
    scale_max: float = 2.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not 0.0 <= self.cfg_drop <= 1.0:
            raise ValueError("cfg_drop must lie in [0, 1]")
        if not 1.0 <= self.scale_min <= self.scale_max:
            raise ValueError("need 1 <= scale_min <= scale_max")


@dataclass
class Stage1Batch:
    x_in: torch.Tensor  # (3, H0, W0)
    x_tar: torch.Tensor  # (3, round(r H0), round(r W0))
    grid: CoordGrid
    r: float


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = list(params)
    try:
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, fused=True)
    except RuntimeError:  # older torch only fuses on CUDA
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def make_stage1_batch(
    image: torch.Tensor,
    h0: int,
    w0: int,
    generator: torch.Generator,
    scale_range: tuple[float, float] = (1.0, 2.0),
    r: float | None = None,
) -> Stage1Batch:
    """Random multi-resolution crop: target at ``round(r * (H0, W0))``, encoder input at ``(H0, W0)``.

    Rounding is half-to-even (Python's ``round``). Sources smaller than the crop are
    upscaled first.
    """
    if r is None:
        lo, hi = scale_range
        r = float(torch.empty(1, dtype=torch.float64).uniform_(lo, hi, generator=generator))
    ht, wt = round(r * h0), round(r * w0)
    h, w = image.shape[-2:]
    if h < ht or w < wt:
        factor = max(ht / h, wt / w)
        new = (max(ht, math.ceil(h * factor)), max(wt, math.ceil(w * factor)))
        log.warning("source %dx%d smaller than crop %dx%d; upscaling to %dx%d", h, w, ht, wt, *new)
        image = resize(image, new)
        h, w = new
    top = int(torch.randint(0, h - ht + 1, (1,), generator=generator))
    left = int(torch.randint(0, w - wt + 1, (1,), generator=generator))
    x_tar = image[:, top : top + ht, left : left + wt].contiguous()
    x_in = resize(x_tar, (h0, w0))
    return Stage1Batch(x_in=x_in, x_tar=x_tar, grid=make_coord_grid(ht, wt, dtype=x_tar.dtype), r=r)


def stage1_step(
    batch: list[Stage1Batch],
    model: NIFAutoencoder,
    branch: ProjectionBranch,
    teacher,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    distill: DistillConfig,
    perceptual=None,
    generator: torch.Generator | None = None,
) -> dict:
    """One Stage-1 update: reconstruction plus adaptively weighted distillation.

    The adaptive weight uses gradient norms at the encoder's last conv. ``L_rec`` is
    backpropagated first, which leaves its gradient on that layer; the distillation
    gradient there is taken separately (it only touches the projection branch and
    the last conv), then ``w_adapt * L_distill`` is accumulated on top.
    """
    model.train()
    branch.train()
    x_in = torch.stack([b.x_in for b in batch])
    z = model.encode(x_in)
    l_rec = 0.0
    for i, b in enumerate(batch):
        pred = model.render(z[i : i + 1], b.grid)[0]
        l_rec = l_rec + reconstruction_loss(pred, b.x_tar, cfg.omega, perceptual)
    l_rec = l_rec / len(batch)

    t_feat = teacher(x_in)
    l_mcos, l_mdms = distill_loss(branch(z), t_feat, distill, generator)
    l_distill = l_mcos + l_mdms

    breakdown = {"L_rec": l_rec.item(), "L_mcos": l_mcos.item(), "L_mdms": l_mdms.item()}
    if not (math.isfinite(breakdown["L_rec"]) and math.isfinite(l_distill.item())):
        raise FloatingPointError(f"non-finite Stage-1 loss: {breakdown}")

    last = list(model.encoder.last_layer.parameters())
    optimizer.zero_grad(set_to_none=True)
    l_rec.backward(retain_graph=True)
    g_rec = math.sqrt(sum(float(p.grad.pow(2).sum()) for p in last if p.grad is not None))
    if l_distill.requires_grad:
        grads = torch.autograd.grad(l_distill, last, retain_graph=True, allow_unused=True)
        g_dist = math.sqrt(sum(float(g.pow(2).sum()) for g in grads if g is not None))
    else:
        g_dist = 0.0
    w = adaptive_weight(g_rec, g_dist, distill)
    if w > 0 and l_distill.requires_grad:
        (w * l_distill).backward()
    total = breakdown["L_rec"] + w * (breakdown["L_mcos"] + breakdown["L_mdms"])
    if not math.isfinite(total):
        raise FloatingPointError(f"non-finite Stage-1 total: {breakdown} w_adapt={w}")
    params = [p for group in optimizer.param_groups for p in group["params"]]
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    optimizer.step()
    breakdown.update({"w_adapt": w, "total": total, "grad_rec_norm": g_rec, "grad_distill_norm": g_dist})
    return breakdown


def iter_encoder_inputs(dataset, size: tuple[int, int], batch_size: int = 8, limit: int | None = None):
    n = len(dataset) if limit is None else min(limit, len(dataset))
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        yield torch.stack([resize(dataset.image(i), size) for i in idx])


@torch.no_grad()
def compute_latent_stats(images: Iterable[torch.Tensor], encoder, fingerprint: str = "") -> LatentStats:
    """Per-channel mean and population std of ``encoder(x)`` over every pixel of every image.

    Accumulates sums and sums of squares in float64, so the result does not depend
    on dataset order beyond rounding.
    """
    acc = StatsAccumulator()
    for x in images:
        acc.update(encoder(x))
    return acc.finalize(fingerprint)


class EMA:
    """Shadow copy with ``ema = d * ema + (1 - d) * w`` after every update."""

    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        d = self.decay
        for k, v in model.state_dict().items():
            if v.is_floating_point():
                self.shadow[k].mul_(d).add_(v.detach(), alpha=1 - d)
            else:
                self.shadow[k].copy_(v)

    def state_dict(self) -> dict:
        return self.shadow

    def load_state_dict(self, state: dict) -> None:
        self.shadow = {k: v.clone() for k, v in state.items()}


def weights_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def stage2_step(
    images: torch.Tensor,
    prompts: list[str],
    autoencoder: NIFAutoencoder,
    denoiser: Denoiser,
    stats: LatentStats,
    teacher,
    text_encoder: StubTextEncoder,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    shift_cfg: TimestepShiftConfig,
    generator: torch.Generator,
    ema: EMA | None = None,
    cond: TextCondition | None = None,
) -> dict:
    """One flow-matching update with REPA alignment; the autoencoder stays frozen."""
    denoiser.train()
    with torch.no_grad():
        z_norm = normalize(autoencoder.encode(images), stats)
    b = images.shape[0]
    if cond is None:
        cond = text_encoder.encode_batch(prompts)
    drop = torch.rand(b, generator=generator) < cfg.cfg_drop
    cond = cond.with_dropped(drop)

    captured = {}
    block = denoiser.blocks[denoiser.cfg.repa_block_index]
    hook = block.register_forward_hook(lambda _m, _i, out: captured.__setitem__("features", out))
    try:
        l_fm = flow_matching_loss(denoiser, z_norm, cond, generator, shift_cfg)
    finally:
        hook.remove()
    if cfg.repa_weight > 0:
        p = denoiser.cfg.patch_size
        grid = (z_norm.shape[-2] // p, z_norm.shape[-1] // p)
        l_repa = repa_loss(captured["features"], teacher(images), denoiser.repa_head, grid)
        total = l_fm + cfg.repa_weight * l_repa
    else:
        l_repa = torch.zeros(())
        total = l_fm
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite Stage-2 loss: L_FM={float(l_fm)} L_REPA={float(l_repa)}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    leaked = [n for n, p in autoencoder.named_parameters() if p.grad is not None]
    if leaked:
        raise RuntimeError(f"gradient reached frozen Stage-1 weights: {leaked[:3]}")
    params = [p for group in optimizer.param_groups for p in group["params"]]
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    optimizer.step()
    if ema is not None:
        ema.update(denoiser)
    return {"L_FM": l_fm.item(), "L_REPA": l_repa.item(), "total": total.item(), "dropped": int(drop.sum())}


class MetricsLog:
    """JSON-lines metrics, one object per step. The resolved config rides on the first record."""

    def __init__(self, path, config: dict | None = None, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a" if append else "w")
        self._config = config
        self._t0 = time.perf_counter()

    def write(self, record: dict) -> None:
        record = dict(record)
        record["wall_time"] = time.perf_counter() - self._t0
        if self._config is not None:
            record["config"] = self._config
            self._config = None
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


@dataclass
class Stage1Trainer:
    """Owns the Stage-1 models, optimizer and RNG; resumable from its checkpoints."""

    model: NIFAutoencoder
    branch: ProjectionBranch
    teacher: nn.Module
    dataset: object
    cfg: TrainConfig
    distill: DistillConfig
    input_size: tuple[int, int]
    perceptual: object = None
    step: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)

    def __post_init__(self):
        self.generator.manual_seed(self.cfg.seed)
        self.optimizer = make_optimizer(list(self.model.parameters()) + list(self.branch.parameters()), self.cfg)

    def sample_batch(self) -> list[Stage1Batch]:
        idx = torch.randint(0, len(self.dataset), (self.cfg.batch_size,), generator=self.generator)
        h0, w0 = self.input_size
        scale = (self.cfg.scale_min, self.cfg.scale_max)
        return [make_stage1_batch(self.dataset.image(int(i)), h0, w0, self.generator, scale) for i in idx]

    def train_step(self) -> dict:
        out = stage1_step(
            self.sample_batch(), self.model, self.branch, self.teacher, self.optimizer,
            self.cfg, self.distill, self.perceptual, self.generator,
        )
        self.step += 1
        out["step"] = self.step
        out["lr"] = self.optimizer.param_groups[0]["lr"]
        return out

    def state_dict(self) -> dict:
        return {
            "train_state_version": TRAIN_STATE_VERSION,
            "step": self.step,
            "branch": self.branch.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "generator": self.generator.get_state(),
            "train_config": asdict(self.cfg),
        }

    def load_state_dict(self, state: dict) -> None:
        self.step = state["step"]
        self.branch.load_state_dict(state["branch"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["generator"])


@dataclass
class Stage2Trainer:
    autoencoder: NIFAutoencoder
    denoiser: Denoiser
    stats: LatentStats
    teacher: nn.Module
    text_encoder: StubTextEncoder
    dataset: object
    cfg: TrainConfig
    shift_cfg: TimestepShiftConfig
    input_size: tuple[int, int]
    step: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)

    def __post_init__(self):
        self.autoencoder.requires_grad_(False)
        self.autoencoder.eval()
        self.generator.manual_seed(self.cfg.seed)
        self.optimizer = make_optimizer(self.denoiser.parameters(), self.cfg)
        self.ema = EMA(self.denoiser, self.cfg.ema_decay)
        self._images = torch.stack([resize(self.dataset.image(i), self.input_size) for i in range(len(self.dataset))])
        self._prompts = [self.dataset.prompt(i) for i in range(len(self.dataset))]

    def train_step(self) -> dict:
        idx = torch.randint(0, len(self._prompts), (self.cfg.batch_size,), generator=self.generator)
        out = stage2_step(
            self._images[idx], [self._prompts[int(i)] for i in idx], self.autoencoder, self.denoiser,
            self.stats, self.teacher, self.text_encoder, self.optimizer, self.cfg, self.shift_cfg,
            self.generator, self.ema,
        )
        self.step += 1
        out["step"] = self.step
        out["lr"] = self.optimizer.param_groups[0]["lr"]
        return out

    def state_dict(self) -> dict:
        return {
            "train_state_version": TRAIN_STATE_VERSION,
            "step": self.step,
            "optimizer": self.optimizer.state_dict(),
            "generator": self.generator.get_state(),
            "train_config": asdict(self.cfg),
        }

    def load_state_dict(self, state: dict) -> None:
        self.step = state["step"]
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["generator"])


@torch.no_grad()
def evaluate_reconstruction(model: NIFAutoencoder, dataset, size: tuple[int, int]) -> float:
    """Mean L1 of encode-then-render at the encoder resolution over the whole dataset."""
    model.eval()
    grid = make_coord_grid(*size)
    total = 0.0
    for x in iter_encoder_inputs(dataset, size):
        pred = model.render(model.encode(x), grid)
        total += float((pred - x).abs().mean(dim=(1, 2, 3)).sum())
    return total / len(dataset)
