"""Command-line entry point: train-stage1, compute-stats, train-stage2, generate,
reconstruct and bench-scaling.

Exit codes: 0 success, 1 usage or configuration error (including missing input
files), 2 failure while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import torch

from .autoencoder import NIFAutoencoder, load_autoencoder, make_perceptual, save_autoencoder
from .config import OUTPUT_DIR_ENV, ConfigError, RunConfig, load_config
from .data import ImageFolder, SyntheticShapes, load_image, save_image
from .denoiser import Denoiser, load_denoiser, make_text_encoder, save_denoiser
from .flowmatch import LatentStats, denormalize, euler_sample
from .geometry import make_coord_grid
from .guidance import ProjectionBranch, TeacherUnavailableError, make_teacher
from .training import (
    MetricsLog,
    Stage1Trainer,
    Stage2Trainer,
    compute_latent_stats,
    iter_encoder_inputs,
    weights_checksum,
)

log = logging.getLogger("nifdiff")

STAGE1_CKPT = "stage1.pt"
STAGE2_CKPT = "stage2.pt"
STATS_FILE = "latent_stats.json"


class UsageError(Exception):
    """Bad invocation or missing inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nifdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--output-dir", type=Path, help=f"artifact directory (default: ${OUTPUT_DIR_ENV} or ./runs)")
        p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("train-stage1", help="train encoder + renderer with semantic distillation"))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")

    p = common(sub.add_parser("compute-stats", help="per-channel latent statistics of the frozen encoder"))
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--subsample", type=int, help="use only the first N images")

    p = common(sub.add_parser("train-stage2", help="train the flow-matching denoiser on frozen latents"))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", action="store_true")

    p = common(sub.add_parser("generate", help="sample one latent and render it at one or more sizes"))
    p.add_argument("--prompt")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--size", dest="sizes", type=_parse_size, action="append", help="extra HxW render (repeatable)")
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--out", type=Path, help="output PNG (for several sizes, _HxW is appended)")

    p = common(sub.add_parser("reconstruct", help="encode an image and render it at scale x resolution"))
    p.add_argument("image", type=Path)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--reference", type=Path, help="ground truth at the target size; reports L1")
    p.add_argument("--out", type=Path)

    p = common(sub.add_parser("bench-scaling", help="time denoising and rendering across output sizes"))
    p.add_argument("--size", dest="sizes", type=_parse_size, action="append")
    p.add_argument("--repeats", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--json", dest="json_out", type=Path, help="where to write the JSON table")
    return parser


def _override(args, cfg: RunConfig, pairs: dict) -> None:
    for flag, (section, key) in pairs.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cfg, section), key, value)


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if args.output_dir is not None:
        cfg.output_dir = str(args.output_dir)
    cfg.output_dir = str(cfg.resolved_output_dir())
    cmd = args.command
    if cmd in ("train-stage1", "train-stage2"):
        section = "stage1" if cmd == "train-stage1" else "stage2"
        _override(args, cfg, {"steps": (section, "steps"), "batch_size": (section, "batch_size"),
                              "lr": (section, "lr"), "seed": (section, "seed")})
        # re-run validation on the overridden section
        stage = getattr(cfg, section)
        try:
            type(stage)(**vars(stage))
        except ValueError as e:
            raise ConfigError(f"{section}: {e}") from e
    elif cmd == "generate":
        _override(args, cfg, {"prompt": ("generate", "prompt"), "height": ("generate", "height"),
                              "width": ("generate", "width"), "steps": ("generate", "steps"),
                              "cfg_scale": ("generate", "cfg_scale"), "seed": ("generate", "seed")})
    elif cmd == "bench-scaling":
        _override(args, cfg, {"repeats": ("bench", "repeats"), "steps": ("bench", "steps"), "seed": ("bench", "seed")})
        if args.sizes:
            cfg.bench.sizes = [list(s) for s in args.sizes]
    elif cmd == "compute-stats" and args.subsample is not None:
        cfg.data.stats_subsample = args.subsample
    return cfg


def make_dataset(cfg: RunConfig):
    d = cfg.data
    if d.dataset == "synthetic":
        return SyntheticShapes(d.num_images, d.resolution, d.seed, d.max_shapes)
    if not Path(d.dataset).is_dir():
        raise UsageError(f"dataset directory {d.dataset} does not exist")
    return ImageFolder(d.dataset)


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e}") from e
    return out


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"missing {what}: {path}")
    return path


def _size(cfg: RunConfig) -> tuple[int, int]:
    return cfg.data.input_size, cfg.data.input_size


def _stats(cfg, dataset, encoder) -> LatentStats:
    limit = cfg.data.stats_subsample or None
    images = iter_encoder_inputs(dataset, _size(cfg), limit=limit)
    fp = dataset.fingerprint() if hasattr(dataset, "fingerprint") else ""
    return compute_latent_stats(images, encoder.eval(), fingerprint=fp)


def _log_progress(rec: dict, total: int) -> None:
    step = rec["step"]
    if step == 1 or step == total or step % max(1, total // 10) == 0:
        keys = [k for k in ("L_rec", "L_mcos", "L_mdms", "w_adapt", "L_FM", "L_REPA", "total") if k in rec]
        log.info("step %d/%d %s", step, total, " ".join(f"{k}={rec[k]:.5f}" for k in keys))


def cmd_train_stage1(cfg: RunConfig, args) -> dict:
    out = _output_dir(cfg)
    ckpt_path = out / STAGE1_CKPT
    dataset = make_dataset(cfg)
    torch.manual_seed(cfg.stage1.seed)
    teacher = make_teacher(cfg.teacher)
    if args.resume:
        model, payload = load_autoencoder(_require(ckpt_path, "Stage-1 checkpoint to resume"))
    else:
        model, payload = NIFAutoencoder(cfg.encoder, cfg.renderer), None
    branch = ProjectionBranch(model.encoder.cfg.latent_channels, cfg.teacher.feature_dim, teacher.grid)
    trainer = Stage1Trainer(
        model, branch, teacher, dataset, cfg.stage1, cfg.distill, _size(cfg),
        make_perceptual(cfg.stage1.perceptual) if cfg.stage1.omega > 0 else None,
    )
    if payload is not None:
        trainer.load_state_dict(payload["trainer"])
        log.info("resumed Stage-1 at step %d", trainer.step)

    def save():
        save_autoencoder(model, ckpt_path, {"trainer": trainer.state_dict(), "run_config": cfg.to_dict()})

    metrics = MetricsLog(out / "stage1_metrics.jsonl", cfg.to_dict(), append=args.resume)
    try:
        while trainer.step < cfg.stage1.steps:
            rec = trainer.train_step()
            metrics.write(rec)
            _log_progress(rec, cfg.stage1.steps)
            if cfg.stage1.checkpoint_every and trainer.step % cfg.stage1.checkpoint_every == 0:
                save()
    finally:
        metrics.close()
    save()
    stats = _stats(cfg, dataset, model.encoder)
    stats.save(out / STATS_FILE)
    return {"checkpoint": str(ckpt_path), "stats": str(out / STATS_FILE), "steps": trainer.step,
            "stage1_checksum": weights_checksum(model)}


def cmd_compute_stats(cfg: RunConfig, args) -> dict:
    out = _output_dir(cfg)
    model, _ = load_autoencoder(_require(args.checkpoint or out / STAGE1_CKPT, "Stage-1 checkpoint"))
    stats = _stats(cfg, make_dataset(cfg), model.encoder)
    stats.save(out / STATS_FILE)
    return {"stats": str(out / STATS_FILE), "mu": stats.mu.tolist(), "sigma": stats.sigma.tolist()}


def cmd_train_stage2(cfg: RunConfig, args) -> dict:
    out = _output_dir(cfg)
    autoencoder, _ = load_autoencoder(_require(out / STAGE1_CKPT, "Stage-1 checkpoint"))
    stats = LatentStats.load(_require(out / STATS_FILE, "latent statistics"))
    ckpt_path = out / STAGE2_CKPT
    dataset = make_dataset(cfg)
    torch.manual_seed(cfg.stage2.seed)
    if args.resume:
        denoiser, payload = load_denoiser(_require(ckpt_path, "Stage-2 checkpoint to resume"), use_ema=False)
    else:
        denoiser, payload = Denoiser(cfg.denoiser), None
    dc = denoiser.cfg
    text_encoder = make_text_encoder(cfg.text.backend, dc.text_len, dc.text_dim, cfg.text.seed)
    trainer = Stage2Trainer(
        autoencoder, denoiser, stats, make_teacher(cfg.teacher), text_encoder, dataset,
        cfg.stage2, cfg.shift, _size(cfg),
    )
    if payload is not None:
        trainer.load_state_dict(payload["trainer"])
        trainer.ema.load_state_dict(payload["ema_state_dict"])
        log.info("resumed Stage-2 at step %d", trainer.step)
    before = weights_checksum(autoencoder)

    def save():
        extra = {"ema_state_dict": trainer.ema.state_dict(), "trainer": trainer.state_dict(),
                 "run_config": cfg.to_dict(), "stage1_checksum": before}
        save_denoiser(denoiser, ckpt_path, extra, text_backend=cfg.text.backend)

    metrics = MetricsLog(out / "stage2_metrics.jsonl", cfg.to_dict(), append=args.resume)
    try:
        while trainer.step < cfg.stage2.steps:
            rec = trainer.train_step()
            metrics.write(rec)
            _log_progress(rec, cfg.stage2.steps)
            if cfg.stage2.checkpoint_every and trainer.step % cfg.stage2.checkpoint_every == 0:
                save()
    finally:
        metrics.close()
    after = weights_checksum(autoencoder)
    if after != before:
        raise RuntimeError("Stage-1 weights changed during Stage-2 training")
    save()
    return {"checkpoint": str(ckpt_path), "steps": trainer.step, "stage1_checksum": after}


def latent_checksum(latent: torch.Tensor) -> str:
    return hashlib.sha256(latent.detach().float().contiguous().numpy().tobytes()).hexdigest()


class Generator:
    """Loaded Stage-1 + Stage-2 artifacts; the denoise and render phases are separate calls."""

    def __init__(self, cfg: RunConfig):
        out = Path(cfg.output_dir)
        self.autoencoder, _ = load_autoencoder(_require(out / STAGE1_CKPT, "Stage-1 checkpoint"))
        self.denoiser, payload = load_denoiser(_require(out / STAGE2_CKPT, "Stage-2 checkpoint"))
        self.stats = LatentStats.load(_require(out / STATS_FILE, "latent statistics"))
        self.autoencoder.eval()
        self.denoiser.eval()
        dc = self.denoiser.cfg
        self.text_encoder = make_text_encoder(payload.get("text_backend", "stub"), dc.text_len, dc.text_dim, cfg.text.seed)
        self.latent_size = _size(cfg)
        self.shift = cfg.shift

    @property
    def denoise_tokens(self) -> int:
        return self.denoiser.num_tokens(*self.latent_size)

    def denoise(self, prompt: str, seed: int, steps: int, cfg_scale: float) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed)
        shape = (1, self.denoiser.cfg.latent_channels, *self.latent_size)
        z = euler_sample(
            self.denoiser, shape, self.text_encoder.encode(prompt), steps=steps, cfg_scale=cfg_scale,
            shift_cfg=self.shift, generator=gen, null_cond=self.text_encoder.null(1),
        )
        return denormalize(z, self.stats)

    @torch.no_grad()
    def render(self, latent: torch.Tensor, height: int, width: int) -> torch.Tensor:
        return self.autoencoder.render(latent, make_coord_grid(height, width))[0]


def _check_size(h: int, w: int) -> None:
    if h < 1 or w < 1:
        raise UsageError(f"invalid output size {h}x{w}")


def cmd_generate(cfg: RunConfig, args) -> dict:
    g = cfg.generate
    sizes = [(g.height, g.width)] + list(args.sizes or [])
    for h, w in sizes:
        _check_size(h, w)
    out = _output_dir(cfg)
    gen = Generator(cfg)
    latent = gen.denoise(g.prompt, g.seed, g.steps, g.cfg_scale)
    base = args.out or out / f"generate_seed{g.seed}.png"
    renders = []
    for h, w in sizes:
        path = base if len(sizes) == 1 else base.with_name(f"{base.stem}_{h}x{w}{base.suffix}")
        save_image(gen.render(latent, h, w), path)
        renders.append({"height": h, "width": w, "render_tokens": h * w, "path": str(path)})
    return {"prompt": g.prompt, "seed": g.seed, "latent_sha256": latent_checksum(latent),
            "denoise_tokens": gen.denoise_tokens, "renders": renders}


def cmd_reconstruct(cfg: RunConfig, args) -> dict:
    if args.scale <= 0:
        raise UsageError(f"scale must be positive, got {args.scale}")
    out = _output_dir(cfg)
    model, _ = load_autoencoder(_require(out / STAGE1_CKPT, "Stage-1 checkpoint"))
    model.eval()
    image = load_image(_require(args.image, "input image"))
    h, w = image.shape[-2:]
    th, tw = round(args.scale * h), round(args.scale * w)
    _check_size(th, tw)
    with torch.no_grad():
        pred = model.render(model.encode(image.unsqueeze(0)), make_coord_grid(th, tw))[0]
    path = args.out or out / f"{args.image.stem}_x{args.scale:g}.png"
    save_image(pred, path)
    report = {"input": str(args.image), "scale": args.scale, "height": th, "width": tw, "path": str(path)}
    if args.reference is not None:
        ref = load_image(_require(args.reference, "reference image"))
        if tuple(ref.shape[-2:]) != (th, tw):
            raise UsageError(f"reference is {tuple(ref.shape[-2:])}, output is {(th, tw)}")
        report["l1"] = float((pred.clamp(0, 1) - ref).abs().mean())
    return report


def _median_time(fn, repeats: int, warmup: int):
    result = None
    for _ in range(warmup):
        result = fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), result


def format_bench_table(rows: list[dict]) -> str:
    head = f"{'size':>11} {'denoise_tokens':>15} {'render_tokens':>14} {'denoise_s':>10} {'render_s':>10}"
    lines = [head]
    for r in rows:
        size = f"{r['height']}x{r['width']}"
        lines.append(f"{size:>11} {r['denoise_tokens']:>15} {r['render_tokens']:>14} "
                     f"{r['denoise_seconds']:>10.4f} {r['render_seconds']:>10.4f}")
    return "\n".join(lines)


def cmd_bench_scaling(cfg: RunConfig, args) -> dict:
    b = cfg.bench
    if b.repeats < 1 or b.warmup < 0:
        raise UsageError("bench.repeats must be >= 1 and bench.warmup >= 0")
    sizes = [tuple(int(v) for v in s) for s in b.sizes]
    for h, w in sizes:
        _check_size(h, w)
    out = _output_dir(cfg)
    gen = Generator(cfg)
    rows = []
    for h, w in sizes:
        t_denoise, latent = _median_time(lambda: gen.denoise(b.prompt, b.seed, b.steps, b.cfg_scale), b.repeats, b.warmup)
        t_render, _ = _median_time(lambda: gen.render(latent, h, w), b.repeats, b.warmup)
        rows.append({"height": h, "width": w, "denoise_tokens": gen.denoise_tokens, "render_tokens": h * w,
                     "denoise_seconds": t_denoise, "render_seconds": t_render,
                     "latent_sha256": latent_checksum(latent)})
    table = format_bench_table(rows)
    print(table)
    json_path = args.json_out or out / "bench_scaling.json"
    payload = {"format_version": 1, "repeats": b.repeats, "warmup": b.warmup, "rows": rows}
    json_path.write_text(json.dumps(payload, indent=2))
    return {"json": str(json_path), "rows": rows}


COMMANDS = {
    "train-stage1": cmd_train_stage1,
    "compute-stats": cmd_compute_stats,
    "train-stage2": cmd_train_stage2,
    "generate": cmd_generate,
    "reconstruct": cmd_reconstruct,
    "bench-scaling": cmd_bench_scaling,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"nifdiff: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        report = COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, TeacherUnavailableError) as e:
        print(f"nifdiff: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"nifdiff: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    if args.command != "bench-scaling":
        print(json.dumps(report, indent=2))
    else:
        print(json.dumps({"json": report["json"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
