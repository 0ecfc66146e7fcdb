"""Datasets and image I/O.

The synthetic dataset draws procedural shapes analytically, so the same item can be
rasterized at any resolution (and is supersampled for antialiasing).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.2, 0.7, 0.25),
    "blue": (0.15, 0.3, 0.85),
    "yellow": (0.95, 0.85, 0.2),
    "purple": (0.55, 0.25, 0.7),
    "orange": (0.95, 0.55, 0.1),
    "white": (0.95, 0.95, 0.95),
    "black": (0.08, 0.08, 0.08),
}
SHAPES = ("circle", "square", "triangle")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    cy: float
    cx: float
    radius: float


@dataclass(frozen=True)
class SceneSpec:
    background: str
    shapes: tuple[Shape, ...]

    @property
    def prompt(self) -> str:
        parts = [f"a {s.color} {s.kind}" for s in self.shapes]
        return " and ".join(parts) + f" on a {self.background} background"


def _inside(shape: Shape, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    dy, dx = y - shape.cy, x - shape.cx
    if shape.kind == "circle":
        return dy**2 + dx**2 <= shape.radius**2
    if shape.kind == "square":
        return (np.abs(dy) <= shape.radius) & (np.abs(dx) <= shape.radius)
    # upward triangle inscribed in the bounding square
    top = -shape.radius
    rel = (dy - top) / (2 * shape.radius)
    return (dy <= shape.radius) & (dy >= top) & (np.abs(dx) <= rel * shape.radius)


def rasterize(scene: SceneSpec, height: int, width: int, supersample: int = 4) -> torch.Tensor:
    """Draw ``scene`` on ``[0, 1]^2`` at ``height x width``; returns ``(3, H, W)`` in ``[0, 1]``."""
    s = supersample
    ys = (np.arange(height * s) + 0.5) / (height * s)
    xs = (np.arange(width * s) + 0.5) / (width * s)
    y, x = np.meshgrid(ys, xs, indexing="ij")
    img = np.empty((height * s, width * s, 3))
    img[:] = COLORS[scene.background]
    for shape in scene.shapes:
        img[_inside(shape, y, x)] = COLORS[shape.color]
    img = img.reshape(height, s, width, s, 3).mean(axis=(1, 3))
    return torch.from_numpy(img).permute(2, 0, 1).float().contiguous()


class SyntheticShapes:
    """Deterministic procedural scenes with template prompts; item ``i`` depends only on ``(seed, i)``."""

    def __init__(self, num_images: int = 8, resolution: int = 64, seed: int = 0, max_shapes: int = 2):
        self.num_images = num_images
        self.resolution = resolution
        self.seed = seed
        self.max_shapes = max_shapes
        self.scenes = [self._scene(i) for i in range(num_images)]

    def _scene(self, index: int) -> SceneSpec:
        rng = np.random.default_rng([self.seed, index])
        names = list(COLORS)
        background = names[rng.integers(len(names))]
        shapes = []
        for _ in range(int(rng.integers(1, self.max_shapes + 1))):
            color = background
            while color == background:
                color = names[rng.integers(len(names))]
            shapes.append(
                Shape(
                    kind=SHAPES[rng.integers(len(SHAPES))],
                    color=color,
                    cy=float(rng.uniform(0.25, 0.75)),
                    cx=float(rng.uniform(0.25, 0.75)),
                    radius=float(rng.uniform(0.12, 0.25)),
                )
            )
        return SceneSpec(background, tuple(shapes))

    def __len__(self) -> int:
        return self.num_images

    def image(self, index: int, size: tuple[int, int] | None = None) -> torch.Tensor:
        h, w = size or (self.resolution, self.resolution)
        return rasterize(self.scenes[index], h, w)

    def prompt(self, index: int) -> str:
        return self.scenes[index].prompt

    def __getitem__(self, index: int) -> tuple[torch.Tensor, str]:
        return self.image(index), self.prompt(index)

    def fingerprint(self) -> str:
        desc = f"synthetic:{self.num_images}:{self.resolution}:{self.seed}:{self.max_shapes}"
        return hashlib.sha256(desc.encode()).hexdigest()[:16]


class ImageFolder:
    """Images in a directory; an optional ``<stem>.txt`` next to each image holds its prompt."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset directory {self.root} does not exist")
        self.files = sorted(p for p in self.root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not self.files:
            raise ValueError(f"no images found in {self.root}")

    def __len__(self) -> int:
        return len(self.files)

    def image(self, index: int, size: tuple[int, int] | None = None) -> torch.Tensor:
        img = load_image(self.files[index])
        if size is not None and tuple(img.shape[-2:]) != tuple(size):
            img = resize(img, size)
        return img

    def prompt(self, index: int) -> str:
        side = self.files[index].with_suffix(".txt")
        return side.read_text().strip() if side.is_file() else ""

    def __getitem__(self, index: int) -> tuple[torch.Tensor, str]:
        return self.image(index), self.prompt(index)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.files:
            h.update(p.name.encode())
            h.update(str(p.stat().st_size).encode())
        return h.hexdigest()[:16]


def resize(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Antialiased bilinear resize of a ``(3, H, W)`` or ``(B, 3, H, W)`` image."""
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    if tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=tuple(size), mode="bilinear", antialias=True, align_corners=False)
    return x[0] if squeeze else x


def load_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """Clamp to ``[0, 1]`` then quantize with ``round(255 v)``; returns ``(H, W, 3)`` uint8."""
    x = image.detach().double().clamp(0.0, 1.0)
    arr = torch.round(x * 255.0).to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def save_image(image: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
