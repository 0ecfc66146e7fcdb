"""Continuous coordinate system shared by the renderer, trainer and sampler.

Coordinates live in ``[-1, 1]^2`` and are stored row-major with axis order
``(vertical, horizontal)`` everywhere in this package.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch


@dataclass(frozen=True)
class CoordGrid:
    """Pixel-center coordinates and cell extents of an ``height x width`` render request."""

    coords: torch.Tensor  # (H', W', 2)
    cells: torch.Tensor  # (H', W', 2)
    height: int
    width: int


@dataclass(frozen=True)
class QueryGeometry:
    nearest_index: torch.Tensor  # (H', W', 2) long
    delta_q: torch.Tensor  # (H', W', 2)
    delta_c: torch.Tensor  # (H', W', 2)


def _axis_centers(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    return (2 * i + 1) / n - 1


def make_coord_grid(height: int, width: int, dtype: torch.dtype = torch.float32) -> CoordGrid:
    """Build the pixel-center grid ``q = ((2i+1)/H' - 1, (2j+1)/W' - 1)``, cells ``(2/H', 2/W')``."""
    if int(height) != height or int(width) != width or height < 1 or width < 1:
        raise ValueError(f"grid dimensions must be positive integers, got ({height}, {width})")
    height, width = int(height), int(width)
    # numpy here: the arrays are tiny and torch per-op overhead dominates
    coords = np.empty((height, width, 2))
    coords[..., 0] = _axis_centers(height)[:, None]
    coords[..., 1] = _axis_centers(width)[None, :]
    cells = np.empty((height, width, 2))
    cells[..., 0] = 2.0 / height
    cells[..., 1] = 2.0 / width
    coords = torch.from_numpy(coords).to(dtype)
    cells = torch.from_numpy(cells).to(dtype)
    return CoordGrid(coords=coords, cells=cells, height=height, width=width)


def _nearest_axis(q: torch.Tensor, n: int) -> torch.Tensor:
    # cell k covers ((2k)/n - 1, (2k+2)/n - 1]; ceil(...) - 1 sends exact boundaries to the lower cell
    pos = (q.to(torch.float64) + 1.0) * n / 2.0
    # snap positions a few ulps off a boundary so exact ties stay ties after rounding error
    near = pos.round()
    pos = torch.where((pos - near).abs() < 1e-9, near, pos)
    return (torch.ceil(pos) - 1).clamp(0, n - 1).long()


def query_geometry(grid: CoordGrid, latent_height: int, latent_width: int) -> QueryGeometry:
    """Locate each query's nearest latent center and express offsets and cell sizes.

    ``delta_c`` is the cell extent in latent-grid units, ``(c_h * H, c_w * W)``, so
    rendering at the latent resolution gives ``(2, 2)``.
    """
    if latent_height < 1 or latent_width < 1:
        raise ValueError(f"latent dimensions must be >= 1, got ({latent_height}, {latent_width})")
    q = grid.coords
    if q.abs().max() > 1.0:
        raise ValueError("query coordinates outside [-1, 1] are not supported")
    iy = _nearest_axis(q[..., 0], latent_height)
    ix = _nearest_axis(q[..., 1], latent_width)
    cy = (2 * iy.to(torch.float64) + 1) / latent_height - 1
    cx = (2 * ix.to(torch.float64) + 1) / latent_width - 1
    centers = torch.stack([cy, cx], dim=-1)
    delta_q = (q.to(torch.float64) - centers).to(q.dtype)
    scale = torch.tensor([latent_height, latent_width], dtype=grid.cells.dtype)
    return QueryGeometry(
        nearest_index=torch.stack([iy, ix], dim=-1),
        delta_q=delta_q,
        delta_c=grid.cells * scale,
    )


@dataclass(frozen=True)
class WindowLayout:
    """Bookkeeping needed to undo :func:`partition_windows`."""

    height: int
    width: int
    padded_height: int
    padded_width: int
    window: int
    shift: int

    @property
    def windows_per_col(self) -> int:
        return self.padded_height // self.window

    @property
    def windows_per_row(self) -> int:
        return self.padded_width // self.window


def _region_labels(layout: WindowLayout) -> torch.Tensor:
    """Integer label per token of the shifted, padded grid; attention is allowed iff labels match.

    Real tokens are labelled by which side of the cyclic-wrap seam they sit on, per
    axis; the mask is built per window, so labels only need to be unique within one.
    Padding tokens get a unique label each and therefore only see themselves.
    """
    hp, wp, s = layout.padded_height, layout.padded_width, layout.shift
    r = torch.arange(hp)
    c = torch.arange(wp)
    # after rolling by -s, rows [hp - s, hp) hold tokens that wrapped from the top
    ry = (r >= hp - s).long() if s > 0 else torch.zeros(hp, dtype=torch.long)
    rx = (c >= wp - s).long() if s > 0 else torch.zeros(wp, dtype=torch.long)
    label = (ry[:, None] * 2 + rx[None, :])
    # original (unshifted) position of each token currently at (r, c)
    orig_r = (r + s) % hp
    orig_c = (c + s) % wp
    pad = (orig_r[:, None] >= layout.height) | (orig_c[None, :] >= layout.width)
    unique = torch.arange(hp * wp).view(hp, wp) + 4
    return torch.where(pad, -unique, label)


def _to_windows(x: torch.Tensor, window: int) -> torch.Tensor:
    b, h, w, d = x.shape
    x = x.view(b, h // window, window, w // window, window, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // window) * (w // window), window * window, d)


def _from_windows(x: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    b, _, _, d = x.shape
    x = x.view(b, h // window, w // window, window, window, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, d)


@lru_cache(maxsize=64)
def window_mask(layout: WindowLayout, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Additive attention mask ``(num_windows, W*W, W*W)``: 0 where allowed, ``-inf`` where blocked.

    Cached per layout; callers must not modify the returned tensor in place.
    """
    labels = _region_labels(layout)[None, :, :, None].to(torch.float64)
    win = _to_windows(labels, layout.window)[..., 0][0]  # (nW, W*W)
    same = win[:, :, None] == win[:, None, :]
    mask = torch.zeros(same.shape, dtype=dtype)
    return mask.masked_fill(~same, float("-inf"))


def partition_windows(
    tokens: torch.Tensor, window: int, shift: int = 0
) -> tuple[torch.Tensor, torch.Tensor, WindowLayout]:
    """Split a ``(B, H, W, D)`` (or ``(H, W, D)``) token grid into ``window x window`` blocks.

    The grid is zero-padded on the bottom/right to a multiple of ``window`` and, for
    ``shift > 0``, cyclically rolled by ``(-shift, -shift)`` first. Returns
    ``(windows (B, nW, W*W, D), mask (nW, W*W, W*W), layout)``.
    """
    squeeze = tokens.dim() == 3
    if squeeze:
        tokens = tokens.unsqueeze(0)
    if tokens.dim() != 4:
        raise ValueError(f"expected (B, H, W, D) tokens, got shape {tuple(tokens.shape)}")
    if window < 1:
        raise ValueError(f"window must be positive, got {window}")
    if shift < 0 or shift >= window:
        raise ValueError(f"shift must lie in [0, window), got {shift} for window {window}")
    _, h, w, _ = tokens.shape
    hp = -(-h // window) * window
    wp = -(-w // window) * window
    layout = WindowLayout(h, w, hp, wp, window, shift)
    if hp != h or wp != w:
        tokens = torch.nn.functional.pad(tokens, (0, 0, 0, wp - w, 0, hp - h))
    if shift:
        tokens = torch.roll(tokens, shifts=(-shift, -shift), dims=(1, 2))
    windows = _to_windows(tokens, window)
    mask = window_mask(layout, dtype=tokens.dtype)
    if squeeze:
        windows = windows[0]
    return windows, mask, layout


def reverse_windows(windows: torch.Tensor, layout: WindowLayout) -> torch.Tensor:
    """Inverse of :func:`partition_windows`; undoes the roll and crops the padding."""
    squeeze = windows.dim() == 3
    if squeeze:
        windows = windows.unsqueeze(0)
    x = _from_windows(windows, layout.window, layout.padded_height, layout.padded_width)
    if layout.shift:
        x = torch.roll(x, shifts=(layout.shift, layout.shift), dims=(1, 2))
    x = x[:, : layout.height, : layout.width]
    return x[0] if squeeze else x
