"""Toy visual front end.

Dynamic aspect-ratio slicing into fixed-size tiles, a linear patch
embedding standing in for a visual backbone, and a local-window pixel
shuffle that trades token count for embedding width without letting
tokens cross window boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nm
from .numerics import ShapeMismatch, Tensor

PATCH_W = "vision.patch_w"
PATCH_B = "vision.patch_b"
CONN_W = "vision.conn_w"
CONN_B = "vision.conn_b"


class IndivisibleTile(ValueError):
    """Tile side is not a multiple of the patch size."""


@dataclass(frozen=True)
class VisionConfig:
    tile_side: int = 64
    max_tiles: int = 6
    patch: int = 8
    window: int = 4
    ratio: int = 2
    d: int = 32

    @property
    def grid_side(self) -> int:
        return self.tile_side // self.patch

    @property
    def shuffled_side(self) -> int:
        return self.grid_side // self.ratio

    @property
    def shuffled_dim(self) -> int:
        return self.d * self.ratio * self.ratio

    @property
    def tokens_per_tile(self) -> int:
        return self.shuffled_side * self.shuffled_side


@dataclass
class TokenGrid:
    """Tokens laid out on a g_h x g_w grid mirroring source-patch adjacency."""

    tokens: Tensor | np.ndarray  # (g_h, g_w, d)

    @property
    def g_h(self) -> int:
        return self.tokens.shape[0]

    @property
    def g_w(self) -> int:
        return self.tokens.shape[1]

    @property
    def d(self) -> int:
        return self.tokens.shape[2]

    @property
    def n(self) -> int:
        return self.g_h * self.g_w

    def flat(self):
        """Row-major (n, d) view of the grid."""
        return nm.reshape(self.tokens, (self.n, self.d))


# ---------------------------------------------------------------------------
# slicing
# ---------------------------------------------------------------------------


def choose_grid(height: int, width: int, max_tiles: int) -> tuple[int, int]:
    """Pick the rows x cols grid (rows*cols <= max_tiles) whose aspect ratio
    is nearest the image's in log space; ties prefer fewer tiles."""
    target = math.log(width / height)
    best: tuple[float, int, int, int] | None = None
    for r in range(1, max_tiles + 1):
        for c in range(1, max_tiles // r + 1):
            dist = abs(math.log(c / r) - target)
            key = (dist, r * c, r, c)
            if best is None or key < best:
                best = key
    assert best is not None
    return best[2], best[3]


def nearest_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize with pixel-center index mapping."""
    src_h, src_w = image.shape
    ri = np.minimum((np.arange(out_h) + 0.5) * src_h / out_h, src_h - 1).astype(np.intp)
    ci = np.minimum((np.arange(out_w) + 0.5) * src_w / out_w, src_w - 1).astype(np.intp)
    return image[np.ix_(ri, ci)]


def slice_image(
    image: np.ndarray, max_tiles: int, tile_side: int
) -> tuple[list[np.ndarray], tuple[int, int]]:
    """Resize to the chosen grid and emit non-overlapping tiles, row-major."""
    if max_tiles < 1:
        raise ValueError("max_tiles must be >= 1")
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("slice_image expects a grayscale HxW image")
    rows, cols = choose_grid(img.shape[0], img.shape[1], max_tiles)
    canvas = nearest_resize(img, rows * tile_side, cols * tile_side)
    tiles = [
        canvas[r * tile_side : (r + 1) * tile_side, c * tile_side : (c + 1) * tile_side].copy()
        for r in range(rows)
        for c in range(cols)
    ]
    return tiles, (rows, cols)


# ---------------------------------------------------------------------------
# patch embedding and pixel shuffle
# ---------------------------------------------------------------------------


def flatten_patches(tile: np.ndarray, patch: int) -> np.ndarray:
    """(side, side) image -> (g*g, patch*patch) rows of [0,1]-scaled patches."""
    side = tile.shape[0]
    if tile.shape != (side, side) or side % patch != 0:
        raise IndivisibleTile(f"tile {tile.shape} not divisible by patch {patch}")
    g = side // patch
    scaled = np.asarray(tile, dtype=np.float64) / 255.0
    blocks = scaled.reshape(g, patch, g, patch).transpose(0, 2, 1, 3)
    return blocks.reshape(g * g, patch * patch)


def patch_embed(tile: np.ndarray, patch: int, params: Mapping) -> TokenGrid:
    """Linear projection of [0,1]-scaled flattened patches: token = W @ patch + b."""
    flat = flatten_patches(tile, patch)
    g = tile.shape[0] // patch
    tokens = nm.add(nm.matmul(flat, params[PATCH_W]), params[PATCH_B])
    d = params[PATCH_B].shape[-1]
    return TokenGrid(tokens=nm.reshape(tokens, (g, g, d)))


def _check_shuffle_dims(grid: TokenGrid, window: int, ratio: int) -> None:
    if window % ratio != 0:
        raise ShapeMismatch(f"window {window} not divisible by ratio {ratio}")
    if grid.g_h % window != 0 or grid.g_w % window != 0:
        raise ShapeMismatch(
            f"grid {grid.g_h}x{grid.g_w} not divisible by window {window}"
        )


def local_pixel_shuffle(grid: TokenGrid, window: int, ratio: int) -> TokenGrid:
    """Merge each ratio x ratio sub-block of tokens into one token by
    concatenating along the embedding axis (row-major inside the block).

    Windows partition the grid and sub-blocks never straddle them (window
    is a multiple of ratio), so every output token draws from exactly one
    window. Token count shrinks by ratio**2; width grows by ratio**2.
    """
    _check_shuffle_dims(grid, window, ratio)
    if ratio == 1:
        return grid
    gh, gw, d = grid.g_h, grid.g_w, grid.d
    r = ratio
    t = nm.reshape(grid.tokens, (gh // r, r, gw // r, r, d))
    t = nm.transpose(t, (0, 2, 1, 3, 4))
    return TokenGrid(tokens=nm.reshape(t, (gh // r, gw // r, r * r * d)))


def local_pixel_unshuffle(grid: TokenGrid, window: int, ratio: int) -> TokenGrid:
    """Exact inverse of :func:`local_pixel_shuffle`."""
    if ratio == 1:
        return grid
    gh, gw, dd = grid.g_h, grid.g_w, grid.d
    r = ratio
    if dd % (r * r) != 0:
        raise ShapeMismatch(f"embedding dim {dd} not divisible by ratio^2")
    d = dd // (r * r)
    t = nm.reshape(grid.tokens, (gh, gw, r, r, d))
    t = nm.transpose(t, (0, 2, 1, 3, 4))
    out = TokenGrid(tokens=nm.reshape(t, (gh * r, gw * r, d)))
    _check_shuffle_dims(out, window, ratio)
    return out


def project_tokens(grid: TokenGrid, params: Mapping):
    """Modality connector: one linear map from shuffled width to LLM width."""
    return nm.add(nm.matmul(grid.flat(), params[CONN_W]), params[CONN_B])


# ---------------------------------------------------------------------------
# parameters and the full front end
# ---------------------------------------------------------------------------


def init_vision_params(cfg: VisionConfig, d_llm: int, rng: np.random.Generator) -> dict[str, Tensor]:
    p2 = cfg.patch * cfg.patch
    return {
        PATCH_W: Tensor(rng.normal(0.0, 1.0 / math.sqrt(p2), size=(p2, cfg.d))),
        PATCH_B: Tensor(np.zeros(cfg.d)),
        CONN_W: Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(cfg.shuffled_dim), size=(cfg.shuffled_dim, d_llm))
        ),
        CONN_B: Tensor(np.zeros(d_llm)),
    }


@dataclass
class VisionOutput:
    tokens: Tensor | np.ndarray  # (tiles * tokens_per_tile, d_llm)
    tiles: list[np.ndarray]
    layout: tuple[int, int]  # tile grid over the canvas
    token_side: int  # per-tile token grid side after shuffle

    @property
    def tokens_per_tile(self) -> int:
        return self.token_side * self.token_side

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)


def vision_forward(image: np.ndarray, params: Mapping, cfg: VisionConfig) -> VisionOutput:
    """slice -> patch embed -> local shuffle -> connector, tiles row-major."""
    tiles, layout = slice_image(image, cfg.max_tiles, cfg.tile_side)
    per_tile = [
        project_tokens(
            local_pixel_shuffle(patch_embed(t, cfg.patch, params), cfg.window, cfg.ratio),
            params,
        )
        for t in tiles
    ]
    tokens = per_tile[0] if len(per_tile) == 1 else nm.concat(per_tile, axis=0)
    return VisionOutput(tokens=tokens, tiles=tiles, layout=layout, token_side=cfg.shuffled_side)
