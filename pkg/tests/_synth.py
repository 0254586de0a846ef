"""Synthetic bimodal text-instance builders shared across test modules."""

import numpy as np

from maskalign.numerics import new_rng

FG_MEAN, BG_MEAN, NOISE = 30, 220, 5


def noisy(rng, shape, mean):
    return rng.integers(mean - NOISE, mean + NOISE + 1, size=shape).astype(np.uint8)


def render_instance(stencil: np.ndarray, rng, invert: bool = False) -> np.ndarray:
    """Paint a {0,1} stencil as dark-on-light (or light-on-dark) intensities."""
    fg, bg = (BG_MEAN, FG_MEAN) if invert else (FG_MEAN, BG_MEAN)
    img = noisy(rng, stencil.shape, bg)
    img[stencil == 1] = noisy(rng, (int(stencil.sum()),), fg)
    return img


def bar_stencil(h: int, w: int, bars: int = 2) -> np.ndarray:
    """Centered horizontal strokes with clear margins, text-like layout."""
    s = np.zeros((h, w), dtype=np.uint8)
    gap = max(h // (bars + 1), 3)
    for b in range(bars):
        y = gap * (b + 1) - 1
        s[y : y + 2, 3 : w - 3] = 1
    return s


def corner_stencil(h: int, w: int) -> np.ndarray:
    """A blob tucked in the top-left corner (with margin); the center-distance
    heuristic picks the background here, so the border-ring calibration must
    flip the mask."""
    s = np.zeros((h, w), dtype=np.uint8)
    s[1 : max(h // 4, 3), 1 : max(w // 4, 4)] = 1
    return s


def f1_score(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def instance_batch(count: int, seed: int, invert: bool = False):
    """Seed-fixed batch of (image, stencil) pairs mixing bar and corner layouts."""
    rng = new_rng(seed)
    out = []
    for i in range(count):
        h = int(rng.integers(12, 28))
        w = int(rng.integers(16, 48))
        if i % 4 == 3:
            stencil = corner_stencil(h, w)
        else:
            stencil = bar_stencil(h, w, bars=int(rng.integers(1, 4)))
        out.append((render_instance(stencil, rng, invert=invert), stencil))
    return out
