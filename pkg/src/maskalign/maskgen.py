"""Clustering-based text-mask factory.

Turns an image plus detected text boxes into a full-resolution binary
text mask. Per box: crop the instance, split its intensities into two
clusters, pick the cluster whose pixels sit nearer the crop center as
foreground, sanity-check the choice against the border ring (flipping
0/1 if the ring looks like foreground), then reassemble every instance
mask onto the full canvas with union semantics.

All functions are pure and deterministic; the pipeline may run in
parallel across images and across boxes with identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_KMEANS_ITERS = 50

# ITU-R BT.601 luminance weights
_LUMA = np.array([0.299, 0.587, 0.114])


class MaskGenError(Exception):
    """Base class for mask-factory failures."""


class BoxOutOfBounds(MaskGenError):
    """A text box exceeds the image extent."""


class DegenerateBox(MaskGenError):
    """A text box has a side shorter than 2 pixels."""


class PlacementOutOfBounds(MaskGenError):
    """An instance mask does not fit on the canvas at its origin."""


@dataclass(frozen=True)
class TextBox:
    """Axis-aligned rectangle in pixel coordinates, inclusive-exclusive, origin top-left."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


@dataclass
class InstanceCrop:
    """Value copy of one boxed region; `origin` is its (x0, y0) in the parent image."""

    pixels: np.ndarray
    origin: tuple[int, int]


@dataclass
class InstanceMask:
    """Per-instance {0,1} grid aligned with its source crop."""

    values: np.ndarray
    origin: tuple[int, int]


@dataclass
class BinaryMask:
    """Full-canvas {0,1} grid; pixels outside every box are 0."""

    values: np.ndarray


@dataclass
class Kmeans2Result:
    labels: np.ndarray
    centers: tuple[float, float]
    degenerate: bool = False


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Collapse an optional 3-channel image to 8-bit luminance."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        return arr.astype(np.uint8, copy=False)
    if arr.ndim == 3 and arr.shape[2] == 3:
        return np.clip(np.rint(arr.astype(np.float64) @ _LUMA), 0, 255).astype(np.uint8)
    raise ValueError(f"expected HxW or HxWx3 image, got shape {arr.shape}")


def crop_instance(image: np.ndarray, box: TextBox) -> InstanceCrop:
    """Copy the boxed region out of `image`.

    Raises BoxOutOfBounds if the box leaves the image, DegenerateBox if
    either side is shorter than 2 pixels.
    """
    gray = to_grayscale(image)
    h, w = gray.shape
    if not (0 <= box.x0 and box.x1 <= w and 0 <= box.y0 and box.y1 <= h):
        raise BoxOutOfBounds(f"box {box} outside {h}x{w} image")
    if box.width < 2 or box.height < 2:
        raise DegenerateBox(f"box {box} has side < 2")
    pixels = gray[box.y0 : box.y1, box.x0 : box.x1].copy()
    return InstanceCrop(pixels=pixels, origin=(box.x0, box.y0))


def kmeans2(
    pixels, max_iter: int = DEFAULT_KMEANS_ITERS, seed: int = 0
) -> Kmeans2Result:
    """Two-cluster 1-D k-means over pixel intensities.

    Centers start at the min and max intensity, so the result is fully
    deterministic (`seed` is reserved for randomized initializers and is
    ignored by this one). Assignment ties go to cluster 0. A constant
    input yields a single-cluster result flagged `degenerate`; callers
    treat the whole instance as background.
    """
    del seed
    vals = np.asarray(pixels, dtype=np.float64).ravel()
    if vals.size < 2:
        raise ValueError("kmeans2 needs at least 2 pixels")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    lo, hi = float(vals.min()), float(vals.max())
    if lo == hi:
        return Kmeans2Result(
            labels=np.zeros(vals.size, dtype=np.int64), centers=(lo, hi), degenerate=True
        )
    c0, c1 = lo, hi
    labels: np.ndarray | None = None
    for _ in range(max_iter):
        new_labels = (np.abs(vals - c1) < np.abs(vals - c0)).astype(np.int64)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        in1 = labels == 1
        # the min always assigns to c0 and the max to c1, so neither group empties
        c0 = float(vals[~in1].mean())
        c1 = float(vals[in1].mean())
    assert labels is not None
    return Kmeans2Result(labels=labels, centers=(c0, c1))


def select_foreground(labels: np.ndarray, origin: tuple[int, int] = (0, 0)) -> InstanceMask:
    """Pick the cluster whose pixels lie nearer the crop center as foreground.

    Foreground = strictly smaller mean Euclidean distance to the center
    ((h-1)/2, (w-1)/2); an exact tie keeps cluster 0. If one cluster is
    empty the whole instance becomes background.
    """
    grid = np.asarray(labels)
    if grid.ndim != 2:
        raise ValueError("labels must cover an h x w grid")
    h, w = grid.shape
    in1 = grid == 1
    if in1.all() or not in1.any():
        return InstanceMask(values=np.zeros((h, w), dtype=np.uint8), origin=origin)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dist = np.sqrt((rr - (h - 1) / 2.0) ** 2 + (cc - (w - 1) / 2.0) ** 2)
    d0 = float(dist[~in1].mean())
    d1 = float(dist[in1].mean())
    fg_cluster = 1 if d1 < d0 else 0
    return InstanceMask(values=(grid == fg_cluster).astype(np.uint8), origin=origin)


def calibrate(mask: InstanceMask) -> InstanceMask:
    """Flip 0/1 when the border ring carries more foreground than the mask overall."""
    v = mask.values
    h, w = v.shape
    if h < 2 or w < 2:
        raise ValueError("calibrate needs a mask of at least 2x2")
    ring = np.concatenate([v[0, :], v[-1, :], v[1:-1, 0], v[1:-1, -1]])
    edge_mean = float(ring.mean())
    overall_mean = float(v.mean())
    if edge_mean > overall_mean:
        return InstanceMask(values=(1 - v).astype(np.uint8), origin=mask.origin)
    return mask


def assemble(instance_masks: list[InstanceMask], height: int, width: int) -> BinaryMask:
    """Union all instance masks onto an all-zero canvas at their origins."""
    canvas = np.zeros((height, width), dtype=np.uint8)
    for inst in instance_masks:
        x0, y0 = inst.origin
        h, w = inst.values.shape
        if x0 < 0 or y0 < 0 or y0 + h > height or x0 + w > width:
            raise PlacementOutOfBounds(
                f"instance {h}x{w} at {(x0, y0)} exceeds {height}x{width} canvas"
            )
        region = canvas[y0 : y0 + h, x0 : x0 + w]
        np.maximum(region, inst.values, out=region)
    return BinaryMask(values=canvas)


def generate_mask(image: np.ndarray, boxes: list[TextBox], seed: int = 0) -> BinaryMask:
    """Run the full per-box pipeline and reassemble a complete mask image.

    Degenerate boxes and constant-intensity crops contribute all-zero
    masks instead of failing the image; out-of-bounds boxes propagate.
    """
    gray = to_grayscale(image)
    height, width = gray.shape
    parts: list[InstanceMask] = []
    for box in boxes:
        try:
            crop = crop_instance(gray, box)
        except DegenerateBox:
            continue
        result = kmeans2(crop.pixels.ravel(), seed=seed)
        if result.degenerate:
            continue
        labels = result.labels.reshape(crop.pixels.shape)
        inst = calibrate(select_foreground(labels, origin=crop.origin))
        parts.append(inst)
    return assemble(parts, height, width)
