"""Manifests, image/mask persistence, overlay rendering, checkpoints.

Manifests are JSON Lines: one record per line with explicit field names
(`image`, `boxes`, `mask`, optional `question` / `answer`). Masks persist
as single-channel PNGs with foreground 255 / background 0. Checkpoints
are a flat .npz of named row-major float64 tensors plus a JSON sidecar
carrying the tokenizer table, configuration, and freeze list.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .maskgen import TextBox, to_grayscale
from .mgm import AttentionRecord
from .numerics import ParamSet, Tensor
from .tinyllm import alphabet_table
from .trainer import SampleRecord


class UnreadableManifest(OSError):
    """Manifest file missing or unreadable."""


class MalformedRecord(ValueError):
    """A manifest line failed validation (strict mode only)."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class WriteFailure(OSError):
    """Output file could not be written."""


@dataclasses.dataclass
class Manifest:
    records: list[SampleRecord]
    diagnostics: list[tuple[int, str]]
    source: str
    line_numbers: list[int]


# ---------------------------------------------------------------------------
# images and masks
# ---------------------------------------------------------------------------


def load_image(path: str | Path) -> np.ndarray:
    """Read an image file as an 8-bit grayscale array."""
    with PILImage.open(path) as img:
        return to_grayscale(np.asarray(img.convert("RGB")))


def save_image(path: str | Path, values: np.ndarray) -> None:
    try:
        PILImage.fromarray(np.asarray(values, dtype=np.uint8), mode="L").save(path, format="PNG")
    except OSError as exc:
        raise WriteFailure(str(exc)) from exc


def save_mask(path: str | Path, values: np.ndarray) -> None:
    """Persist a {0,1} mask as a 0/255 single-channel PNG."""
    save_image(path, np.asarray(values, dtype=np.uint8) * 255)


def load_mask(path: str | Path) -> np.ndarray:
    """Read a mask PNG back to {0,1} (any nonzero pixel counts as foreground)."""
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 127).astype(np.uint8)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _parse_record(obj: dict, base: Path) -> SampleRecord:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    if "image" not in obj:
        raise ValueError("missing 'image' field")
    boxes = []
    for raw in obj.get("boxes", []):
        if len(raw) != 4:
            raise ValueError(f"box {raw!r} needs 4 coordinates")
        boxes.append(TextBox(*(int(v) for v in raw)))
    resolve = lambda p: str((base / p) if not Path(p).is_absolute() else Path(p))
    return SampleRecord(
        image=resolve(obj["image"]),
        boxes=boxes,
        question=str(obj.get("question", "")),
        answer=str(obj.get("answer", "")),
        mask=resolve(obj["mask"]) if obj.get("mask") else "",
    )


def load_manifest(path: str | Path, strict: bool = False) -> Manifest:
    """One record per non-empty line; malformed lines become diagnostics
    unless strict, in which case the first one raises MalformedRecord."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UnreadableManifest(f"cannot read {path}: {exc}") from exc
    records: list[SampleRecord] = []
    diagnostics: list[tuple[int, str]] = []
    line_numbers: list[int] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(_parse_record(json.loads(line), path.parent))
            line_numbers.append(line_no)
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            if strict:
                raise MalformedRecord(line_no, str(exc)) from exc
            diagnostics.append((line_no, str(exc)))
    return Manifest(
        records=records, diagnostics=diagnostics, source=str(path), line_numbers=line_numbers
    )


def write_manifest(records: list[SampleRecord], path: str | Path) -> None:
    lines = []
    for rec in records:
        if not isinstance(rec.image, str):
            raise ValueError("write_manifest needs file-backed records")
        lines.append(
            json.dumps(
                {
                    "image": rec.image,
                    "boxes": [[b.x0, b.y0, b.x1, b.y1] for b in rec.boxes],
                    "mask": rec.mask if isinstance(rec.mask, str) else "",
                    "question": rec.question,
                    "answer": rec.answer,
                },
                sort_keys=True,
            )
        )
    try:
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise WriteFailure(str(exc)) from exc


def load_sample(record: SampleRecord) -> SampleRecord:
    """Resolve file references into in-memory arrays (no-op when already loaded)."""
    image = load_image(record.image) if isinstance(record.image, str) else record.image
    if isinstance(record.mask, str):
        mask = load_mask(record.mask) if record.mask else np.zeros_like(image)
    else:
        mask = record.mask
    return SampleRecord(
        image=image, boxes=record.boxes, question=record.question,
        answer=record.answer, mask=mask,
    )


def export_corpus(records: list[SampleRecord], out_dir: str | Path) -> list[SampleRecord]:
    """Write in-memory samples to PNG files and return file-backed records."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exported = []
    for i, rec in enumerate(records):
        image_path = out / f"sample_{i:05d}.png"
        mask_path = out / f"sample_{i:05d}_mask.png"
        save_image(image_path, rec.image)
        save_mask(mask_path, rec.mask)
        exported.append(
            SampleRecord(
                image=str(image_path), boxes=rec.boxes, question=rec.question,
                answer=rec.answer, mask=str(mask_path),
            )
        )
    return exported


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------


def render_overlay(image: np.ndarray, overlay, out_path: str | Path) -> None:
    """Write the source at half intensity with `overlay` in the red channel.

    `overlay` is a {0,1} mask or a [0,1] float map of the same height/width
    (use attention_to_map to upsample attention weights first).
    """
    gray = to_grayscale(image)
    ov = np.asarray(getattr(overlay, "values", overlay), dtype=np.float64)
    if ov.shape != gray.shape:
        raise ValueError(f"overlay {ov.shape} does not match image {gray.shape}")
    ov = np.clip(ov, 0.0, 1.0)
    dim = gray // 2
    rgb = np.stack([dim, dim, dim], axis=2).astype(np.float64)
    rgb[:, :, 0] += ov * (255.0 - dim)
    try:
        PILImage.fromarray(np.clip(np.rint(rgb), 0, 255).astype(np.uint8), mode="RGB").save(
            out_path, format="PNG"
        )
    except OSError as exc:
        raise WriteFailure(str(exc)) from exc


def attention_to_map(
    record: AttentionRecord, layer: int, head: int, grid: tuple[int, int], out_hw: tuple[int, int]
) -> np.ndarray:
    """Mean attention mass per visual position, upsampled nearest-neighbor
    and normalized to [0,1] per map."""
    weights = record.layers[layer][head]  # (n_visual, n_keys)
    mass = weights.sum(axis=1).reshape(grid)
    lo, hi = float(mass.min()), float(mass.max())
    if hi > lo:
        mass = (mass - lo) / (hi - lo)
    else:
        mass = np.zeros_like(mass)
    rows = np.minimum(
        ((np.arange(out_hw[0]) + 0.5) * grid[0] / out_hw[0]).astype(np.intp), grid[0] - 1
    )
    cols = np.minimum(
        ((np.arange(out_hw[1]) + 0.5) * grid[1] / out_hw[1]).astype(np.intp), grid[1] - 1
    )
    return mass[np.ix_(rows, cols)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ParamSet, config: dict) -> None:
    """Flat named-tensor container (.npz) plus a JSON sidecar with the
    tokenizer table, run configuration, and freeze list."""
    path = Path(path)
    arrays = {name: t.data for name, t in params.tensors.items()}
    try:
        np.savez(path, **arrays)
    except OSError as exc:
        raise WriteFailure(str(exc)) from exc
    meta = {
        "alphabet": [[i, s] for i, s in alphabet_table()],
        "frozen": sorted(params.frozen),
        "config": config,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict]:
    path = Path(path)
    with np.load(path) as bundle:
        tensors = {name: Tensor(bundle[name].copy()) for name in bundle.files}
    meta = json.loads(path.with_suffix(".json").read_text())
    params = ParamSet(tensors, frozen=set(meta.get("frozen", [])))
    return params, meta
