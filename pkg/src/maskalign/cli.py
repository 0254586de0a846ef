"""Command dispatcher: genmask / train / eval / gradcheck / render.

Exit codes: 0 success, 1 validation failure (bad arguments, malformed
inputs), 2 runtime failure. Configuration precedence per key:
CLI flag > config file (JSON) > built-in default. The only environment
variable consulted is MASKALIGN_THREADS (default thread count).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, maskgen
from . import numerics as nm
from . import trainer as tr
from .fastgrad import BulkDifferencer
from .mgm import MGMConfig
from .tinyllm import LLMConfig
from .vision import VisionConfig

log = logging.getLogger("maskalign")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(ValueError):
    """Bad CLI input; maps to exit code 1."""


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MASKALIGN_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

# flat config-file keys -> (dataclass section, field)
_KEYMAP = {
    "tile_side": ("vision", "tile_side"),
    "max_tiles": ("vision", "max_tiles"),
    "patch": ("vision", "patch"),
    "window": ("vision", "window"),
    "ratio": ("vision", "ratio"),
    "d": ("vision", "d"),
    "llm_layers": ("llm", "layers"),
    "llm_d": ("llm", "d"),
    "llm_heads": ("llm", "heads"),
    "llm_d_ff": ("llm", "d_ff"),
    "mgm_layers": ("mgm", "layers"),
    "mgm_heads": ("mgm", "heads"),
    "mgm_d_ff": ("mgm", "d_ff"),
    "steps": (None, "steps"),
    "batch": (None, "batch"),
    "lr_mgm": (None, "lr_mgm"),
    "lr_base": (None, "lr_base"),
    "lr_scale": (None, "lr_scale"),
    "mask_weight": (None, "mask_weight"),
    "seed": (None, "seed"),
    "tap": (None, "tap"),
    "corpus": (None, "corpus"),
    "canvas": (None, "canvas"),
    "eval_threshold": (None, "eval_threshold"),
}


def build_config(config_path: str | None, overrides: dict) -> tr.TrainConfig:
    """Merge defaults <- config file <- CLI overrides into a TrainConfig."""
    merged: dict = {}
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ValidationError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
        unknown = set(file_cfg) - set(_KEYMAP)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})

    sections = {"vision": {}, "llm": {}, "mgm": {}, None: {}}
    for key, value in merged.items():
        section, field = _KEYMAP[key]
        sections[section][field] = value
    try:
        llm_d = sections["llm"].get("d")
        if llm_d is not None:
            sections["mgm"].setdefault("d", llm_d)
        return tr.TrainConfig(
            vision=VisionConfig(**sections["vision"]),
            llm=LLMConfig(**sections["llm"]),
            mgm=MGMConfig(**sections["mgm"]),
            **sections[None],
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad configuration: {exc}") from exc


def config_as_dict(cfg: tr.TrainConfig) -> dict:
    flat = {}
    for key, (section, field) in _KEYMAP.items():
        obj = cfg if section is None else getattr(cfg, section)
        flat[key] = getattr(obj, field)
    return flat


# ---------------------------------------------------------------------------
# genmask
# ---------------------------------------------------------------------------


def _genmask_record(index: int, record: tr.SampleRecord, seed: int) -> tuple[int, str | None]:
    try:
        image = dataio.load_image(record.image)
        mask = maskgen.generate_mask(image, record.boxes, seed=seed + index)
        if not isinstance(record.mask, str) or not record.mask:
            return index, "record has no output mask path"
        dataio.save_mask(record.mask, mask.values)
        return index, None
    except Exception as exc:  # per-record isolation: log, don't abort the batch
        return index, f"{type(exc).__name__}: {exc}"


def cmd_genmask(args) -> int:
    manifest = dataio.load_manifest(args.manifest, strict=args.strict)
    for line_no, reason in manifest.diagnostics:
        log.warning("manifest line %d skipped: %s", line_no, reason)
    if not manifest.records:
        log.info("manifest empty; nothing to do")
        return EXIT_OK
    failures = 0
    if args.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(
                pool.map(
                    _genmask_record,
                    range(len(manifest.records)),
                    manifest.records,
                    [args.seed] * len(manifest.records),
                )
            )
    else:
        results = [
            _genmask_record(i, rec, args.seed) for i, rec in enumerate(manifest.records)
        ]
    for index, error in sorted(results):
        if error is not None:
            failures += 1
            log.error("record %d failed: %s", index, error)
    if failures:
        log.error("%d/%d records failed", failures, len(manifest.records))
        return EXIT_RUNTIME
    log.info("wrote %d masks", len(manifest.records))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def _write_history(path: Path, history: list[dict]) -> None:
    lines = ["step,loss_vqa,loss_mask"]
    lines += [f"{h['step']},{h['loss_vqa']!r},{h['loss_mask']!r}" for h in history]
    path.write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    cfg = build_config(args.config, {"seed": args.seed, "steps": args.steps})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = tr.synth_corpus(cfg.corpus, canvas=cfg.canvas, seed=cfg.seed)
    params = tr.init_params(cfg)
    log.info(
        "training: %d steps, batch %d, lambda %.3g, %d samples",
        cfg.steps, cfg.batch, cfg.mask_weight, len(corpus),
    )
    history = tr.train(corpus, params, cfg, log_every=args.log_every)
    _write_history(out / "losses.csv", history)
    report = tr.evaluate(corpus, params, cfg, threshold=cfg.eval_threshold)
    dataio.save_checkpoint(out / "checkpoint.npz", params, config_as_dict(cfg))
    (out / "eval.json").write_text(
        json.dumps(
            {"mean_iou": report.mean_iou, "mean_vqa": report.mean_vqa, "rows": report.rows},
            indent=2,
        )
    )
    log.info("final mean IoU %.4f, mean answer NLL %.4f", report.mean_iou, report.mean_vqa)
    return EXIT_OK


def _load_eval_corpus(manifest_path: str) -> list[tr.SampleRecord]:
    manifest = dataio.load_manifest(manifest_path)
    for line_no, reason in manifest.diagnostics:
        log.warning("manifest line %d skipped: %s", line_no, reason)
    return [dataio.load_sample(rec) for rec in manifest.records]


def cmd_eval(args) -> int:
    params, meta = dataio.load_checkpoint(args.ckpt)
    cfg = build_config(None, {})
    cfg = dataclasses.replace(
        build_config(None, meta.get("config", {})), eval_threshold=args.threshold
    )
    corpus = _load_eval_corpus(args.manifest)
    if not corpus:
        raise ValidationError("no usable records in manifest")
    report = tr.evaluate(corpus, params, cfg, threshold=args.threshold)
    for row in report.rows:
        print(f"sample {row['sample']:4d}  iou {row['iou']:.4f}  vqa {row['vqa']:.4f}")
    print(f"mean_iou {report.mean_iou:.4f}  mean_vqa {report.mean_vqa:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / render
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    cfg = build_config(args.config, {"seed": args.seed})
    params = tr.init_params(cfg)
    sample = tr.synth_corpus(1, canvas=cfg.canvas, seed=args.sample_seed)[0]

    def loss_fn(p):
        out = tr.joint_forward(sample, p.tensors, cfg)
        return nm.add(out.loss_vqa, nm.mul(out.loss_mask, cfg.mask_weight))

    def value_fn(p):
        raw = {k: t.data for k, t in p.tensors.items()}
        return tr.joint_loss_value(sample, raw, cfg)

    bulk = None if args.naive else BulkDifferencer(sample, params, cfg, chunk=args.chunk)
    report = nm.grad_check(
        loss_fn, params, step=args.step, tol=args.tol, value_fn=value_fn, bulk_fd=bulk
    )
    print(report.format_table())
    return EXIT_OK if report.ok else EXIT_RUNTIME


def cmd_render(args) -> int:
    params, meta = dataio.load_checkpoint(args.ckpt)
    cfg = build_config(None, meta.get("config", {}))
    corpus = _load_eval_corpus(args.manifest)
    if not 0 <= args.index < len(corpus):
        raise ValidationError(f"index {args.index} outside manifest of {len(corpus)}")
    sample = corpus[args.index]
    raw = {k: t.data for k, t in params.tensors.items()}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = tr.joint_forward(sample, raw, cfg, with_mask=True, record_attention=True)
    tiles = result.vision_out.tiles
    side = result.vision_out.token_side
    wrote = []
    for t, (pred, attn, tile) in enumerate(zip(result.predictions, result.attention, tiles)):
        if args.what in ("mask", "both"):
            path = out_dir / f"tile{t}_mask.png"
            mask = (pred.probs > cfg.eval_threshold).astype(np.uint8)
            dataio.render_overlay(tile, mask, path)
            wrote.append(path)
        if args.what in ("attention", "both"):
            for layer in range(len(attn.layers)):
                for head in range(attn.layers[layer].shape[0]):
                    path = out_dir / f"tile{t}_attn_l{layer}h{head}.png"
                    amap = dataio.attention_to_map(
                        attn, layer, head, (side, side), tile.shape
                    )
                    dataio.render_overlay(tile, amap, path)
                    wrote.append(path)
    for path in wrote:
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskalign",
        description="Text-mask factory and toy mask-supervised alignment training.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("genmask", help="generate text masks for a manifest")
    g.add_argument("--manifest", required=True)
    g.add_argument("--threads", type=int, default=default_threads())
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--strict", action="store_true", help="fail on malformed manifest lines")
    g.set_defaults(fn=cmd_genmask)

    t = sub.add_parser("train", help="stage-1 alignment training on a synthetic corpus")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="full-model finite-difference gradient check")
    c.add_argument("--config", help="JSON config file")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--sample-seed", type=int, default=3)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-5)
    c.add_argument("--chunk", type=int, default=128)
    c.add_argument("--naive", action="store_true", help="scalar sweeps only (slow)")
    c.set_defaults(fn=cmd_gradcheck)

    r = sub.add_parser("render", help="overlay predicted masks / attention heatmaps")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--manifest", required=True)
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--what", choices=("mask", "attention", "both"), default="both")
    r.set_defaults(fn=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except (ValidationError, dataio.MalformedRecord, dataio.UnreadableManifest) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failure
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
