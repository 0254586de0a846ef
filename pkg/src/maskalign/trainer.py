"""Stage-1 alignment training at desk scale.

Synthesizes a glyph-bar corpus whose bar widths encode short digit
answers, runs the joint text-parsing + mask objective with the language
model frozen, and evaluates mask IoU / answer NLL. Also implements the
frozen-feature mask-probe protocol used by the ablation comparison.

All loops are single-threaded and seeded; repeated runs produce
bit-identical loss trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import mgm as mg
from . import numerics as nm
from . import tinyllm as tl
from . import vision as vz
from .maskgen import TextBox
from .mgm import MGMConfig
from .numerics import ParamSet, Tensor
from .tinyllm import BOS, EOS, LLMConfig
from .vision import VisionConfig

QUESTION_TEMPLATES = (
    "Read all text.",
    "List every glyph code.",
    "Transcribe the page.",
    "What symbols are shown?",
    "Extract the text content.",
    "Report the digit codes.",
)


class NaNLoss(RuntimeError):
    """A per-sample loss went non-finite; carries the sample index."""

    def __init__(self, sample_index: int, kind: str):
        super().__init__(f"non-finite {kind} loss at sample {sample_index}")
        self.sample_index = sample_index


@dataclass
class SampleRecord:
    """One training example; image/mask may be in-memory arrays or file refs."""

    image: np.ndarray | str
    boxes: list[TextBox]
    question: str
    answer: str
    mask: np.ndarray | str


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch: int = 8
    lr_mgm: float = 2e-4
    lr_base: float = 2e-5
    lr_scale: float = 1200.0  # single global multiplier over the two groups
    mask_weight: float = 1.0
    seed: int = 0
    tap: int = 2
    corpus: int = 200
    canvas: int = 64
    eval_threshold: float = 0.5
    freeze: frozenset[str] | None = None  # None -> every llm.* tensor
    vision: VisionConfig = field(default_factory=VisionConfig)
    llm: LLMConfig = field(default_factory=LLMConfig)
    mgm: MGMConfig = field(default_factory=MGMConfig)

    def __post_init__(self):
        if self.lr_mgm <= 0 or self.lr_base <= 0 or self.lr_scale <= 0:
            raise ValueError("learning rates must be positive")
        if not 1 <= self.tap <= self.llm.layers:
            raise ValueError(f"tap {self.tap} outside [1, {self.llm.layers}]")
        if self.llm.d != self.mgm.d:
            raise ValueError("mask head width must match decoder width")

    def lr_for(self, name: str) -> float:
        group = self.lr_mgm if name.startswith("mgm.") else self.lr_base
        return group * self.lr_scale


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(cfg: TrainConfig) -> ParamSet:
    """All module parameters under one namespace; LLM frozen by default."""
    rng = nm.new_rng(cfg.seed)
    tensors: dict[str, Tensor] = {}
    tensors.update(vz.init_vision_params(cfg.vision, cfg.llm.d, rng))
    tensors.update(tl.init_llm_params(cfg.llm, rng))
    tensors.update(
        mg.init_mgm_params(cfg.mgm, cfg.vision.shuffled_side, cfg.vision.tile_side, rng)
    )
    frozen = (
        set(cfg.freeze)
        if cfg.freeze is not None
        else {n for n in tensors if n.startswith("llm.")}
    )
    return ParamSet(tensors, frozen=frozen)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def _bar_geometry(rng: np.random.Generator, canvas: int, band: int, code: int):
    y0 = 4 + 18 * band + int(rng.integers(0, 5))
    x0 = 4 + int(rng.integers(0, 4))
    width = 12 + 4 * code
    return x0, y0, x0 + width, y0 + 8


def synth_corpus(count: int, canvas: int = 64, seed: int = 0) -> list[SampleRecord]:
    """Light pages with 1-3 dark glyph bars; bar widths encode a digit string.

    The vertical and horizontal placement jitter never changes the encoded
    answer, so pixel-accurate bar extents are information the text task
    alone has no reason to preserve. The ground-truth mask is the exact
    bar stencil.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = nm.new_rng(seed)
    samples = []
    for _ in range(count):
        n_bars = int(rng.integers(1, 4))
        codes = [int(rng.integers(0, 10)) for _ in range(n_bars)]
        stencil = np.zeros((canvas, canvas), dtype=np.uint8)
        boxes = []
        for band, code in enumerate(codes):
            x0, y0, x1, y1 = _bar_geometry(rng, canvas, band, code)
            stencil[y0:y1, x0:x1] = 1
            boxes.append(
                TextBox(max(x0 - 2, 0), max(y0 - 2, 0), min(x1 + 2, canvas), min(y1 + 2, canvas))
            )
        image = rng.integers(215, 226, size=(canvas, canvas)).astype(np.uint8)
        dark = rng.integers(25, 36, size=(canvas, canvas)).astype(np.uint8)
        image[stencil == 1] = dark[stencil == 1]
        samples.append(
            SampleRecord(
                image=image,
                boxes=boxes,
                question=QUESTION_TEMPLATES[int(rng.integers(0, len(QUESTION_TEMPLATES)))],
                answer="".join(str(c) for c in codes),
                mask=stencil,
            )
        )
    return samples


def _require_arrays(sample: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(sample.image, str) or isinstance(sample.mask, str):
        raise TypeError("resolve file-backed samples through dataio.load_sample first")
    return sample.image, sample.mask


# ---------------------------------------------------------------------------
# joint forward
# ---------------------------------------------------------------------------


@dataclass
class MaskBranch:
    loss: object  # scalar Tensor (graph mode) or numpy scalar (fast mode)
    predictions: list[mg.PredictedMask]
    attention: list[mg.AttentionRecord]
    targets: list[np.ndarray]


@dataclass
class JointOutput:
    loss_vqa: object
    loss_mask: object
    logits: object
    tap: tl.LayerTap
    predictions: list[mg.PredictedMask]
    attention: list[mg.AttentionRecord]
    tile_targets: list[np.ndarray]
    vision_out: vz.VisionOutput


def sample_token_ids(sample: SampleRecord) -> tuple[list[int], list[int]]:
    return [BOS] + tl.encode_chars(sample.question), tl.encode_chars(sample.answer) + [EOS]


def tile_mask_targets(mask: np.ndarray, layout: tuple[int, int], tile_side: int) -> list[np.ndarray]:
    """Ground-truth mask resized (nearest) onto the sliced canvas, per tile."""
    rows, cols = layout
    canvas = vz.nearest_resize(mask, rows * tile_side, cols * tile_side)
    return [
        canvas[r * tile_side : (r + 1) * tile_side, c * tile_side : (c + 1) * tile_side]
        for r in range(rows)
        for c in range(cols)
    ]


def mask_branch(
    tap: tl.LayerTap,
    targets: list[np.ndarray],
    params: Mapping,
    cfg: TrainConfig,
    token_side: int,
    record_attention: bool = False,
) -> MaskBranch:
    """Per-tile mask head on the tapped states, losses averaged over tiles."""
    npt = token_side * token_side
    predictions, attention, losses = [], [], []
    for t, target in enumerate(targets):
        sub_tap = tl.LayerTap(
            layer=tap.layer,
            v=nm.rows(tap.v, t * npt, (t + 1) * npt),
            q=tap.q,
            a=tap.a,
        )
        pred, attn = mg.mgm_forward(
            sub_tap,
            params,
            cfg.mgm,
            (token_side, token_side),
            cfg.vision.tile_side,
            record_attention=record_attention,
        )
        predictions.append(pred)
        attention.append(attn)
        losses.append(mg.mask_loss(pred, target))
    acc = losses[0]
    for extra in losses[1:]:
        acc = nm.add(acc, extra)
    return MaskBranch(
        loss=nm.mul(acc, 1.0 / len(losses)),
        predictions=predictions,
        attention=attention,
        targets=targets,
    )


def detach_tap(tap: tl.LayerTap) -> tl.LayerTap:
    pull = lambda t: t.data if isinstance(t, Tensor) else t
    return tl.LayerTap(layer=tap.layer, v=pull(tap.v), q=pull(tap.q), a=pull(tap.a))


def joint_forward(
    sample: SampleRecord,
    params: Mapping,
    cfg: TrainConfig,
    with_mask: bool = True,
    record_attention: bool = False,
) -> JointOutput:
    """vision -> decoder (with tap) -> answer NLL; tap -> mask head -> mask loss.

    The mask branch reads the tap but never writes back: decoder outputs are
    identical with or without it. `with_mask=False` skips the branch.
    """
    image, mask = _require_arrays(sample)
    q_ids, a_ids = sample_token_ids(sample)
    vout = vz.vision_forward(image, params, cfg.vision)
    logits, tap = tl.llm_forward(vout.tokens, q_ids, a_ids, params, cfg.llm, tap_at=cfg.tap)
    loss_vqa = tl.vqa_loss(logits, a_ids, vocab=cfg.llm.vocab)

    branch = None
    if with_mask:
        targets = tile_mask_targets(mask, vout.layout, cfg.vision.tile_side)
        branch = mask_branch(tap, targets, params, cfg, vout.token_side, record_attention)
    return JointOutput(
        loss_vqa=loss_vqa,
        loss_mask=branch.loss if branch else None,
        logits=logits,
        tap=tap,
        predictions=branch.predictions if branch else [],
        attention=branch.attention if branch else [],
        tile_targets=branch.targets if branch else [],
        vision_out=vout,
    )


def joint_loss_value(sample: SampleRecord, raw: Mapping[str, np.ndarray], cfg: TrainConfig) -> float:
    """Plain-float joint loss (no graph), for finite-difference sweeps."""
    out = joint_forward(sample, raw, cfg, with_mask=cfg.mask_weight != 0.0)
    total = float(out.loss_vqa)
    if out.loss_mask is not None:
        total += cfg.mask_weight * float(out.loss_mask)
    return total


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def train_step(
    batch: list[SampleRecord], params: ParamSet, cfg: TrainConfig, base_index: int = 0
) -> tuple[float, float]:
    """One accumulated-gradient descent step; returns mean (vqa, mask) losses.

    Frozen tensors stay bit-identical. With mask_weight == 0 the mask branch
    is evaluated gradient-free for reporting only, so mask-head parameters
    receive no update.
    """
    params.zero_grad()
    scale = 1.0 / len(batch)
    vqa_sum, mask_sum = 0.0, 0.0
    raw = {k: t.data for k, t in params.tensors.items()}
    for j, sample in enumerate(batch):
        out = joint_forward(sample, params.tensors, cfg, with_mask=cfg.mask_weight != 0.0)
        v = float(out.loss_vqa.item())
        if not np.isfinite(v):
            raise NaNLoss(base_index + j, "vqa")
        vqa_sum += v
        if out.loss_mask is not None:
            m = float(out.loss_mask.item())
            if not np.isfinite(m):
                raise NaNLoss(base_index + j, "mask")
            mask_sum += m
            total = nm.add(out.loss_vqa, nm.mul(out.loss_mask, cfg.mask_weight))
        else:
            # reporting only: gradient-free mask branch on the detached tap
            _, mask = _require_arrays(sample)
            targets = tile_mask_targets(mask, out.vision_out.layout, cfg.vision.tile_side)
            detached = mask_branch(
                detach_tap(out.tap), targets, raw, cfg, out.vision_out.token_side
            )
            mask_sum += float(detached.loss)
            total = out.loss_vqa
        nm.mul(total, scale).backward()
    params.sgd_step(cfg.lr_for)
    return vqa_sum * scale, mask_sum * scale


def train(
    corpus: list[SampleRecord],
    params: ParamSet,
    cfg: TrainConfig,
    log_every: int = 0,
) -> list[dict]:
    """Run cfg.steps batched updates over the corpus; returns the loss table."""
    order_rng = nm.new_rng(cfg.seed + 1)
    history = []
    for step in range(cfg.steps):
        idx = order_rng.integers(0, len(corpus), size=cfg.batch)
        batch = [corpus[i] for i in idx]
        loss_vqa, loss_mask = train_step(batch, params, cfg, base_index=int(idx[0]))
        history.append({"step": step, "loss_vqa": loss_vqa, "loss_mask": loss_mask})
        if log_every and step % log_every == 0:
            print(f"step {step:4d}  vqa {loss_vqa:.4f}  mask {loss_mask:.4f}")
    return history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def mask_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Intersection over union of two {0,1} masks (1.0 when both empty)."""
    inter = int(np.sum((pred == 1) & (truth == 1)))
    union = int(np.sum((pred == 1) | (truth == 1)))
    return 1.0 if union == 0 else inter / union


@dataclass
class EvalReport:
    mean_iou: float
    mean_vqa: float
    rows: list[dict]


def evaluate(
    corpus: list[SampleRecord],
    params: ParamSet | Mapping,
    cfg: TrainConfig,
    threshold: float = 0.5,
) -> EvalReport:
    """Per-tile IoU at `threshold` plus teacher-forced answer NLL, averaged."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    tensors = params.tensors if isinstance(params, ParamSet) else params
    raw = {k: (t.data if isinstance(t, Tensor) else t) for k, t in tensors.items()}
    rows = []
    for i, sample in enumerate(corpus):
        out = joint_forward(sample, raw, cfg, with_mask=True)
        ious = [
            mask_iou((pred.probs > threshold).astype(np.uint8), target)
            for pred, target in zip(out.predictions, out.tile_targets)
        ]
        rows.append(
            {
                "sample": i,
                "iou": float(np.mean(ious)),
                "vqa": float(out.loss_vqa),
                "mask": float(out.loss_mask),
            }
        )
    return EvalReport(
        mean_iou=float(np.mean([r["iou"] for r in rows])),
        mean_vqa=float(np.mean([r["vqa"] for r in rows])),
        rows=rows,
    )


# ---------------------------------------------------------------------------
# frozen-feature mask probe (ablation protocol)
# ---------------------------------------------------------------------------


def compute_taps(
    corpus: list[SampleRecord], params: ParamSet | Mapping, cfg: TrainConfig
) -> list[tuple[tl.LayerTap, list[np.ndarray], vz.VisionOutput]]:
    """Gradient-free tap states + tile targets for every sample."""
    tensors = params.tensors if isinstance(params, ParamSet) else params
    raw = {k: (t.data if isinstance(t, Tensor) else t) for k, t in tensors.items()}
    cached = []
    for sample in corpus:
        image, mask = _require_arrays(sample)
        q_ids, a_ids = sample_token_ids(sample)
        vout = vz.vision_forward(image, raw, cfg.vision)
        _, tap = tl.llm_forward(vout.tokens, q_ids, a_ids, raw, cfg.llm, tap_at=cfg.tap)
        cached.append((tap, tile_mask_targets(mask, vout.layout, cfg.vision.tile_side), vout))
    return cached


def train_mask_probe(
    corpus: list[SampleRecord],
    feature_params: ParamSet,
    cfg: TrainConfig,
    probe_seed: int = 7_001,
) -> tuple[ParamSet, float]:
    """Ablation probe: freeze every feature, fit a fresh mask head on the taps.

    Protocol (same budget as the joint run): cfg.steps batches of cfg.batch
    taps drawn with the training seed, plain gradient descent at the
    mask-head learning rate, then mean IoU at cfg.eval_threshold.
    """
    probe = ParamSet(
        mg.init_mgm_params(
            cfg.mgm, cfg.vision.shuffled_side, cfg.vision.tile_side, nm.new_rng(probe_seed)
        )
    )
    cached = compute_taps(corpus, feature_params, cfg)
    side = cfg.vision.shuffled_side
    order_rng = nm.new_rng(cfg.seed + 1)
    for _ in range(cfg.steps):
        idx = order_rng.integers(0, len(corpus), size=cfg.batch)
        probe.zero_grad()
        scale = 1.0 / len(idx)
        for i in idx:
            tap, targets, _ = cached[int(i)]
            branch = mask_branch(tap, targets, probe.tensors, cfg, side)
            nm.mul(branch.loss, scale).backward()
        probe.sgd_step(cfg.lr_for)

    raw_probe = {k: t.data for k, t in probe.tensors.items()}
    ious = []
    for tap, targets, _ in cached:
        branch = mask_branch(tap, targets, raw_probe, cfg, side)
        per_tile = [
            mask_iou((pred.probs > cfg.eval_threshold).astype(np.uint8), target)
            for pred, target in zip(branch.predictions, branch.targets)
        ]
        ious.append(float(np.mean(per_tile)))
    return probe, float(np.mean(ious))


def ablation_config(cfg: TrainConfig, mask_weight: float) -> TrainConfig:
    """Same seeds and budget, different mask-loss weighting."""
    return replace(cfg, mask_weight=mask_weight)
