"""Train-time mask head: cross-attention from visual states into language
states, 2-D re-organization, transposed-convolution decoding back to image
resolution, and the overlap + cross-entropy mask objective.

The head only reads the tapped hidden states; the decoder never sees its
output, so dropping the head leaves decoder outputs bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nm
from .numerics import ShapeMismatch, Tensor
from .tinyllm import LayerTap

DICE_SMOOTHING = 1.0


class NonPowerOfTwoUpscale(ValueError):
    """tile_side / grid_side is not a power of the deconv stride."""


@dataclass(frozen=True)
class MGMConfig:
    layers: int = 4
    heads: int = 4
    d: int = 32
    d_ff: int = 64
    deconv_kernel: int = 4
    deconv_stride: int = 2

    @property
    def d_head(self) -> int:
        return self.d // self.heads


@dataclass
class PredictedMask:
    """Per-pixel mask belief: probs = sigmoid(logits), image-resolution."""

    logits: Tensor | np.ndarray
    probs: Tensor | np.ndarray


@dataclass
class AttentionRecord:
    """Per layer, per head cross-attention weights (query rows sum to 1)."""

    layers: list[np.ndarray] = field(default_factory=list)  # each (heads, n, l+m)


def deconv_channel_chain(d: int, n_layers: int) -> list[tuple[int, int]]:
    """(in, out) channel pairs: halve per layer, final layer lands on 1."""
    chain = []
    c = d
    for i in range(n_layers):
        nxt = 1 if i == n_layers - 1 else max(c // 2, 1)
        chain.append((c, nxt))
        c = nxt
    return chain


def num_deconv_layers(grid_side: int, tile_side: int, stride: int) -> int:
    if grid_side < 1 or tile_side % grid_side != 0:
        raise NonPowerOfTwoUpscale(f"cannot upscale {grid_side} -> {tile_side}")
    factor = tile_side // grid_side
    n = round(math.log(factor, stride))
    if stride**n != factor:
        raise NonPowerOfTwoUpscale(
            f"{tile_side}/{grid_side} = {factor} is not a power of stride {stride}"
        )
    return n


def init_mgm_params(
    cfg: MGMConfig, grid_side: int, tile_side: int, rng: np.random.Generator
) -> dict[str, Tensor]:
    d, dff = cfg.d, cfg.d_ff
    w = lambda fan_in, shape: Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape))
    params: dict[str, Tensor] = {}
    for i in range(cfg.layers):
        pre = f"mgm.layer{i}."
        params[pre + "lnq_g"] = Tensor(np.ones(d))
        params[pre + "lnq_b"] = Tensor(np.zeros(d))
        for name in ("wq", "wk", "wv"):
            params[pre + name] = w(d, (d, d))
        params[pre + "lnf_g"] = Tensor(np.ones(d))
        params[pre + "lnf_b"] = Tensor(np.zeros(d))
        params[pre + "ff_w1"] = w(d, (d, dff))
        params[pre + "ff_b1"] = Tensor(np.zeros(dff))
        params[pre + "ff_w2"] = w(dff, (dff, d))
        params[pre + "ff_b2"] = Tensor(np.zeros(d))
    k = cfg.deconv_kernel
    for j, (cin, cout) in enumerate(
        deconv_channel_chain(d, num_deconv_layers(grid_side, tile_side, cfg.deconv_stride))
    ):
        params[f"mgm.deconv{j}.k"] = w(cin * k * k, (cin, cout, k, k))
        params[f"mgm.deconv{j}.b"] = Tensor(np.zeros(cout))
    return params


def mgm_param_names(cfg: MGMConfig, grid_side: int, tile_side: int) -> list[str]:
    return list(init_mgm_params(cfg, grid_side, tile_side, nm.new_rng(0)).keys())


# ---------------------------------------------------------------------------
# cross-attention block
# ---------------------------------------------------------------------------


def cross_attention_layer(
    v,
    h,
    params: Mapping,
    prefix: str,
    cfg: MGMConfig,
    record: AttentionRecord | None = None,
):
    """One block: multi-head cross-attention (visual queries over language
    keys/values, heads concatenated, no output projection) then a
    positionwise feed-forward; pre-norm residuals around both sub-layers."""
    if v.shape[-1] != cfg.d or h.shape[-1] != cfg.d:
        raise ShapeMismatch(f"width mismatch: v {v.shape}, h {h.shape}, d {cfg.d}")
    n, m = v.shape[0], h.shape[0]
    heads, dh = cfg.heads, cfg.d_head

    def split(t, length):  # (length, d) -> (heads, length, dh)
        return nm.transpose(nm.reshape(t, (length, heads, dh)), (1, 0, 2))

    normed = nm.layer_norm(v, params[prefix + "lnq_g"], params[prefix + "lnq_b"])
    q = split(nm.matmul(normed, params[prefix + "wq"]), n)
    k = split(nm.matmul(h, params[prefix + "wk"]), m)
    val = split(nm.matmul(h, params[prefix + "wv"]), m)
    scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    weights = nm.softmax(scores, axis=-1)
    if record is not None:
        w = weights.data if isinstance(weights, Tensor) else weights
        record.layers.append(w.copy())
    attn = nm.reshape(nm.transpose(nm.matmul(weights, val), (1, 0, 2)), (n, cfg.d))
    v = nm.add(v, attn)

    normed = nm.layer_norm(v, params[prefix + "lnf_g"], params[prefix + "lnf_b"])
    hidden = nm.relu(nm.add(nm.matmul(normed, params[prefix + "ff_w1"]), params[prefix + "ff_b1"]))
    ff = nm.add(nm.matmul(hidden, params[prefix + "ff_w2"]), params[prefix + "ff_b2"])
    return nm.add(v, ff)


def reorg_2d(v_attn, g_h: int, g_w: int):
    """Row-major token sequence -> (d, g_h, g_w) feature map; pure reshape."""
    n, d = v_attn.shape
    if n != g_h * g_w:
        raise ShapeMismatch(f"{n} tokens cannot fill a {g_h}x{g_w} grid")
    return nm.transpose(nm.reshape(v_attn, (g_h, g_w, d)), (2, 0, 1))


def deconv_decode(feat, params: Mapping, cfg: MGMConfig, tile_side: int) -> PredictedMask:
    """Stride-2 transposed convolutions (kernel 4, one-pixel border crop per
    layer, i.e. padding 1) doubling resolution until tile_side; channels
    halve down to 1; relu between layers, sigmoid on the final logits."""
    d, g_h, g_w = feat.shape
    if g_h != g_w:
        raise ShapeMismatch(f"decode expects a square grid, got {g_h}x{g_w}")
    n_layers = num_deconv_layers(g_h, tile_side, cfg.deconv_stride)
    crop = cfg.deconv_kernel - cfg.deconv_stride
    if crop < 0 or crop % 2 != 0:
        raise ValueError(f"kernel {cfg.deconv_kernel} / stride {cfg.deconv_stride} cannot crop evenly")
    margin = crop // 2
    x = feat
    for j in range(n_layers):
        x = nm.transposed_conv2d(x, params[f"mgm.deconv{j}.k"], stride=cfg.deconv_stride)
        if margin:
            side = x.shape[-1]
            x = nm.narrow(x, (slice(None), slice(margin, side - margin), slice(margin, side - margin)))
        x = nm.add(x, nm.reshape(params[f"mgm.deconv{j}.b"], (-1, 1, 1)))
        if j < n_layers - 1:
            x = nm.relu(x)
    logits = nm.reshape(x, (tile_side, tile_side))
    return PredictedMask(logits=logits, probs=nm.sigmoid(logits))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _target_array(target) -> np.ndarray:
    values = getattr(target, "values", target)
    return np.asarray(values, dtype=np.float64)


def dice_loss(probs, target, smoothing: float = DICE_SMOOTHING):
    """1 - (2*sum(p*g)+eps) / (sum(p^2)+sum(g^2)+eps), squared-denominator form."""
    g = _target_array(target)
    if tuple(probs.shape) != g.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs target {g.shape}")
    inter = nm.tsum(nm.mul(probs, g))
    psq = nm.tsum(nm.mul(probs, probs))
    gsq = float((g * g).sum())
    numer = nm.add(nm.mul(inter, 2.0), smoothing)
    denom = nm.add(psq, gsq + smoothing)
    return nm.sub(1.0, nm.div(numer, denom))


def bce_loss(probs, target):
    """Mean binary cross-entropy of probabilities, logs clamped at 1e-12."""
    g = _target_array(target)
    if tuple(probs.shape) != g.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs target {g.shape}")
    pos = nm.mul(nm.clamped_log(probs), g)
    neg = nm.mul(nm.clamped_log(nm.sub(1.0, probs)), 1.0 - g)
    return nm.mul(nm.tmean(nm.add(pos, neg)), -1.0)


def mask_loss(pred: PredictedMask, target):
    """Dice + binary cross-entropy against a {0,1} ground-truth mask."""
    return nm.add(dice_loss(pred.probs, target), bce_loss(pred.probs, target))


# ---------------------------------------------------------------------------
# full head
# ---------------------------------------------------------------------------


def mgm_forward(
    tap: LayerTap,
    params: Mapping,
    cfg: MGMConfig,
    grid: tuple[int, int],
    tile_side: int,
    record_attention: bool = True,
) -> tuple[PredictedMask, AttentionRecord]:
    """Stacked cross-attention layers (unshared weights) over the tapped
    states, then 2-D re-organization and deconvolution to tile resolution."""
    g_h, g_w = grid
    v = tap.v
    if v.shape[0] != g_h * g_w:
        raise ShapeMismatch(f"tap has {v.shape[0]} visual states for a {g_h}x{g_w} grid")
    h = tap.language()
    record = AttentionRecord() if record_attention else None
    for i in range(cfg.layers):
        v = cross_attention_layer(v, h, params, f"mgm.layer{i}.", cfg, record)
    pred = deconv_decode(reorg_2d(v, g_h, g_w), params, cfg, tile_side)
    return pred, (record if record is not None else AttentionRecord())
