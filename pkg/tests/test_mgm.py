"""Mask-head tests: block oracles, decode chain, loss corner cases, gradients."""

import math

import numpy as np
import pytest

from maskalign import mgm
from maskalign import numerics as nm
from maskalign.mgm import MGMConfig, PredictedMask
from maskalign.numerics import ParamSet, Tensor
from maskalign.tinyllm import LayerTap


def make_tap(n, lm, d, seed=0, l_split=None):
    rng = nm.new_rng(seed)
    l_split = lm // 2 if l_split is None else l_split
    return LayerTap(
        layer=1,
        v=Tensor(rng.normal(size=(n, d))),
        q=Tensor(rng.normal(size=(l_split, d))),
        a=Tensor(rng.normal(size=(lm - l_split, d))),
    )


def layer_params(cfg, seed=0):
    return mgm.init_mgm_params(cfg, 4, 4 * 2 ** mgm.num_deconv_layers(4, 64, 2), nm.new_rng(seed))


# ---------------------------------------------------------------------------
# cross_attention_layer
# ---------------------------------------------------------------------------


def test_single_language_token_uniform_attention():
    cfg = MGMConfig(layers=1, heads=2, d=8, d_ff=8)
    params = mgm.init_mgm_params(cfg, 2, 4, nm.new_rng(1))
    tap = make_tap(4, 1, 8, seed=2, l_split=1)
    record = mgm.AttentionRecord()
    mgm.cross_attention_layer(tap.v, tap.language(), params, "mgm.layer0.", cfg, record)
    assert np.array_equal(record.layers[0], np.ones((2, 4, 1)))


def test_zero_weights_reduce_to_residual():
    cfg = MGMConfig(layers=1, heads=2, d=8, d_ff=8)
    params = {
        k: Tensor(np.zeros_like(v.data))
        for k, v in mgm.init_mgm_params(cfg, 2, 4, nm.new_rng(3)).items()
    }
    tap = make_tap(3, 4, 8, seed=4)
    out = mgm.cross_attention_layer(tap.v, tap.language(), params, "mgm.layer0.", cfg)
    assert np.array_equal(out.data, tap.v.data)


def ref_cross_attention(v, h, raw, prefix, cfg):
    """Straight-loop reference for one block."""
    n, m, d, heads, dh = v.shape[0], h.shape[0], cfg.d, cfg.heads, cfg.d_head

    def ln(x, g, b, eps=1e-5):
        out = np.zeros_like(x)
        for i in range(x.shape[0]):
            mu = x[i].mean()
            var = ((x[i] - mu) ** 2).mean()
            out[i] = g * ((x[i] - mu) / math.sqrt(var + eps)) + b
        return out

    normed = ln(v, raw[prefix + "lnq_g"], raw[prefix + "lnq_b"])
    q = normed @ raw[prefix + "wq"]
    k = h @ raw[prefix + "wk"]
    val = h @ raw[prefix + "wv"]
    attn = np.zeros((n, d))
    for head in range(heads):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(n):
            scores = np.array([np.dot(q[i, sl], k[j, sl]) / math.sqrt(dh) for j in range(m)])
            e = np.exp(scores - scores.max())
            w = e / e.sum()
            for j in range(m):
                attn[i, sl] += w[j] * val[j, sl]
    v = v + attn
    normed = ln(v, raw[prefix + "lnf_g"], raw[prefix + "lnf_b"])
    ff = np.maximum(normed @ raw[prefix + "ff_w1"] + raw[prefix + "ff_b1"], 0.0)
    return v + ff @ raw[prefix + "ff_w2"] + raw[prefix + "ff_b2"]


def test_cross_attention_matches_straight_loop():
    cfg = MGMConfig(layers=1, heads=2, d=8, d_ff=12)
    params = mgm.init_mgm_params(cfg, 2, 4, nm.new_rng(5))
    tap = make_tap(4, 3, 8, seed=6, l_split=2)
    got = mgm.cross_attention_layer(tap.v, tap.language(), params, "mgm.layer0.", cfg)
    raw = {k: v.data for k, v in params.items()}
    expect = ref_cross_attention(
        tap.v.data, np.concatenate([tap.q.data, tap.a.data]), raw, "mgm.layer0.", cfg
    )
    assert np.max(np.abs(got.data - expect)) < 1e-9


def test_attention_rows_sum_to_one():
    cfg = MGMConfig()
    params = mgm.init_mgm_params(cfg, 4, 64, nm.new_rng(7))
    tap = make_tap(16, 9, cfg.d, seed=8)
    _, record = mgm.mgm_forward(tap, params, cfg, (4, 4), 64)
    assert len(record.layers) == cfg.layers
    for weights in record.layers:
        assert np.all(weights >= 0)
        assert np.max(np.abs(weights.sum(axis=-1) - 1.0)) < 1e-12


def test_key_permutation_equivariance():
    cfg = MGMConfig(layers=1, heads=2, d=8, d_ff=8)
    params = mgm.init_mgm_params(cfg, 2, 4, nm.new_rng(9))
    tap = make_tap(4, 5, 8, seed=10)
    h = tap.language().data
    out = mgm.cross_attention_layer(tap.v, Tensor(h), params, "mgm.layer0.", cfg)
    perm = nm.new_rng(11).permutation(5)
    out_p = mgm.cross_attention_layer(tap.v, Tensor(h[perm]), params, "mgm.layer0.", cfg)
    assert np.max(np.abs(out.data - out_p.data)) < 1e-12


# ---------------------------------------------------------------------------
# reorg_2d
# ---------------------------------------------------------------------------


def test_reorg_roundtrip_identity():
    v = nm.new_rng(12).normal(size=(12, 5))
    feat = mgm.reorg_2d(v, 3, 4)
    back = np.transpose(feat, (1, 2, 0)).reshape(12, 5)
    assert np.array_equal(back, v)


def test_reorg_single_token():
    v = np.array([[1.0, 2.0, 3.0]])
    feat = mgm.reorg_2d(v, 1, 1)
    assert feat.shape == (3, 1, 1)
    assert feat[:, 0, 0].tolist() == [1.0, 2.0, 3.0]


def test_reorg_row_major_layout():
    g_h, g_w = 3, 4
    v = np.arange(g_h * g_w, dtype=np.float64)[:, None]  # token i carries value i
    feat = mgm.reorg_2d(v, g_h, g_w)
    for r in range(g_h):
        for c in range(g_w):
            assert feat[0, r, c] == r * g_w + c


def test_reorg_rejects_bad_grid():
    with pytest.raises(nm.ShapeMismatch):
        mgm.reorg_2d(np.zeros((5, 2)), 2, 2)


# ---------------------------------------------------------------------------
# deconv_decode
# ---------------------------------------------------------------------------


def test_decode_zero_everything_gives_half_probs():
    cfg = MGMConfig(d=8)
    params = {
        k: Tensor(np.zeros_like(v.data))
        for k, v in mgm.init_mgm_params(cfg, 4, 16, nm.new_rng(13)).items()
    }
    pred = mgm.deconv_decode(np.zeros((8, 4, 4)), params, cfg, 16)
    assert np.all(pred.probs.data == 0.5)


def test_decode_shape_chain_doubles_to_tile():
    cfg = MGMConfig()
    params = mgm.init_mgm_params(cfg, 4, 64, nm.new_rng(14))
    pred = mgm.deconv_decode(nm.new_rng(15).normal(size=(32, 4, 4)), params, cfg, 64)
    assert pred.logits.shape == (64, 64)
    assert mgm.num_deconv_layers(4, 64, 2) == 4  # 4 -> 8 -> 16 -> 32 -> 64


def test_decode_channel_chain_halves_to_one():
    assert mgm.deconv_channel_chain(32, 4) == [(32, 16), (16, 8), (8, 4), (4, 1)]
    assert mgm.deconv_channel_chain(32, 3) == [(32, 16), (16, 8), (8, 1)]


def test_decode_single_layer_matches_primitive_plus_crop():
    cfg = MGMConfig(d=3)
    rng = nm.new_rng(16)
    params = {
        "mgm.deconv0.k": Tensor(rng.normal(size=(3, 1, 4, 4))),
        "mgm.deconv0.b": Tensor(rng.normal(size=(1,))),
    }
    feat = rng.normal(size=(3, 5, 5))
    pred = mgm.deconv_decode(feat, params, cfg, 10)
    manual = nm.transposed_conv2d(feat, params["mgm.deconv0.k"].data, stride=2)
    manual = manual[:, 1:-1, 1:-1] + params["mgm.deconv0.b"].data.reshape(-1, 1, 1)
    assert np.max(np.abs(pred.logits.data - manual[0])) < 1e-12


def test_decode_rejects_non_power_of_two():
    cfg = MGMConfig()
    with pytest.raises(mgm.NonPowerOfTwoUpscale):
        mgm.num_deconv_layers(4, 48, 2)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def hard_pred(values: np.ndarray) -> PredictedMask:
    logits = np.where(values > 0, 1000.0, -1000.0)
    return PredictedMask(logits=Tensor(logits), probs=nm.sigmoid(Tensor(logits)))


def test_mask_loss_perfect_prediction_is_zero():
    target = (nm.new_rng(17).random((6, 6)) > 0.5).astype(np.uint8)
    loss = mgm.mask_loss(hard_pred(target), target)
    assert loss.item() == 0.0


def test_dice_all_zero_vs_all_one_corner_case():
    pred = hard_pred(np.zeros((4, 4)))
    target = np.ones((4, 4), dtype=np.uint8)
    dice = mgm.dice_loss(pred.probs, target)
    assert dice.item() == pytest.approx(16.0 / 17.0, abs=1e-15)


def test_dice_symmetric_on_hard_masks():
    rng = nm.new_rng(18)
    a = (rng.random((5, 5)) > 0.4).astype(np.uint8)
    b = (rng.random((5, 5)) > 0.6).astype(np.uint8)
    d_ab = mgm.dice_loss(hard_pred(a).probs, b).item()
    d_ba = mgm.dice_loss(hard_pred(b).probs, a).item()
    assert d_ab == pytest.approx(d_ba, abs=1e-12)


def test_mask_loss_bounds():
    rng = nm.new_rng(19)
    probs = Tensor(rng.uniform(0.01, 0.99, size=(8, 8)))
    target = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    pred = PredictedMask(logits=probs, probs=probs)
    total = mgm.mask_loss(pred, target).item()
    ce_max = -math.log(1e-12)
    assert 0.0 <= total <= 1.0 + ce_max


def test_mask_loss_shape_mismatch():
    pred = hard_pred(np.zeros((4, 4)))
    with pytest.raises(nm.ShapeMismatch):
        mgm.mask_loss(pred, np.zeros((5, 4), dtype=np.uint8))


# ---------------------------------------------------------------------------
# full head
# ---------------------------------------------------------------------------


def test_mgm_forward_deterministic():
    cfg = MGMConfig()
    params = mgm.init_mgm_params(cfg, 4, 64, nm.new_rng(20))
    tap = make_tap(16, 10, cfg.d, seed=21)
    p1, _ = mgm.mgm_forward(tap, params, cfg, (4, 4), 64)
    p2, _ = mgm.mgm_forward(tap, params, cfg, (4, 4), 64)
    assert np.array_equal(p1.probs.data, p2.probs.data)


def test_mgm_forward_probs_are_sigmoid_of_logits():
    cfg = MGMConfig()
    params = mgm.init_mgm_params(cfg, 4, 64, nm.new_rng(22))
    tap = make_tap(16, 7, cfg.d, seed=23)
    pred, _ = mgm.mgm_forward(tap, params, cfg, (4, 4), 64)
    assert np.array_equal(pred.probs.data, nm.sigmoid(pred.logits.data))
    assert np.all((pred.probs.data > 0) & (pred.probs.data < 1))


def test_grad_check_mask_loss_through_mgm():
    cfg = MGMConfig(layers=2, heads=2, d=8, d_ff=8)
    tile = 8  # grid 2x2 -> 4 -> 8
    pset = ParamSet(mgm.init_mgm_params(cfg, 2, tile, nm.new_rng(24)))
    rng = nm.new_rng(25)
    v, q, a = rng.normal(size=(4, 8)), rng.normal(size=(3, 8)), rng.normal(size=(2, 8))
    target = (rng.random((tile, tile)) > 0.5).astype(np.uint8)

    def tap_for(params):
        return LayerTap(layer=1, v=Tensor(v), q=Tensor(q), a=Tensor(a))

    def loss(p):
        pred, _ = mgm.mgm_forward(tap_for(p), p.tensors, cfg, (2, 2), tile, record_attention=False)
        return mgm.mask_loss(pred, target)

    def value(p):
        raw = {k: t.data for k, t in p.tensors.items()}
        tap = LayerTap(layer=1, v=v, q=q, a=a)
        pred, _ = mgm.mgm_forward(tap, raw, cfg, (2, 2), tile, record_attention=False)
        return float(mgm.mask_loss(pred, target))

    report = nm.grad_check(loss, pset, value_fn=value)
    assert report.ok, report.format_table()


def test_grad_flows_back_into_tap():
    cfg = MGMConfig(layers=1, heads=2, d=8, d_ff=8)
    params = mgm.init_mgm_params(cfg, 2, 8, nm.new_rng(26))
    rng = nm.new_rng(27)
    tap = LayerTap(
        layer=1,
        v=Tensor(rng.normal(size=(4, 8)), requires_grad=True),
        q=Tensor(rng.normal(size=(2, 8)), requires_grad=True),
        a=Tensor(rng.normal(size=(2, 8)), requires_grad=True),
    )
    target = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    pred, _ = mgm.mgm_forward(tap, params, cfg, (2, 2), 8)
    mgm.mask_loss(pred, target).backward()
    for t in (tap.v, tap.q, tap.a):
        assert t.grad is not None and np.any(t.grad != 0)
