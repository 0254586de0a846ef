"""Minimal causal decoder standing in for the language model.

Character-level toy tokenizer, pre-norm transformer blocks under a
lower-triangular attention mask covering the visual span too, a
hidden-state tap at a chosen layer, and the answer-span negative
log-likelihood used as the text-parsing objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nm
from .numerics import ShapeMismatch, TapOutOfRange, Tensor

PAD, BOS, EOS = 0, 1, 2
_SPECIALS = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>"}
_CHAR_LO, _CHAR_HI = 32, 126  # printable ASCII
_OFFSET = 3
VOCAB_SIZE = _OFFSET + (_CHAR_HI - _CHAR_LO + 1)  # 98

_NEG = -1e9  # additive mask value; exp(_NEG - rowmax) underflows to exactly 0


class UnknownCharacter(ValueError):
    """Text contains a character outside the toy alphabet."""


class IndexOutOfVocab(ValueError):
    """A token id falls outside the vocabulary."""


def char_to_id(ch: str) -> int:
    code = ord(ch)
    if not _CHAR_LO <= code <= _CHAR_HI:
        raise UnknownCharacter(f"character {ch!r} not in the toy alphabet")
    return _OFFSET + code - _CHAR_LO


def encode_chars(text: str) -> list[int]:
    """Bare per-character ids, no specials."""
    return [char_to_id(c) for c in text]


def char_tokenize(text: str) -> list[int]:
    """One id per character, wrapped as [BOS, ..., EOS]; reversible."""
    return [BOS, *encode_chars(text), EOS]


def detokenize(ids: Sequence[int]) -> str:
    chars = []
    for i in ids:
        if i in _SPECIALS:
            continue
        if not _OFFSET <= i < VOCAB_SIZE:
            raise IndexOutOfVocab(f"id {i} outside vocab of {VOCAB_SIZE}")
        chars.append(chr(i - _OFFSET + _CHAR_LO))
    return "".join(chars)


def alphabet_table() -> list[tuple[int, str]]:
    """The published id -> symbol table (specials first, then printable ASCII)."""
    rows = [(i, name) for i, name in sorted(_SPECIALS.items())]
    rows += [(_OFFSET + c - _CHAR_LO, chr(c)) for c in range(_CHAR_LO, _CHAR_HI + 1)]
    return rows


# ---------------------------------------------------------------------------
# model configuration and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LLMConfig:
    layers: int = 4
    d: int = 32
    heads: int = 2
    d_ff: int = 128
    vocab: int = VOCAB_SIZE

    @property
    def d_head(self) -> int:
        return self.d // self.heads


@dataclass
class LayerTap:
    """Hidden states of the visual/question/answer spans at one layer."""

    layer: int
    v: Tensor | np.ndarray
    q: Tensor | np.ndarray
    a: Tensor | np.ndarray

    def language(self):
        """Concatenated question+answer states, the cross-attention memory."""
        return nm.concat([self.q, self.a], axis=0)


@lru_cache(maxsize=8)
def causal_mask(size: int) -> np.ndarray:
    """Lower-triangular permission matrix: entry (i, j) allows j <= i."""
    m = np.tril(np.ones((size, size)))
    m.flags.writeable = False
    return m


@lru_cache(maxsize=8)
def _causal_bias(size: int) -> np.ndarray:
    b = (1.0 - np.tril(np.ones((size, size)))) * _NEG
    b.flags.writeable = False
    return b


@lru_cache(maxsize=16)
def _pos_table(length: int, dim: int) -> np.ndarray:
    t = nm.sinusoid_table(length, dim)
    t.flags.writeable = False
    return t


# The decoder stays frozen during stage-1 training, so its init is the whole
# "language model" and stands in for a pretrained one. Pure white-noise
# weights leave the visual-token -> answer-logit channel too weak to steer
# (attended values are norm-bounded and scatter isotropically), so the
# value/output projections get an identity-dominated "copy what you attend
# to" component, queries/keys stay at full scale so different positions
# attend differently, and the readout is confident enough that a
# well-aligned hidden state can actually saturate a target token.
QK_INIT_SCALE = 1.5
VALUE_ROUTE_GAIN = 2.0
VALUE_ROUTE_NOISE = 0.4
FF_INIT_SCALE = 0.5
HEAD_INIT_SCALE = 3.0


def init_llm_params(cfg: LLMConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, dff = cfg.d, cfg.d_ff
    w = lambda scale, fan_in, shape: Tensor(
        rng.normal(0.0, scale / math.sqrt(fan_in), size=shape)
    )
    route = lambda: Tensor(
        VALUE_ROUTE_GAIN * np.eye(d)
        + rng.normal(0.0, VALUE_ROUTE_NOISE / math.sqrt(d), size=(d, d))
    )
    params: dict[str, Tensor] = {"llm.embed": Tensor(rng.normal(0.0, 1.0, size=(cfg.vocab, d)))}
    for i in range(cfg.layers):
        pre = f"llm.layer{i}."
        params[pre + "ln1_g"] = Tensor(np.ones(d))
        params[pre + "ln1_b"] = Tensor(np.zeros(d))
        params[pre + "wq"] = w(QK_INIT_SCALE, d, (d, d))
        params[pre + "wk"] = w(QK_INIT_SCALE, d, (d, d))
        params[pre + "wv"] = route()
        params[pre + "wo"] = route()
        params[pre + "ln2_g"] = Tensor(np.ones(d))
        params[pre + "ln2_b"] = Tensor(np.zeros(d))
        params[pre + "ff_w1"] = w(FF_INIT_SCALE, d, (d, dff))
        params[pre + "ff_b1"] = Tensor(np.zeros(dff))
        params[pre + "ff_w2"] = w(FF_INIT_SCALE, dff, (dff, d))
        params[pre + "ff_b2"] = Tensor(np.zeros(d))
    params["llm.lnf_g"] = Tensor(np.ones(d))
    params["llm.lnf_b"] = Tensor(np.zeros(d))
    params["llm.head_w"] = w(HEAD_INIT_SCALE, d, (d, cfg.vocab))
    params["llm.head_b"] = Tensor(np.zeros(cfg.vocab))
    return params


def llm_param_names(cfg: LLMConfig) -> list[str]:
    """Names of every language-model tensor (the default stage-1 freeze set)."""
    return list(init_llm_params(cfg, nm.new_rng(0)).keys())


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _multi_head_attention(x, params: Mapping, prefix: str, cfg: LLMConfig, bias: np.ndarray):
    s = x.shape[0]
    h, dh = cfg.heads, cfg.d_head

    def split(t):  # (s, d) -> (h, s, dh)
        return nm.transpose(nm.reshape(t, (s, h, dh)), (1, 0, 2))

    q = split(nm.matmul(x, params[prefix + "wq"]))
    k = split(nm.matmul(x, params[prefix + "wk"]))
    v = split(nm.matmul(x, params[prefix + "wv"]))
    scores = nm.add(
        nm.mul(nm.matmul(q, nm.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh)), bias
    )
    weights = nm.softmax(scores, axis=-1)
    ctx = nm.matmul(weights, v)  # (h, s, dh)
    merged = nm.reshape(nm.transpose(ctx, (1, 0, 2)), (s, cfg.d))
    return nm.matmul(merged, params[prefix + "wo"])


def _block(x, params: Mapping, prefix: str, cfg: LLMConfig, bias: np.ndarray):
    normed = nm.layer_norm(x, params[prefix + "ln1_g"], params[prefix + "ln1_b"])
    x = nm.add(x, _multi_head_attention(normed, params, prefix, cfg, bias))
    normed = nm.layer_norm(x, params[prefix + "ln2_g"], params[prefix + "ln2_b"])
    hidden = nm.relu(nm.add(nm.matmul(normed, params[prefix + "ff_w1"]), params[prefix + "ff_b1"]))
    ff = nm.add(nm.matmul(hidden, params[prefix + "ff_w2"]), params[prefix + "ff_b2"])
    return nm.add(x, ff)


def llm_forward(
    visual_tokens,
    question_ids: Sequence[int],
    answer_ids: Sequence[int],
    params: Mapping,
    cfg: LLMConfig,
    tap_at: int,
):
    """Run the decoder over [visual | question | answer] and tap one layer.

    Returns next-token logits for the answer span (row i predicts
    answer_ids[i] under teacher forcing) plus the tapped hidden states.
    The tap is read-only for downstream consumers: nothing here depends
    on what is later attached to it.
    """
    if not 1 <= tap_at <= cfg.layers:
        raise TapOutOfRange(f"tap {tap_at} outside [1, {cfg.layers}]")
    n = visual_tokens.shape[0]
    l, m = len(question_ids), len(answer_ids)
    if m < 1:
        raise ValueError("answer span must be non-empty")
    if visual_tokens.shape[-1] != cfg.d:
        raise ShapeMismatch(f"visual width {visual_tokens.shape[-1]} != model width {cfg.d}")
    ids = list(question_ids) + list(answer_ids)
    if any(not 0 <= i < cfg.vocab for i in ids):
        raise IndexOutOfVocab(f"token id outside vocab of {cfg.vocab}")
    s = n + l + m

    text = nm.take_rows(params["llm.embed"], ids)
    x = nm.add(nm.concat([visual_tokens, text], axis=0), _pos_table(s, cfg.d))
    bias = _causal_bias(s)

    tap: LayerTap | None = None
    for i in range(cfg.layers):
        x = _block(x, params, f"llm.layer{i}.", cfg, bias)
        if i + 1 == tap_at:
            tap = LayerTap(
                layer=tap_at,
                v=nm.rows(x, 0, n),
                q=nm.rows(x, n, n + l),
                a=nm.rows(x, n + l, s),
            )
    assert tap is not None

    # positions n+l-1 .. s-2 predict the m answer tokens
    pred = nm.rows(x, n + l - 1, s - 1)
    pred = nm.layer_norm(pred, params["llm.lnf_g"], params["llm.lnf_b"])
    logits = nm.add(nm.matmul(pred, params["llm.head_w"]), params["llm.head_b"])
    return logits, tap


def vqa_loss(logits, answer_ids: Sequence[int], vocab: int = VOCAB_SIZE):
    """Teacher-forced mean negative log-likelihood over the answer span."""
    m = logits.shape[0]
    if m < 1:
        raise ValueError("need at least one answer position")
    if len(answer_ids) != m:
        raise ShapeMismatch(f"{m} logit rows vs {len(answer_ids)} answer ids")
    if any(not 0 <= i < vocab for i in answer_ids):
        raise IndexOutOfVocab(f"answer id outside vocab of {vocab}")
    onehot = np.zeros((m, logits.shape[1]))
    onehot[np.arange(m), list(answer_ids)] = 1.0
    picked = nm.tsum(nm.mul(nm.log_softmax(logits, axis=1), onehot))
    return nm.mul(picked, -1.0 / m)


def greedy_decode_step(logits) -> int:
    """Argmax next-token id from the final logit row."""
    data = logits.data if isinstance(logits, Tensor) else logits
    return int(np.argmax(data[-1]))
