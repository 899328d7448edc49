"""Compact pre-norm transformer encoder over token sequences.

``encode`` consumes a :class:`~cskt.data.TokenSequence` and returns the
last-layer hidden state for every real token. Padding is trimmed before any
computation, so padded positions are excluded from attention and pooling by
construction and pad invariance holds exactly, not just approximately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import TokenSequence
from .tensor import Tensor, concat, embedding, layer_norm, relu, softmax

__all__ = ["EncoderConfig", "EncoderWeights", "init_encoder", "encode"]


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.dropout_rate != 0.0:
            # kept as a field for config compatibility; training must be deterministic
            raise ValueError("dropout_rate must be 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class EncoderWeights:
    """Named parameter tensors for one encoder; order is the creation order."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> dict[str, Tensor]:
        return self.params


def init_encoder(config: EncoderConfig) -> EncoderWeights:
    """Seed-deterministic init: weights uniform within 1/sqrt(d_model),
    all biases 0, layer-norm gains 1."""
    rng = np.random.default_rng(config.seed)
    bound = 1.0 / math.sqrt(config.d_model)
    d, f = config.d_model, config.d_ff
    params: dict[str, Tensor] = {}

    def uniform(name, shape):
        params[name] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    uniform("tok_emb", (config.vocab_size, d))
    uniform("pos_emb", (config.max_len, d))
    for i in range(config.n_layers):
        p = f"layer{i}."
        ones(p + "ln1.gain", (d,))
        zeros(p + "ln1.bias", (d,))
        for m in ("wq", "wk", "wv", "wo"):
            uniform(p + "attn." + m, (d, d))
            zeros(p + "attn." + m.replace("w", "b"), (d,))
        ones(p + "ln2.gain", (d,))
        zeros(p + "ln2.bias", (d,))
        uniform(p + "ffn.w1", (d, f))
        zeros(p + "ffn.b1", (f,))
        uniform(p + "ffn.w2", (f, d))
        zeros(p + "ffn.b2", (d,))
    ones("ln_f.gain", (d,))
    zeros("ln_f.bias", (d,))
    return EncoderWeights(config, params)


def _attention(h: Tensor, w: EncoderWeights, prefix: str) -> Tensor:
    cfg = w.config
    q = h @ w[prefix + "wq"] + w[prefix + "bq"]
    k = h @ w[prefix + "wk"] + w[prefix + "bk"]
    v = h @ w[prefix + "wv"] + w[prefix + "bv"]
    scale = 1.0 / math.sqrt(cfg.d_head)
    heads = []
    for i in range(cfg.n_heads):
        lo, hi = i * cfg.d_head, (i + 1) * cfg.d_head
        qh, kh, vh = q[:, lo:hi], k[:, lo:hi], v[:, lo:hi]
        weights = softmax((qh @ kh.T) * scale)
        heads.append(weights @ vh)
    joined = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return joined @ w[prefix + "wo"] + w[prefix + "bo"]


def encode(weights: EncoderWeights, sequence: TokenSequence) -> Tensor:
    """Last-layer hidden states, shape (active length, d_model)."""
    cfg = weights.config
    ids = sequence.trimmed_ids()
    if not ids:
        raise ValueError("cannot encode an all-padding sequence")
    if len(ids) > cfg.max_len:
        raise ValueError(f"sequence length {len(ids)} exceeds max_len {cfg.max_len}")
    bad = [i for i in ids if not 0 <= i < cfg.vocab_size]
    if bad:
        raise IndexError(f"token id {bad[0]} out of range for vocab_size {cfg.vocab_size}")

    x = embedding(weights["tok_emb"], ids) + weights["pos_emb"][0:len(ids), :]
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        h = layer_norm(x, weights[p + "ln1.gain"], weights[p + "ln1.bias"])
        x = x + _attention(h, weights, p + "attn.")
        h2 = layer_norm(x, weights[p + "ln2.gain"], weights[p + "ln2.bias"])
        ffn = relu(h2 @ weights[p + "ffn.w1"] + weights[p + "ffn.b1"]) @ weights[p + "ffn.w2"] + weights[p + "ffn.b2"]
        x = x + ffn
    return layer_norm(x, weights["ln_f.gain"], weights["ln_f.bias"])
