"""Gated split head: commonsense / non-commonsense extraction and losses.

The head turns encoder states O (one row per real token) into two pooled
embeddings. A per-token gate ``alpha_t`` decides how much of each token goes
into the "commonsense" pool; the complement ``1 - alpha_t`` feeds the
"non-commonsense" pool. Each pool passes through its own projection FFN,
giving X (choice-discriminating, cross-lingual) and X~ (shared residual).

Losses on these embeddings:

* ``loss_align``   : 1 - cos(X_src_gold, X_tgt_gold)
* ``loss_diff``    : hinged cosines between gold and distractor X within
  each language
* ``loss_nc``      : cosine closeness of X~ across choices within each
  language and across languages on the gold choice
* ``choice_logits``: linear classifier over X per choice
* ``joint_loss``   : stage-aware weighted combination, batch-averaged

All functions build autograd graphs; scalars come back as 0-d tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, cosine_similarity, relu, sigmoid, softmax, stack, tmean, tsum

__all__ = [
    "HeadConfig", "HeadWeights", "HeadOutputs", "LossWeights", "ItemTerms",
    "LOSS_PRESETS", "init_head", "attention_gates", "complement_gates",
    "extract", "loss_align", "loss_diff", "loss_nc", "choice_logits",
    "predict_index", "joint_loss",
]

POOL_DENOM_FLOOR = 1e-9


@dataclass
class HeadConfig:
    d_model: int
    d_embed: int | None = None
    gate_mode: str = "sigmoid"  # or "softmax": gates softmax-normalised over tokens
    seed: int = 0

    def __post_init__(self):
        if self.d_model < 1:
            raise ValueError("d_model must be positive")
        if self.d_embed is None:
            self.d_embed = self.d_model
        if self.d_embed < 1:
            raise ValueError("d_embed must be positive")
        if self.gate_mode not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown gate_mode {self.gate_mode!r}")


class HeadWeights:
    """Named parameter tensors; the two projection FFNs never share."""

    def __init__(self, config: HeadConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> dict[str, Tensor]:
        return self.params


def init_head(config: HeadConfig) -> HeadWeights:
    """Seed-deterministic init matching the encoder conventions."""
    rng = np.random.default_rng(config.seed)
    bound = 1.0 / math.sqrt(config.d_model)
    d, e = config.d_model, config.d_embed
    params: dict[str, Tensor] = {}

    def uniform(name, shape):
        params[name] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    uniform("gate.w", (d,))
    zeros("gate.b", ())
    for side in ("ffn_c", "ffn_nc"):
        uniform(f"{side}.w1", (d, d))
        zeros(f"{side}.b1", (d,))
        uniform(f"{side}.w2", (d, e))
        zeros(f"{side}.b2", (e,))
    uniform("cls.w", (e,))
    zeros("cls.b", ())
    return HeadWeights(config, params)


@dataclass
class HeadOutputs:
    gates: Tensor           # (k,) in (0,1), one per real token
    x: Tensor               # commonsense embedding (d_embed,)
    x_nc: Tensor            # non-commonsense embedding (d_embed,)
    logit: Tensor | None = None  # scalar choice score, set by the classifier


def _active_rows(o: Tensor, pad_mask) -> Tensor:
    """Rows of O covered by the pad mask; O from the encoder is already trimmed,
    so ``pad_mask=None`` means every row is real."""
    if o.ndim != 2:
        raise ValueError(f"encoder states must be 2-d, got shape {o.shape}")
    if pad_mask is None:
        return o
    mask = list(pad_mask)
    if len(mask) < o.shape[0]:
        raise ValueError(f"pad mask length {len(mask)} shorter than {o.shape[0]} state rows")
    if any(mask[o.shape[0]:]):
        raise ValueError("pad mask marks tokens beyond the provided states")
    k = sum(1 for m in mask[: o.shape[0]] if m)
    if k == 0:
        raise ValueError("all-padding input: no token to pool")
    if any(not m for m in mask[:k]):
        raise ValueError("pad mask must cover a prefix of the state rows")
    return o if k == o.shape[0] else o[0:k, :]


def attention_gates(o: Tensor, pad_mask, weights: HeadWeights) -> Tensor:
    """Per-token gate values in (0,1) over the non-pad tokens."""
    o = _active_rows(o, pad_mask)
    scores = o @ weights["gate.w"] + weights["gate.b"]
    if weights.config.gate_mode == "softmax":
        return softmax(scores)
    return sigmoid(scores)


def complement_gates(gates: Tensor) -> Tensor:
    return 1.0 - gates


def _pool(o: Tensor, gates: Tensor) -> Tensor:
    denom = tsum(gates)
    if denom.item() <= POOL_DENOM_FLOOR:
        raise AssertionError(
            f"gate mass {denom.item():.3e} below {POOL_DENOM_FLOOR}; "
            "cannot pool (softmax gates on a single token leave no complement)"
        )
    return (gates @ o) / denom


def _ffn(p: Tensor, weights: HeadWeights, side: str) -> Tensor:
    h = relu(p @ weights[f"{side}.w1"] + weights[f"{side}.b1"])
    return h @ weights[f"{side}.w2"] + weights[f"{side}.b2"]


def extract(o: Tensor, pad_mask, weights: HeadWeights) -> HeadOutputs:
    """Gate, pool, and project the states into (X, X~)."""
    o = _active_rows(o, pad_mask)
    gates = attention_gates(o, None, weights)
    pool_c = _pool(o, gates)
    pool_nc = _pool(o, complement_gates(gates))
    return HeadOutputs(
        gates=gates,
        x=_ffn(pool_c, weights, "ffn_c"),
        x_nc=_ffn(pool_nc, weights, "ffn_nc"),
    )


# -- similarity losses -------------------------------------------------------


def loss_align(x_src_gold: Tensor, x_tgt_gold: Tensor) -> Tensor:
    """1 - cos of the two gold commonsense embeddings; range [0, 2]."""
    return 1.0 - cosine_similarity(x_src_gold, x_tgt_gold)


def _check_choice_lists(xs_src, xs_tgt, gold: int):
    if len(xs_src) != len(xs_tgt):
        raise ValueError(f"choice lists differ in length: {len(xs_src)} vs {len(xs_tgt)}")
    if len(xs_src) < 2:
        raise ValueError("need at least 2 choices")
    if not 0 <= gold < len(xs_src):
        raise IndexError(f"gold index {gold} out of range for {len(xs_src)} choices")


def loss_diff(xs_src, xs_tgt, gold: int) -> Tensor:
    """Hinged gold-distractor cosines within each language; range [0, 2(|C|-1)]."""
    _check_choice_lists(xs_src, xs_tgt, gold)
    total = None
    for xs in (xs_src, xs_tgt):
        for j, x in enumerate(xs):
            if j == gold:
                continue
            term = relu(cosine_similarity(xs[gold], x))
            total = term if total is None else total + term
    return total


def loss_nc(xs_src, xs_tgt, gold: int) -> Tensor:
    """Closeness of non-commonsense embeddings; range [0, 2(2|C|-1)]."""
    _check_choice_lists(xs_src, xs_tgt, gold)
    total = None
    for xs in (xs_src, xs_tgt):
        for j, x in enumerate(xs):
            if j == gold:
                continue
            term = 1.0 - cosine_similarity(xs[gold], x)
            total = term if total is None else total + term
    cross = 1.0 - cosine_similarity(xs_src[gold], xs_tgt[gold])
    return total + cross


# -- classification ----------------------------------------------------------


def choice_logits(x_list, weights: HeadWeights) -> Tensor:
    """logit[j] = w_cls . X_j + b for each choice; shape (|C|,)."""
    if not x_list:
        raise ValueError("empty choice list")
    return stack([x @ weights["cls.w"] + weights["cls.b"] for x in x_list])


def predict_index(logits: Tensor) -> int:
    """Argmax with ties broken by the lowest index."""
    return int(np.argmax(logits.data))


# -- joint objective ---------------------------------------------------------


@dataclass
class LossWeights:
    ce: float = 1.0
    align: float = 1.0
    diff: float = 1.0
    nc: float = 1.0

    def __post_init__(self):
        for name in ("ce", "align", "diff", "nc"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.ce == self.align == self.diff == self.nc == 0:
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        try:
            return cls(**LOSS_PRESETS[name])
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(LOSS_PRESETS)}") from None


# ablation rows: cross entropy always on, similarity losses toggled
LOSS_PRESETS = {
    "base": dict(ce=1.0, align=0.0, diff=0.0, nc=0.0),
    "align": dict(ce=1.0, align=1.0, diff=0.0, nc=0.0),
    "align+diff": dict(ce=1.0, align=1.0, diff=1.0, nc=0.0),
    "nc": dict(ce=1.0, align=0.0, diff=0.0, nc=1.0),
    "align+nc": dict(ce=1.0, align=1.0, diff=0.0, nc=1.0),
}


@dataclass
class ItemTerms:
    """Per-item loss terms; fields stay None when a stage does not produce them."""

    ce_src: Tensor | None = None
    ce_tgt: Tensor | None = None
    align: Tensor | None = None
    diff: Tensor | None = None
    nc: Tensor | None = None


def _batch_mean(terms) -> Tensor:
    return tmean(stack(terms)) if len(terms) > 1 else terms[0]


def joint_loss(items, weights: LossWeights, stage: int):
    """Weighted stage objective over a batch.

    Returns ``(total, parts)``: the scalar graph tensor and a dict of the
    unweighted batch-mean value of each term ("ce", "align", "diff", "nc").
    Disabled terms are skipped entirely and reported as exact 0.0. Stage 1
    uses cross entropy only; stage 2 takes CE on the target language; stage 3
    sums CE over both languages.
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"unknown stage {stage}")
    if not items:
        raise ValueError("empty batch")

    parts = {"ce": 0.0, "align": 0.0, "diff": 0.0, "nc": 0.0}
    total = None

    def accumulate(term_mean: Tensor, weight: float):
        nonlocal total
        weighted = term_mean * weight
        total = weighted if total is None else total + weighted

    if weights.ce > 0:
        ce_terms = []
        for i, it in enumerate(items):
            if stage == 1:
                present = [t for t in (it.ce_src, it.ce_tgt) if t is not None]
                if not present:
                    raise ValueError(f"item {i}: stage 1 needs a cross-entropy term")
                ce = present[0] if len(present) == 1 else present[0] + present[1]
            elif stage == 2:
                if it.ce_tgt is None:
                    raise ValueError(f"item {i}: stage 2 needs target-language cross entropy")
                ce = it.ce_tgt
            else:
                if it.ce_src is None or it.ce_tgt is None:
                    raise ValueError(f"item {i}: stage 3 needs cross entropy in both languages")
                ce = it.ce_src + it.ce_tgt
            ce_terms.append(ce)
        mean = _batch_mean(ce_terms)
        parts["ce"] = mean.item()
        accumulate(mean, weights.ce)

    if stage > 1:
        for name in ("align", "diff", "nc"):
            weight = getattr(weights, name)
            if weight == 0:
                continue
            terms = []
            for i, it in enumerate(items):
                term = getattr(it, name)
                if term is None:
                    raise ValueError(f"item {i}: {name} loss enabled but not computed")
                terms.append(term)
            mean = _batch_mean(terms)
            parts[name] = mean.item()
            accumulate(mean, weight)

    if total is None:
        raise ValueError(f"no loss terms active for stage {stage} with weights {weights}")
    return total, parts
