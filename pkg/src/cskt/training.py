"""Three-stage training pipeline with bit-exact checkpoints.

Stages: (1) cross-entropy pretraining on mixed-language statement items,
(2) similarity-loss training on parallel statement pairs with CE on the
target language, (3) QA-format fine-tuning on parallel pairs with CE on both
languages. One encoder and head are shared across all stages; the checkpoint
is the sharing mechanism.

Determinism contract: (seed, config, data) fully determine every logged
number and the final checkpoint bytes. Batch composition is a pure function
of (seed, step), so resuming from a checkpoint reproduces an uninterrupted
run exactly. The optimizer's step counter is global across stages for bias
correction; the learning-rate schedule is local to each stage.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .data import SOURCE_LANG, Example, ParallelPair, Vocab
from .encoder import EncoderWeights
from .head import HeadWeights, ItemTerms, LossWeights, joint_loss, loss_align, loss_diff, loss_nc
from .model import Model, ModelConfig
from .tensor import (
    NonFiniteError,
    Tensor,
    backward,
    no_grad,
    tensor_from_bytes,
    tensor_to_bytes,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_COLUMNS = ("step", "lr", "ce", "align", "diff", "nc", "total", "dev_acc_src", "dev_acc_tgt")

__all__ = [
    "TrainConfig", "OptimizerState", "Checkpoint", "DivergenceError",
    "CheckpointFormatError", "lr_at", "batch_indices", "init_optimizer",
    "optimizer_step", "initial_checkpoint", "save_checkpoint", "load_checkpoint",
    "run_stage1", "run_stage2", "run_stage3", "LOG_COLUMNS",
]


class DivergenceError(ArithmeticError):
    """Training hit a non-finite loss, gradient or parameter."""


@dataclass
class TrainConfig:
    stage: int
    total_steps: int
    batch_size: int
    lr: float = 3e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    loss_weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 0  # 0 disables periodic dev evaluation
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.warmup_steps < 0 or self.eval_every < 0 or self.seed < 0:
            raise ValueError("warmup_steps, eval_every and seed must be non-negative")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be smaller than total_steps")

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["loss_weights"] = dict(self.loss_weights.__dict__)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["loss_weights"] = LossWeights(**obj["loss_weights"])
        return cls(**obj)


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate applied at stage-local step ``step`` (1-based).

    Linear warmup to the base rate over ``warmup_steps``, then linear decay
    reaching exactly 0 at ``total_steps``.
    """
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if config.total_steps == 0:
        return 0.0
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        return config.lr * step / config.warmup_steps
    return config.lr * (config.total_steps - step) / (config.total_steps - config.warmup_steps)


def batch_indices(n_items: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Item indices of batch ``step`` (0-based): a pure function of its inputs.

    Items are consumed epoch-wise; each epoch is an independent seeded
    permutation, so any step's batch is recomputable without RNG state.
    """
    if n_items < 1:
        raise ValueError("no items to batch")
    perms: dict[int, np.ndarray] = {}
    out = []
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, offset = divmod(pos, n_items)
        if epoch not in perms:
            rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
            perms[epoch] = rng.permutation(n_items)
        out.append(int(perms[epoch][offset]))
    return out


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0  # global step count, shared across stages


def init_optimizer(params: dict[str, Tensor]) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
    )


def optimizer_step(params: dict[str, Tensor], state: OptimizerState,
                   lr_value: float, weight_decay: float) -> None:
    """One in-place adaptive update; a parameter without a gradient gets zero
    gradient (its moments decay and weight decay still applies)."""
    state.t += 1
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
        K.adamw_update(p.data, g, state.m[name], state.v[name], state.t,
                       lr_value, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, weight_decay)
        if not np.all(np.isfinite(p.data)):
            raise DivergenceError(f"non-finite parameter {name} after update {state.t}")


# -- checkpoint --------------------------------------------------------------

CHECKPOINT_MAGIC = b"CSKTCKPT"
CHECKPOINT_FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Corrupt, truncated or wrong-version checkpoint file."""


@dataclass
class Checkpoint:
    stage: int            # 0 = freshly initialised, else last trained stage
    global_step: int      # optimizer steps across all stages
    stage_step: int       # steps completed within `stage`
    model_config: ModelConfig
    vocab_tokens: list[str]
    train_config: dict | None
    params: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    opt_m: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, opt: OptimizerState, stage: int,
                   stage_step: int, train_config: TrainConfig | None) -> "Checkpoint":
        return cls(
            stage=stage, global_step=opt.t, stage_step=stage_step,
            model_config=model.config,
            vocab_tokens=model.vocab.non_reserved(),
            train_config=train_config.to_dict() if train_config else None,
            params={n: p.data.copy() for n, p in model.parameters().items()},
            opt_m={n: a.copy() for n, a in opt.m.items()},
            opt_v={n: a.copy() for n, a in opt.v.items()},
        )

    def build_model(self) -> tuple[Model, OptimizerState]:
        """Live model and optimizer state backed by copies of the stored arrays."""
        vocab = Vocab(self.vocab_tokens)
        enc_params = {n[len("encoder."):]: Tensor(a.copy(), requires_grad=True)
                      for n, a in self.params.items() if n.startswith("encoder.")}
        head_params = {n[len("head."):]: Tensor(a.copy(), requires_grad=True)
                       for n, a in self.params.items() if n.startswith("head.")}
        model = Model(
            EncoderWeights(self.model_config.encoder, enc_params),
            HeadWeights(self.model_config.head, head_params),
            vocab,
        )
        opt = OptimizerState(
            m={n: a.copy() for n, a in self.opt_m.items()},
            v={n: a.copy() for n, a in self.opt_v.items()},
            t=self.global_step,
        )
        return model, opt


def initial_checkpoint(model_config: ModelConfig, vocab: Vocab) -> Checkpoint:
    """Stage-0 checkpoint: seeded initial weights, zeroed optimizer."""
    model = Model.build(model_config, vocab)
    opt = init_optimizer(model.parameters())
    return Checkpoint.from_model(model, opt, stage=0, stage_step=0, train_config=None)


def _config_blob(cp: Checkpoint) -> bytes:
    obj = {"model": cp.model_config.to_dict(), "vocab": cp.vocab_tokens,
           "train": cp.train_config}
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(cp: Checkpoint, path) -> None:
    """Single binary container; identical checkpoints produce identical bytes."""
    blob = _config_blob(cp)
    records = (
        [("param/" + n, a) for n, a in cp.params.items()]
        + [("m/" + n, a) for n, a in cp.opt_m.items()]
        + [("v/" + n, a) for n, a in cp.opt_v.items()]
    )
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sII", CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION, cp.stage))
        fh.write(struct.pack("<QQ", cp.global_step, cp.stage_step))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(tensor_to_bytes(arr))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(buf):
            raise CheckpointFormatError(f"truncated checkpoint at byte {offset}")
        chunk = buf[offset: offset + n]
        offset += n
        return chunk

    magic, version, stage = struct.unpack("<8sII", take(16))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointFormatError(
            f"checkpoint format version {version} unsupported (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    global_step, stage_step = struct.unpack("<QQ", take(16))
    (blob_len,) = struct.unpack("<Q", take(8))
    try:
        obj = json.loads(take(blob_len).decode("utf-8"))
        model_config = ModelConfig.from_dict(obj["model"])
        vocab_tokens = list(obj["vocab"])
        train_config = obj["train"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"bad config block: {exc}") from exc
    (n_records,) = struct.unpack("<I", take(4))
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
    for _ in range(n_records):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        try:
            arr, offset = tensor_from_bytes(buf, offset)
        except ValueError as exc:
            raise CheckpointFormatError(f"bad tensor record {name!r}: {exc}") from exc
        kind, _, pname = name.partition("/")
        if kind not in groups or not pname:
            raise CheckpointFormatError(f"unknown record name {name!r}")
        groups[kind][pname] = arr
    if offset != len(buf):
        raise CheckpointFormatError(f"{len(buf) - offset} trailing bytes in checkpoint")
    if set(groups["param"]) != set(groups["m"]) or set(groups["param"]) != set(groups["v"]):
        raise CheckpointFormatError("parameter and optimizer record names disagree")
    return Checkpoint(
        stage=stage, global_step=global_step, stage_step=stage_step,
        model_config=model_config, vocab_tokens=vocab_tokens, train_config=train_config,
        params=groups["param"], opt_m=groups["m"], opt_v=groups["v"],
    )


# -- training loop -----------------------------------------------------------


def _format_value(x: float) -> str:
    return "%.17g" % x


class _LogWriter:
    def __init__(self, path):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path and (not self.path.exists() or self.path.stat().st_size == 0):
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(",".join(LOG_COLUMNS) + "\n", encoding="utf-8")

    def row(self, step, lr, parts, total, dev_src=None, dev_tgt=None):
        rec = {"step": step, "lr": lr, **parts, "total": total,
               "dev_acc_src": dev_src, "dev_acc_tgt": dev_tgt}
        self.rows.append(rec)
        if self.path:
            cells = [str(step), _format_value(lr)]
            cells += [_format_value(parts[k]) for k in ("ce", "align", "diff", "nc")]
            cells.append(_format_value(total))
            cells.append("" if dev_src is None else _format_value(dev_src))
            cells.append("" if dev_tgt is None else _format_value(dev_tgt))
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(",".join(cells) + "\n")


def _accuracy(model: Model, examples, encoding: str) -> float:
    with no_grad():
        hits = sum(model.predict(ex, encoding) == ex.gold for ex in examples)
    return hits / len(examples)


def _terms_single(model: Model, ex: Example, lang_src: bool) -> ItemTerms:
    cs = model.forward_choice_set(ex, "statement")
    ce = model.ce_loss(cs, ex.gold)
    return ItemTerms(ce_src=ce) if lang_src else ItemTerms(ce_tgt=ce)


def _terms_pair(model: Model, pair: ParallelPair, lw: LossWeights,
                encoding: str, stage: int) -> ItemTerms:
    cs_src = model.forward_choice_set(pair.source, encoding)
    cs_tgt = model.forward_choice_set(pair.target, encoding)
    gold = pair.source.gold
    terms = ItemTerms()
    if lw.ce > 0:
        if stage == 3:
            terms.ce_src = model.ce_loss(cs_src, gold)
        terms.ce_tgt = model.ce_loss(cs_tgt, gold)
    if lw.align > 0:
        terms.align = loss_align(cs_src.outputs[gold].x, cs_tgt.outputs[gold].x)
    if lw.diff > 0:
        terms.diff = loss_diff([o.x for o in cs_src.outputs],
                               [o.x for o in cs_tgt.outputs], gold)
    if lw.nc > 0:
        terms.nc = loss_nc([o.x_nc for o in cs_src.outputs],
                           [o.x_nc for o in cs_tgt.outputs], gold)
    return terms


def _train(model: Model, opt: OptimizerState, config: TrainConfig, items,
           make_terms, encoding: str, dev, log_path, start_step: int,
           max_steps: int | None) -> int:
    params = model.parameters()
    log = _LogWriter(log_path)
    end_step = config.total_steps
    if max_steps is not None:
        end_step = min(end_step, start_step + max_steps)

    for step in range(start_step, end_step):
        for p in params.values():
            p.zero_grad()
        batch = [items[i] for i in batch_indices(len(items), config.batch_size,
                                                 config.seed, step)]
        try:
            terms = [make_terms(model, item) for item in batch]
            total, parts = joint_loss(terms, config.loss_weights, config.stage)
            total_value = total.item()
            if not np.isfinite(total_value):
                raise NonFiniteError(f"loss value {total_value}")
            backward(total)
        except NonFiniteError as exc:
            raise DivergenceError(
                f"stage {config.stage} step {step + 1}: {exc}; aborting (NaN policy)"
            ) from exc
        lr_value = lr_at(step + 1, config)
        optimizer_step(params, opt, lr_value, config.weight_decay)

        dev_src = dev_tgt = None
        if dev is not None and config.eval_every and (step + 1) % config.eval_every == 0:
            dev_src = _accuracy(model, dev[0], encoding)
            dev_tgt = _accuracy(model, dev[1], encoding)
        log.row(step + 1, lr_value, parts, total_value, dev_src, dev_tgt)
    return end_step


def _resume_start(checkpoint: Checkpoint, config: TrainConfig) -> int:
    return checkpoint.stage_step if checkpoint.stage == config.stage else 0


def run_stage1(config: TrainConfig, train_items, dev=None, checkpoint: Checkpoint | None = None,
               model_config: ModelConfig | None = None, vocab: Vocab | None = None,
               log_path=None, max_steps: int | None = None) -> Checkpoint:
    """Cross-entropy pretraining on mixed-language statement items.

    ``train_items`` is one pool of Examples from both language roles. Starts
    from ``checkpoint`` when given, else initialises from ``model_config`` and
    ``vocab``. ``dev`` is an optional (source, target) example-list pair.
    """
    if config.stage != 1:
        raise ValueError(f"run_stage1 got a stage-{config.stage} config")
    if not train_items:
        raise ValueError("no training items")
    if checkpoint is None:
        if model_config is None or vocab is None:
            raise ValueError("need either a checkpoint or model_config plus vocab")
        checkpoint = initial_checkpoint(model_config, vocab)
    model, opt = checkpoint.build_model()

    def make_terms(m, ex):
        return _terms_single(m, ex, ex.lang == SOURCE_LANG)

    start = _resume_start(checkpoint, config)
    end = _train(model, opt, config, train_items, make_terms, "statement",
                 dev, log_path, start, max_steps)
    return Checkpoint.from_model(model, opt, config.stage, end, config)


def _run_pair_stage(stage: int, encoding: str, checkpoint: Checkpoint, config: TrainConfig,
                    pairs, dev, log_path, max_steps) -> Checkpoint:
    if config.stage != stage:
        raise ValueError(f"run_stage{stage} got a stage-{config.stage} config")
    if not pairs:
        raise ValueError("no training pairs")
    for p in pairs:
        if not isinstance(p, ParallelPair):
            raise ValueError(f"expected ParallelPair items, got {type(p).__name__}")
    model, opt = checkpoint.build_model()

    def make_terms(m, pair):
        return _terms_pair(m, pair, config.loss_weights, encoding, stage)

    start = _resume_start(checkpoint, config)
    end = _train(model, opt, config, pairs, make_terms, encoding,
                 dev, log_path, start, max_steps)
    return Checkpoint.from_model(model, opt, config.stage, end, config)


def run_stage2(checkpoint: Checkpoint, config: TrainConfig, pairs, dev=None,
               log_path=None, max_steps: int | None = None) -> Checkpoint:
    """Similarity-loss training on parallel statement pairs (CE on target side)."""
    return _run_pair_stage(2, "statement", checkpoint, config, pairs, dev, log_path, max_steps)


def run_stage3(checkpoint: Checkpoint, config: TrainConfig, pairs, dev=None,
               log_path=None, max_steps: int | None = None) -> Checkpoint:
    """QA-format fine-tuning on parallel pairs with CE on both languages."""
    return _run_pair_stage(3, "qa", checkpoint, config, pairs, dev, log_path, max_steps)
