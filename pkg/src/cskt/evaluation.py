"""Evaluation protocols and diagnostics.

Accuracy reports broken down by language role and classifier-input mode,
markdown ablation tables with deltas against a named baseline, per-token
attention-gate CSV export, and gate statistics against the synthetic world's
ground-truth token classes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .data import Example
from .head import predict_index
from .model import EVAL_MODES, Model
from .tensor import no_grad
from .training import Checkpoint

# bumped in lockstep with the checkpoint format version
EVAL_SCHEMA_VERSION = 1

__all__ = [
    "EVAL_SCHEMA_VERSION", "EvalReport", "AblationTable", "GateStats",
    "encoding_for_stage", "evaluate", "report_ablation", "export_heatmap",
    "gate_statistics",
]


def encoding_for_stage(stage: int) -> str:
    """Encoding a checkpoint expects: QA form after stage-3 fine-tuning,
    statement form before."""
    return "qa" if stage == 3 else "statement"


def _check_vocab(model: Model, examples) -> None:
    for ex in examples:
        for word in ex.question.split() + [w for c in ex.choices for w in c.split()]:
            if word not in model.vocab:
                raise ValueError(
                    f"vocabulary mismatch: token {word!r} in example {ex.id!r} "
                    "is unknown to the checkpoint"
                )


def _build(checkpoint: Checkpoint, encoding: str | None) -> tuple[Model, str]:
    model, _ = checkpoint.build_model()
    return model, (encoding or encoding_for_stage(checkpoint.stage))


# -- accuracy reports --------------------------------------------------------


@dataclass
class EvalReport:
    """Accuracy of one checkpoint on one dataset under one classifier-input
    mode; per-item predictions are kept so the headline number can be
    recomputed exactly."""

    dataset: str
    lang: str
    mode: str
    accuracy: float  # percent in [0, 100]
    n_items: int
    predictions: list[int] = field(repr=False, default_factory=list)
    golds: list[int] = field(repr=False, default_factory=list)
    model_label: str = ""

    @property
    def headline(self) -> str:
        return f"{self.accuracy:.1f}"

    def recomputed_accuracy(self) -> float:
        correct = sum(p == g for p, g in zip(self.predictions, self.golds))
        return 100.0 * correct / self.n_items

    def to_dict(self) -> dict:
        return {
            "schema_version": EVAL_SCHEMA_VERSION,
            "dataset": self.dataset,
            "lang": self.lang,
            "mode": self.mode,
            "accuracy": round(self.accuracy, 1),
            "n_items": self.n_items,
            "predictions": list(self.predictions),
            "golds": list(self.golds),
            "model_label": self.model_label,
        }


def evaluate(checkpoint: Checkpoint, examples, mode: str, dataset_id: str = "",
             encoding: str | None = None, model_label: str = "") -> EvalReport:
    """Accuracy of ``checkpoint`` on ``examples`` with the chosen embedding
    (commonsense, non-commonsense, or their sum) feeding the classifier.

    The encoding defaults to what the checkpoint's stage implies; pass
    ``encoding`` to override. Raises on an unknown mode, an empty dataset, or
    tokens outside the checkpoint's vocabulary.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {EVAL_MODES}")
    examples = list(examples)
    if not examples:
        raise ValueError("no examples to evaluate")
    model, enc = _build(checkpoint, encoding)
    _check_vocab(model, examples)

    preds, golds = [], []
    with no_grad():
        for ex in examples:
            cs = model.forward_choice_set(ex, enc)
            preds.append(predict_index(model.logits_for_mode(cs, mode)))
            golds.append(ex.gold)
    langs = sorted({ex.lang for ex in examples})
    correct = sum(p == g for p, g in zip(preds, golds))
    return EvalReport(
        dataset=dataset_id,
        lang=langs[0] if len(langs) == 1 else "+".join(langs),
        mode=mode,
        accuracy=100.0 * correct / len(examples),
        n_items=len(examples),
        predictions=preds,
        golds=golds,
        model_label=model_label,
    )


# -- ablation tables ---------------------------------------------------------


@dataclass
class AblationTable:
    """Markdown-renderable accuracy table with deltas against a baseline row."""

    baseline_label: str
    rows: list[tuple[str, float, float | None]]  # (label, accuracy, delta)

    def to_markdown(self) -> str:
        lines = ["| model | accuracy |", "| --- | --- |"]
        for label, acc, delta in self.rows:
            cell = f"{acc:.1f}" if delta is None else f"{acc:.1f} ({delta:+.1f})"
            lines.append(f"| {label} | {cell} |")
        return "\n".join(lines) + "\n"

    def __str__(self) -> str:
        return self.to_markdown()


def report_ablation(reports, baseline_label: str) -> AblationTable:
    """Table of the given reports in order, each non-baseline row annotated
    with its accuracy delta against the baseline row."""
    reports = list(reports)
    labels = [r.model_label for r in reports]
    if baseline_label not in labels:
        raise ValueError(f"baseline {baseline_label!r} not among report labels {labels}")
    base_acc = round(reports[labels.index(baseline_label)].accuracy, 1)
    rows = []
    for report in reports:
        if report.model_label == baseline_label:
            rows.append((report.model_label, report.accuracy, None))
        else:
            delta = round(report.accuracy, 1) - base_acc
            if delta == 0:
                delta = 0.0  # never print "-0.0"
            rows.append((report.model_label, report.accuracy, delta))
    return AblationTable(baseline_label=baseline_label, rows=rows)


# -- attention-gate export ---------------------------------------------------


def export_heatmap(checkpoint: Checkpoint, example: Example, out_dir,
                   encoding: str | None = None) -> list[str]:
    """One CSV per choice: a header row of token strings and a row of the
    head's gate values aligned to them. Returns the written paths."""
    model, enc = _build(checkpoint, encoding)
    _check_vocab(model, [example])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with no_grad():
        cs = model.forward_choice_set(example, enc)
    for j, (seq, out) in enumerate(zip(cs.sequences, cs.outputs)):
        tokens = [model.vocab.token_of(i) for i in seq.trimmed_ids()]
        gates = out.gates.numpy()
        path = out_dir / f"{example.id}.choice{j}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(tokens)
            writer.writerow(["%.17g" % v for v in gates])
        paths.append(str(path))
    return paths


@dataclass
class GateStats:
    """Mean gate value by ground-truth token class over a set of examples."""

    mean_concept: float
    mean_filler: float
    n_items: int
    n_concept_tokens: int
    n_filler_tokens: int


def gate_statistics(checkpoint: Checkpoint, examples, concept_tokens,
                    filler_tokens, encoding: str | None = None) -> GateStats:
    """Aggregate gate values over every (example, choice, token) occurrence,
    split into relation-bearing concept tokens and filler tokens. Tokens in
    neither set (specials) are ignored."""
    examples = list(examples)
    if not examples:
        raise ValueError("no examples given")
    concept_tokens, filler_tokens = set(concept_tokens), set(filler_tokens)
    if concept_tokens & filler_tokens:
        raise ValueError("concept and filler token sets overlap")
    model, enc = _build(checkpoint, encoding)
    _check_vocab(model, examples)

    sums = {"concept": 0.0, "filler": 0.0}
    counts = {"concept": 0, "filler": 0}
    with no_grad():
        for ex in examples:
            cs = model.forward_choice_set(ex, enc)
            for seq, out in zip(cs.sequences, cs.outputs):
                gates = out.gates.numpy()
                for tok_id, gate in zip(seq.trimmed_ids(), gates):
                    token = model.vocab.token_of(tok_id)
                    if token in concept_tokens:
                        kind = "concept"
                    elif token in filler_tokens:
                        kind = "filler"
                    else:
                        continue
                    sums[kind] += float(gate)
                    counts[kind] += 1
    if not counts["concept"] or not counts["filler"]:
        raise ValueError("examples contain no concept or no filler tokens")
    return GateStats(
        mean_concept=sums["concept"] / counts["concept"],
        mean_filler=sums["filler"] / counts["filler"],
        n_items=len(examples),
        n_concept_tokens=counts["concept"],
        n_filler_tokens=counts["filler"],
    )
