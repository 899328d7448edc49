"""Evaluation: accuracy reports, ablation tables, heatmap export, gate stats."""

import csv
import dataclasses

import numpy as np
import pytest

from cskt.data import SynthWorldConfig, encode_statement, generate_synthetic_world
from cskt.encoder import EncoderConfig
from cskt.evaluation import (
    AblationTable,
    EvalReport,
    encoding_for_stage,
    evaluate,
    export_heatmap,
    gate_statistics,
    report_ablation,
)
from cskt.head import HeadConfig, LossWeights
from cskt.model import ModelConfig
from cskt.training import TrainConfig, initial_checkpoint, run_stage1


@pytest.fixture(scope="module")
def world():
    cfg = SynthWorldConfig(
        n_concepts=12, n_filler_tokens=8, relation_density=0.25,
        choices_per_item=3, n_train=260, n_dev=24, n_test=8, n_parallel=12, seed=7,
    )
    return generate_synthetic_world(cfg)


@pytest.fixture(scope="module")
def model_config(world):
    enc = EncoderConfig(vocab_size=len(world.vocab), d_model=16, n_layers=1,
                        n_heads=2, d_ff=32, max_len=16, seed=1)
    return ModelConfig(encoder=enc, head=HeadConfig(d_model=16, seed=2))


@pytest.fixture(scope="module")
def untrained(world, model_config):
    return initial_checkpoint(model_config, world.vocab)


@pytest.fixture(scope="module")
def overfit_items(world):
    return world.splits["train"][0][:4] + world.splits["train"][1][:4]


@pytest.fixture(scope="module")
def trained(world, model_config, overfit_items):
    config = TrainConfig(stage=1, total_steps=150, batch_size=8, lr=1e-2, warmup_steps=15,
                         loss_weights=LossWeights(ce=1, align=0, diff=0, nc=0), seed=0)
    return run_stage1(config, overfit_items, model_config=model_config, vocab=world.vocab)


def test_encoding_for_stage():
    assert encoding_for_stage(0) == "statement"
    assert encoding_for_stage(1) == "statement"
    assert encoding_for_stage(2) == "statement"
    assert encoding_for_stage(3) == "qa"


# -- evaluate ----------------------------------------------------------------


def test_perfect_model_scores_100(trained, overfit_items):
    report = evaluate(trained, overfit_items, "commonsense", dataset_id="train.mixed")
    assert report.accuracy == 100.0
    assert report.headline == "100.0"
    assert report.n_items == len(overfit_items)
    assert report.lang == "de+en"
    assert report.predictions == report.golds


def test_untrained_model_is_chance_level(untrained, world):
    # [DERIVED] chance oracle: gold uniform over 3 choices -> about 33.3%
    items = world.splits["train"][0][:250] + world.splits["train"][1][:250]
    report = evaluate(untrained, items, "commonsense", dataset_id="train.mixed")
    assert report.n_items == 500
    assert 100 / 3 - 5 <= report.accuracy <= 100 / 3 + 5


def test_accuracy_recompute_matches_headline_exactly(trained, world):
    report = evaluate(trained, world.splits["dev"][1], "commonsense", dataset_id="dev.de")
    assert report.recomputed_accuracy() == report.accuracy
    assert 0.0 <= report.accuracy <= 100.0
    assert report.lang == "de"


def test_evaluate_all_modes_and_determinism(trained, world):
    items = world.splits["dev"][0][:12]
    for mode in ("commonsense", "non-commonsense", "both"):
        a = evaluate(trained, items, mode)
        b = evaluate(trained, items, mode)
        assert a.predictions == b.predictions
        assert a.accuracy == b.accuracy


def test_evaluate_encoding_override(trained, world):
    items = world.splits["dev"][0][:6]
    report = evaluate(trained, items, "commonsense", encoding="qa")
    assert report.n_items == 6  # QA form works on a statement-trained checkpoint


def test_evaluate_rejects_bad_inputs(trained, world):
    items = world.splits["dev"][0][:4]
    with pytest.raises(ValueError, match="mode"):
        evaluate(trained, items, "telepathy")
    with pytest.raises(ValueError, match="no examples"):
        evaluate(trained, [], "commonsense")
    alien = dataclasses.replace(items[0], question="zzz " + items[0].question)
    with pytest.raises(ValueError, match="'zzz'"):
        evaluate(trained, [alien], "commonsense")


# -- ablation tables ---------------------------------------------------------


def _report(label, acc):
    return EvalReport(dataset="test.de", lang="de", mode="commonsense",
                      accuracy=acc, n_items=100, predictions=[], golds=[],
                      model_label=label)


def test_ablation_delta_formatting():
    table = report_ablation(
        [_report("base", 48.8), _report("align", 50.6), _report("same", 48.8),
         _report("worse", 48.5)],
        "base",
    )
    md = table.to_markdown()
    lines = md.splitlines()
    assert lines[0] == "| model | accuracy |"
    assert lines[1] == "| --- | --- |"
    assert lines[2] == "| base | 48.8 |"  # baseline row carries no delta
    assert lines[3] == "| align | 50.6 (+1.8) |"
    assert lines[4] == "| same | 48.8 (+0.0) |"
    assert lines[5] == "| worse | 48.5 (-0.3) |"
    assert str(table) == md


def test_ablation_rows_keep_input_order():
    table = report_ablation([_report("b", 10.0), _report("a", 30.0)], "a")
    assert [r[0] for r in table.rows] == ["b", "a"]
    assert table.rows[0][2] == pytest.approx(-20.0)
    assert table.rows[1][2] is None


def test_ablation_missing_baseline():
    with pytest.raises(ValueError, match="baseline"):
        report_ablation([_report("a", 1.0)], "nope")


def test_ablation_from_real_checkpoints(trained, untrained, world):
    items = world.splits["dev"][0][:10]
    reports = [evaluate(cp, items, "commonsense", dataset_id="dev.en", model_label=label)
               for label, cp in (("base", untrained), ("tuned", trained))]
    md = report_ablation(reports, "base").to_markdown()
    assert "| base |" in md and "| tuned |" in md


# -- heatmap export ----------------------------------------------------------


def _read_heatmap(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 2
    return rows[0], [float(v) for v in rows[1]]


def test_heatmap_files_per_choice(trained, world, tmp_path):
    ex = world.splits["dev"][1][0]
    paths = export_heatmap(trained, ex, tmp_path / "hm")
    assert len(paths) == len(ex.choices)
    for j, path in enumerate(paths):
        assert path.endswith(f"{ex.id}.choice{j}.csv")
        tokens, values = _read_heatmap(path)
        assert len(tokens) == len(values)
        assert all(0.0 < v < 1.0 for v in values)  # sigmoid range
        # column count equals the non-pad token count of the encoded choice
        seq = encode_statement(ex.question + " " + ex.choices[j], world.vocab, 16)
        assert len(tokens) == seq.content_length
        assert tokens[0] == "[CLS]" and tokens[-1] == "[SEP]"


def test_heatmap_deterministic(trained, world, tmp_path):
    ex = world.splits["dev"][0][3]
    first = export_heatmap(trained, ex, tmp_path / "a")
    second = export_heatmap(trained, ex, tmp_path / "b")
    for p1, p2 in zip(first, second):
        assert open(p1, "rb").read() == open(p2, "rb").read()


def test_heatmap_unwritable_path(trained, world, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_heatmap(trained, world.splits["dev"][0][0], blocker / "sub")


# -- gate statistics ---------------------------------------------------------


def _token_classes(world):
    concepts = [w for words in world.concept_words.values() for w in words]
    fillers = [w for words in world.filler_words.values() for w in words]
    return concepts, fillers


def test_gate_statistics_counts(trained, world):
    concepts, fillers = _token_classes(world)
    items = world.splits["dev"][1][:10]
    stats = gate_statistics(trained, items, concepts, fillers)
    assert stats.n_items == 10
    assert 0.0 < stats.mean_concept < 1.0
    assert 0.0 < stats.mean_filler < 1.0
    # every choice sequence carries 2 concept words and 4 fillers
    assert stats.n_concept_tokens == 10 * len(items[0].choices) * 2
    assert stats.n_filler_tokens == 10 * len(items[0].choices) * 4


def test_gate_statistics_validation(trained, world):
    concepts, fillers = _token_classes(world)
    with pytest.raises(ValueError, match="overlap"):
        gate_statistics(trained, world.splits["dev"][0][:2], concepts, concepts)
    with pytest.raises(ValueError, match="no examples"):
        gate_statistics(trained, [], concepts, fillers)
