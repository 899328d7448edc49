"""Command-line surface: corpus generation, staged training, evaluation,
gate-heatmap export, ablation reports, and end-to-end pipeline orchestration.

One structured JSON config file serves every subcommand; each reads only its
own sections ("world", "model", "stage1".."stage3"). Every path through the
CLI is deterministic under a fixed seed, exits 0 on success, and can emit a
machine-readable JSON summary with --json.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import (
    SOURCE_LANG,
    TARGET_LANG,
    SynthWorldConfig,
    Vocab,
    generate_synthetic_world,
    load_jsonl,
    pair_by_id,
    save_world,
)
from .encoder import EncoderConfig
from .evaluation import (
    EVAL_SCHEMA_VERSION,
    evaluate,
    export_heatmap,
    gate_statistics,
    report_ablation,
)
from .head import LOSS_PRESETS, HeadConfig, LossWeights
from .model import EVAL_MODES, ModelConfig
from .tensor import TensorFormatError
from .training import (
    CheckpointFormatError,
    DivergenceError,
    TrainConfig,
    load_checkpoint,
    run_stage1,
    run_stage2,
    run_stage3,
    save_checkpoint,
)

SPLITS = ("train", "dev", "test", "parallel")
CONFIG_SECTIONS = ("world", "model", "stage1", "stage2", "stage3")
LOSS_CHOICES = tuple(LOSS_PRESETS) + ("custom",)

# desk-scale defaults; any field can be overridden from the config file
DEFAULT_MODEL = {
    "encoder": dict(d_model=64, n_layers=2, n_heads=4, d_ff=128, max_len=16,
                    dropout_rate=0.0, seed=0),
    "head": dict(d_model=64, d_embed=64, gate_mode="sigmoid", seed=0),
}
FULL_OBJECTIVE = dict(ce=1.0, align=1.0, diff=1.0, nc=1.0)
DEFAULT_STAGES = {
    1: dict(total_steps=1200, batch_size=16, lr=1e-3, warmup_steps=100, weight_decay=0.01,
            loss_weights=dict(ce=1.0, align=0.0, diff=0.0, nc=0.0), eval_every=300, seed=1),
    2: dict(total_steps=400, batch_size=8, lr=5e-4, warmup_steps=40, weight_decay=0.01,
            loss_weights=dict(ce=1.0, align=4.0, diff=1.0, nc=1.0), eval_every=200, seed=3),
    3: dict(total_steps=800, batch_size=8, lr=5e-4, warmup_steps=80, weight_decay=0.01,
            loss_weights=dict(FULL_OBJECTIVE), eval_every=200, seed=3),
}

__all__ = ["cli", "main", "DEFAULT_MODEL", "DEFAULT_STAGES"]


# -- shared plumbing ---------------------------------------------------------


def _read_config(path) -> dict:
    if path is None:
        return {}
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    unknown = set(obj) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValueError(
            f"unknown config sections {sorted(unknown)}; expected a subset of {list(CONFIG_SECTIONS)}"
        )
    return obj


def _build_dataclass(label: str, cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"bad {label}: {exc}") from None


def _world_config(cfg_file: dict, seed) -> SynthWorldConfig:
    kwargs = dict(cfg_file.get("world", {}))
    if seed is not None:
        kwargs["seed"] = seed
    return _build_dataclass("world config", SynthWorldConfig, kwargs)


def _model_config(cfg_file: dict, vocab_size: int) -> ModelConfig:
    section = cfg_file.get("model", {})
    enc = {**DEFAULT_MODEL["encoder"], **section.get("encoder", {})}
    enc.setdefault("vocab_size", vocab_size)
    head = {**DEFAULT_MODEL["head"], **section.get("head", {})}
    return ModelConfig(
        encoder=_build_dataclass("encoder config", EncoderConfig, enc),
        head=_build_dataclass("head config", HeadConfig, head),
    )


def _stage_config(cfg_file: dict, stage: int, losses, seed) -> TrainConfig:
    section = dict(cfg_file.get(f"stage{stage}", {}))
    if section.pop("stage", stage) != stage:
        raise ValueError(f"config section stage{stage} must not set a different stage")
    merged = {**DEFAULT_STAGES[stage], **section}
    if losses == "custom":
        if "loss_weights" not in section:
            raise ValueError(
                "--losses custom requires a loss_weights entry in the "
                f"stage{stage} config section"
            )
    elif losses is not None:
        merged["loss_weights"] = dict(LOSS_PRESETS[losses])
    if seed is not None:
        merged["seed"] = seed
    weights = merged.pop("loss_weights")
    if isinstance(weights, dict):
        weights = _build_dataclass("loss weights", LossWeights, weights)
    return _build_dataclass(
        f"stage {stage} train config", TrainConfig,
        dict(stage=stage, loss_weights=weights, **merged),
    )


def _load_split(data_dir, split: str, lang: str):
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; choose from {SPLITS}")
    if lang not in (SOURCE_LANG, TARGET_LANG):
        raise ValueError(f"unknown language {lang!r}; choose {SOURCE_LANG} or {TARGET_LANG}")
    return load_jsonl(Path(data_dir) / f"{split}.{lang}.jsonl")


def _load_pairs(data_dir, split: str):
    return pair_by_id(_load_split(data_dir, split, SOURCE_LANG),
                      _load_split(data_dir, split, TARGET_LANG))


def _fresh_log(path) -> None:
    if path is not None:
        Path(path).unlink(missing_ok=True)


def _last_log_total(path):
    if path is None or not Path(path).exists():
        return None
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        return None
    return float(lines[-1].split(",")[6])


def _compact_report(report) -> dict:
    return {
        "dataset": report.dataset,
        "lang": report.lang,
        "mode": report.mode,
        "accuracy": round(report.accuracy, 1),
        "n_items": report.n_items,
        "model_label": report.model_label,
    }


def _emit(args, summary: dict, human_lines) -> int:
    if getattr(args, "json", False):
        print(json.dumps(summary, sort_keys=True, indent=2))
    else:
        for line in human_lines:
            print(line)
    return 0


# -- subcommands -------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    cfg = _world_config(_read_config(args.config), args.seed)
    world = generate_synthetic_world(cfg)
    paths = save_world(world, args.out)
    summary = {
        "schema_version": EVAL_SCHEMA_VERSION,
        "command": "gen-corpus",
        "out": str(args.out),
        "seed": cfg.seed,
        "vocab_size": len(world.vocab),
        "counts": {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test,
                   "parallel": cfg.n_parallel},
        "paths": paths,
    }
    human = [f"wrote corpus to {args.out} (vocab {len(world.vocab)}, "
             f"{cfg.n_train}/{cfg.n_dev}/{cfg.n_test} items per language, "
             f"{cfg.n_parallel} parallel pairs)"]
    return _emit(args, summary, human)


def cmd_train(args) -> int:
    cfg_file = _read_config(args.config)
    data = Path(args.data)
    vocab = Vocab.load(data / "vocab.txt")
    config = _stage_config(cfg_file, args.stage, args.losses, args.seed)
    checkpoint = load_checkpoint(args.init) if args.init else None

    dev = None
    if config.eval_every:
        dev = (_load_split(data, "dev", SOURCE_LANG), _load_split(data, "dev", TARGET_LANG))

    resuming = checkpoint is not None and checkpoint.stage == config.stage
    if not resuming:
        _fresh_log(args.log)

    if args.stage == 1:
        items = (_load_split(data, "train", SOURCE_LANG)
                 + _load_split(data, "train", TARGET_LANG))
        if checkpoint is None:
            model_cfg = _model_config(cfg_file, len(vocab))
            out_cp = run_stage1(config, items, dev=dev, model_config=model_cfg,
                                vocab=vocab, log_path=args.log, max_steps=args.max_steps)
        else:
            out_cp = run_stage1(config, items, dev=dev, checkpoint=checkpoint,
                                log_path=args.log, max_steps=args.max_steps)
    else:
        if checkpoint is None:
            raise ValueError(f"stage {args.stage} needs --init pointing at an earlier checkpoint")
        pairs = _load_pairs(data, "parallel")
        run = run_stage2 if args.stage == 2 else run_stage3
        out_cp = run(checkpoint, config, pairs, dev=dev, log_path=args.log,
                     max_steps=args.max_steps)

    save_checkpoint(out_cp, args.out)
    summary = {
        "schema_version": EVAL_SCHEMA_VERSION,
        "command": "train",
        "stage": args.stage,
        "losses": args.losses,
        "seed": config.seed,
        "checkpoint": str(args.out),
        "log": None if args.log is None else str(args.log),
        "global_step": out_cp.global_step,
        "stage_step": out_cp.stage_step,
        "final_total": _last_log_total(args.log),
    }
    human = [f"stage {args.stage} done: {out_cp.stage_step}/{config.total_steps} steps "
             f"(global step {out_cp.global_step}); checkpoint -> {args.out}"]
    if summary["final_total"] is not None:
        human.append(f"final training loss {summary['final_total']:.6f}")
    return _emit(args, summary, human)


def cmd_evaluate(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    examples = _load_split(args.data, args.split, args.lang)
    report = evaluate(checkpoint, examples, args.mode,
                      dataset_id=f"{args.split}.{args.lang}",
                      encoding=args.encoding, model_label=args.label)
    summary = {
        "schema_version": EVAL_SCHEMA_VERSION,
        "command": "evaluate",
        "checkpoint": str(args.checkpoint),
        "report": _compact_report(report),
    }
    human = [f"{report.dataset} [{report.mode}] accuracy {report.headline} "
             f"on {report.n_items} items"]
    return _emit(args, summary, human)


def cmd_heatmap(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    examples = _load_split(args.data, args.split, args.lang)
    if not 0 <= args.index < len(examples):
        raise ValueError(f"--index {args.index} outside [0, {len(examples)}) "
                         f"for {args.split}.{args.lang}")
    paths = export_heatmap(checkpoint, examples[args.index], args.out,
                           encoding=args.encoding)
    summary = {
        "schema_version": EVAL_SCHEMA_VERSION,
        "command": "heatmap",
        "checkpoint": str(args.checkpoint),
        "example": examples[args.index].id,
        "paths": paths,
    }
    return _emit(args, summary, [f"wrote {len(paths)} heatmap files to {args.out}"])


def _parse_run(text: str) -> tuple[str, str]:
    label, sep, path = text.partition("=")
    if not sep or not label or not path:
        raise ValueError(f"--run expects LABEL=CHECKPOINT, got {text!r}")
    return label, path


def cmd_report(args) -> int:
    runs = [_parse_run(r) for r in args.run]
    examples = _load_split(args.data, args.split, args.lang)
    reports = []
    for label, path in runs:
        checkpoint = load_checkpoint(path)
        reports.append(evaluate(checkpoint, examples, args.mode,
                                dataset_id=f"{args.split}.{args.lang}",
                                encoding=args.encoding, model_label=label))
    table = report_ablation(reports, args.baseline)
    markdown = table.to_markdown()
    if args.out:
        Path(args.out).write_text(markdown, encoding="utf-8")
    summary = {
        "schema_version": EVAL_SCHEMA_VERSION,
        "command": "report",
        "baseline": args.baseline,
        "out": None if args.out is None else str(args.out),
        "reports": [_compact_report(r) for r in reports],
        "markdown": markdown,
    }
    return _emit(args, summary, [markdown.rstrip("\n")])


def cmd_pipeline(args) -> int:
    cfg_file = _read_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    world_cfg = _world_config(cfg_file, args.seed)
    world = generate_synthetic_world(world_cfg)
    corpus_paths = save_world(world, out / "corpus")

    model_cfg = _model_config(cfg_file, len(world.vocab))
    stage_cfgs = {
        n: _stage_config(cfg_file, n, args.losses if n >= 2 else None,
                         None if args.seed is None else args.seed + n)
        for n in (1, 2, 3)
    }

    train_src, train_tgt = world.splits["train"]
    dev = world.splits["dev"]
    dev_log = (dev[0][:100], dev[1][:100])  # logging subset; final eval is full

    checkpoints = {}
    logs = {}
    cp = None
    for stage in (1, 2, 3):
        log_path = out / f"stage{stage}.log.csv"
        _fresh_log(log_path)
        if stage == 1:
            cp = run_stage1(stage_cfgs[1], train_src + train_tgt, dev=dev_log,
                            model_config=model_cfg, vocab=world.vocab, log_path=log_path)
        else:
            run = run_stage2 if stage == 2 else run_stage3
            cp = run(cp, stage_cfgs[stage], world.parallel, dev=dev_log, log_path=log_path)
        ckpt_path = out / f"stage{stage}.ckpt"
        save_checkpoint(cp, ckpt_path)
        checkpoints[stage] = str(ckpt_path)
        logs[stage] = str(log_path)

    results = {}
    table_rows = []
    for lang, items in ((SOURCE_LANG, dev[0]), (TARGET_LANG, dev[1])):
        for mode in EVAL_MODES:
            report = evaluate(cp, items, mode, dataset_id=f"dev.{lang}")
            results[f"dev.{lang}.{mode}"] = round(report.accuracy, 1)
            table_rows.append(f"| dev.{lang} | {mode} | {report.headline} |")

    concept_tokens = [w for words in world.concept_words.values() for w in words]
    filler_tokens = [w for words in world.filler_words.values() for w in words]
    stats = gate_statistics(cp, dev[1][:100], concept_tokens, filler_tokens)

    report_md = "\n".join(
        ["# Pipeline results", "",
         f"Final checkpoint: `{checkpoints[3]}` (stage 3, global step {cp.global_step})", "",
         "| dataset | mode | accuracy |", "| --- | --- | --- |", *table_rows, "",
         f"Mean gate on concept tokens {stats.mean_concept:.4f} vs "
         f"filler tokens {stats.mean_filler:.4f} "
         f"({stats.n_items} items, {stats.n_concept_tokens}/{stats.n_filler_tokens} tokens).",
         ""]
    )
    (out / "report.md").write_text(report_md, encoding="utf-8")

    summary = {
        "schema_version": EVAL_SCHEMA_VERSION,
        "command": "pipeline",
        "out": str(out),
        "seed": args.seed,
        "losses": args.losses,
        "world_seed": world_cfg.seed,
        "corpus": corpus_paths,
        "checkpoints": checkpoints,
        "logs": logs,
        "report": str(out / "report.md"),
        "results": results,
        "gate_stats": {
            "mean_concept": stats.mean_concept,
            "mean_filler": stats.mean_filler,
            "n_items": stats.n_items,
        },
    }
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    human = [f"pipeline complete; artifacts in {out}",
             *(f"  dev.{lang} {mode}: {results[f'dev.{lang}.{mode}']:.1f}"
               for lang in (SOURCE_LANG, TARGET_LANG) for mode in EVAL_MODES),
             f"  report: {out / 'report.md'}"]
    return _emit(args, summary, human)


# -- parser ------------------------------------------------------------------


def _add_common(sub) -> None:
    sub.add_argument("--config", default=None,
                     help="JSON config file; each subcommand reads its own sections")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the configured seed(s) for this command")
    sub.add_argument("--json", action="store_true",
                     help="print a machine-readable JSON summary to stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cskt",
        description="Cross-lingual commonsense knowledge-transfer pipeline "
                    "on a synthetic bilingual corpus.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate and write a synthetic bilingual corpus")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--data", required=True, help="corpus directory from gen-corpus")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--losses", choices=LOSS_CHOICES, default=None,
                   help="loss preset; 'custom' reads loss_weights from the config file")
    p.add_argument("--log", default=None, help="CSV training log to write")
    p.add_argument("--max-steps", type=int, default=None,
                   help="run at most this many steps (checkpoint resumes later)")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="dev", choices=SPLITS)
    p.add_argument("--lang", default=TARGET_LANG, choices=(SOURCE_LANG, TARGET_LANG))
    p.add_argument("--mode", default="commonsense", choices=EVAL_MODES)
    p.add_argument("--encoding", default=None, choices=("statement", "qa"),
                   help="override the encoding implied by the checkpoint stage")
    p.add_argument("--label", default="", help="model label recorded in the report")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", help="export per-token gate values as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="dev", choices=SPLITS)
    p.add_argument("--lang", default=TARGET_LANG, choices=(SOURCE_LANG, TARGET_LANG))
    p.add_argument("--index", type=int, default=0, help="example index within the split")
    p.add_argument("--out", required=True, help="directory for the CSV files")
    p.add_argument("--encoding", default=None, choices=("statement", "qa"))
    _add_common(p)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("report", help="ablation table over several checkpoints")
    p.add_argument("--run", action="append", required=True, metavar="LABEL=CKPT",
                   help="checkpoint to evaluate, with its table label (repeatable)")
    p.add_argument("--baseline", required=True, help="label of the baseline row")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--lang", default=TARGET_LANG, choices=(SOURCE_LANG, TARGET_LANG))
    p.add_argument("--mode", default="commonsense", choices=EVAL_MODES)
    p.add_argument("--encoding", default=None, choices=("statement", "qa"))
    p.add_argument("--out", default=None, help="markdown file to write")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="corpus + all three stages + evaluation report")
    p.add_argument("--out", required=True, help="output directory for all artifacts")
    p.add_argument("--losses", choices=LOSS_CHOICES, default=None,
                   help="loss preset for stages 2 and 3 (default: all terms on)")
    _add_common(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def cli(argv=None) -> int:
    """Entry point returning an exit code instead of raising SystemExit."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, DivergenceError,
            CheckpointFormatError, TensorFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
