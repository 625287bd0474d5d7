"""``clear-scvd`` command line: ingestion, synthesis, both training stages, evaluation, detection."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, load_config
from .corpus import (
    LABEL_TAGS,
    LabeledExample,
    corpus_hash,
    generate_synthetic_corpus,
    load_corpus,
    prepare,
    save_corpus,
    _validate_record,
    CorpusError,
)
from .detection import detect
from .evaluation import (
    VARIANTS,
    evaluate,
    export_embeddings,
    run_encoder_sweep,
    run_variant,
    summarize,
    write_embeddings,
)
from .training import StageMismatch, finetune, load_checkpoint, pretrain_cl

logger = logging.getLogger("clear_scvd")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_manifest(out: Path, command: str, argv, config: RunConfig, seeds, corpus_sha: str, vocab_hash: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config.as_dict(),
        "seeds": list(seeds),
        "corpus_hash": corpus_sha,
        "vocab_hash": vocab_hash,
        "code_version": __version__,
        "torch_version": torch.__version__,
        "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (out / "config.cfg").write_text(config.to_text(), encoding="utf-8")


def _prepare(examples, config: RunConfig, vocab=None):
    return prepare(
        examples,
        ratio=config.train_ratio,
        seed=config.seed,
        min_frequency=config.min_frequency,
        max_len=config.max_len,
        vocab=vocab,
    )


def _seeds(arg: str | None, config: RunConfig) -> list[int]:
    if not arg:
        return [config.seed]
    try:
        return [int(s) for s in arg.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad --seeds value {arg!r}") from None


# ------------------------------------------------------------------ subcommands


def cmd_ingest(args, argv) -> int:
    src = Path(args.input)
    if src.is_dir():
        labels_path = src / "labels.json"
        if not labels_path.exists():
            raise CorpusError(f"{src}: directory input needs a labels.json mapping file name -> labels")
        labels = json.loads(labels_path.read_text(encoding="utf-8"))
        examples = []
        for i, sol in enumerate(sorted(src.glob("*.sol")), start=1):
            if sol.name not in labels:
                raise CorpusError(f"{sol.name}: no entry in labels.json")
            record = {"id": sol.stem, "source": sol.read_text(encoding="utf-8"), "labels": labels[sol.name]}
            examples.append(_validate_record(record, i))
        ids = [e.id for e in examples]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate id")
    else:
        examples = load_corpus(src)
    save_corpus(examples, args.out)
    print(json.dumps({"examples": len(examples), "out": str(args.out)}))
    return EXIT_OK


def cmd_synth(args, argv) -> int:
    examples = generate_synthetic_corpus(args.n, args.vuln_fraction, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_corpus(examples, args.out)
    print(json.dumps({"examples": len(examples), "vulnerable": sum(e.labels["ORDER"] for e in examples), "out": str(args.out)}))
    return EXIT_OK


def cmd_pretrain(args, argv) -> int:
    config = load_config(args.config)
    changes = {}
    if args.task:
        changes["task"] = args.task
    if args.ablation == "rmlm":
        changes.update(lambda_mlm=0.0, ablation="none")
    elif args.ablation:
        changes["ablation"] = args.ablation
    config = config.replace(**changes)
    examples = load_corpus(args.corpus)
    vocab, parts = _prepare(examples, config)
    out = Path(args.out)
    _write_manifest(out, "pretrain", argv, config, [config.seed], corpus_hash(examples), vocab.hash)
    pretrain_cl(parts, vocab, config, out_dir=out, snapshot_dir=out / "epochs" if args.snapshots else None)
    print(json.dumps({"stage": "cl", "epochs": config.epochs_cl, "out": str(out)}))
    return EXIT_OK


def cmd_finetune(args, argv) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.stage != "cl":
        raise StageMismatch(f"stage mismatch: expected a cl checkpoint, got {ckpt.stage}")
    config = ckpt.config
    examples = load_corpus(args.corpus)
    _, parts = _prepare(examples, config, vocab=ckpt.vocab)
    out = Path(args.out)
    _write_manifest(out, "finetune", argv, config, [config.seed], corpus_hash(examples), ckpt.vocab.hash)
    finetune(ckpt, parts, config, out_dir=out)
    print(json.dumps({"stage": "ft", "epochs": config.epochs_ft, "out": str(out)}))
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    ckpt = load_checkpoint(args.model)
    if ckpt.stage != "ft":
        raise StageMismatch(f"stage mismatch: evaluation needs a fine-tuned model, got stage {ckpt.stage}")
    examples = load_corpus(args.corpus)
    _, parts = _prepare(examples, ckpt.config, vocab=ckpt.vocab)
    contracts = parts.test if args.split == "test" else parts.train + parts.test
    report = evaluate(ckpt, contracts, variant=args.variant)
    report.split_hash = parts.hash
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    report.save(args.report)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def _with_task(config: RunConfig, task: str | None) -> RunConfig:
    return config.replace(task=task) if task else config


def cmd_ablate(args, argv) -> int:
    config = _with_task(load_config(args.config), args.task)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants: {', '.join(unknown)}")
    seeds = _seeds(args.seeds, config)
    examples = load_corpus(args.corpus)
    out = Path(args.out)
    _write_manifest(out, "ablate", argv, config, seeds, corpus_hash(examples))
    reports = []
    for variant in variants:
        for seed in seeds:
            reports.append(run_variant(examples, config.replace(seed=seed), variant, out_dir=out / variant / f"seed_{seed}"))
    summary = summarize(reports)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    config = _with_task(load_config(args.config), args.task)
    seeds = _seeds(args.seeds, config)
    examples = load_corpus(args.corpus)
    out = Path(args.out)
    _write_manifest(out, "sweep-encoders", argv, config, seeds, corpus_hash(examples))
    reports = []
    for seed in seeds:
        reports += run_encoder_sweep(examples, config.replace(seed=seed), out_dir=out / f"seed_{seed}")
    summary = summarize(reports)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_export(args, argv) -> int:
    examples = load_corpus(args.corpus)
    snapshots = export_embeddings(args.ckpt_series, examples, task=args.task)
    out = write_embeddings(snapshots, args.out)
    print(json.dumps({"epochs": [s.epoch for s in snapshots], "out": str(out)}))
    return EXIT_OK


def cmd_detect(args, argv) -> int:
    ckpt = load_checkpoint(args.model)
    for path in args.file:
        source = Path(path).read_text(encoding="utf-8")
        prediction = detect(source, ckpt, args.task, id=Path(path).stem, threshold=args.threshold)
        print(json.dumps(prediction.to_record()))
    return EXIT_OK


# ------------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clear-scvd", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None, help="torch intra-op threads (1 for bitwise-reproducible runs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate a corpus and write it as JSONL")
    p.add_argument("--input", required=True, help="JSONL file, or directory of .sol files plus labels.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate the synthetic withdraw-ordering corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--vuln-fraction", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="stage 1: contrastive pair training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", choices=LABEL_TAGS)
    p.add_argument("--config", help="config file or preset name (desk, paper)")
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=("none", "mvv", "mvn", "rmlm"))
    p.add_argument("--snapshots", action="store_true", help="also keep one checkpoint per epoch under OUT/epochs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage 2: classification fine-tuning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="precision/recall/F1 on the held-out split")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--variant", default="")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation variants")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--task", choices=LABEL_TAGS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-encoders", help="recurrent encoders with and without stage 1")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--seeds")
    p.add_argument("--task", choices=LABEL_TAGS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings", help="per-epoch 2-D PCA of the correlation vectors")
    p.add_argument("--ckpt-series", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", choices=LABEL_TAGS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("detect", help="score contract source files")
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=LABEL_TAGS)
    p.add_argument("--file", required=True, nargs="+")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_detect)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failure, e.g. divergence
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
