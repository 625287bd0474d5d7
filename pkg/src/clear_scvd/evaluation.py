"""Metrics, ablation/encoder-sweep drivers, and per-epoch embedding projections."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .config import RunConfig
from .corpus import EncodedContract, LabeledExample, encode_examples, prepare
from .training import Checkpoint, encode_eval, finetune, initialize, load_checkpoint, pretrain_cl

logger = logging.getLogger(__name__)

VARIANTS = ("full", "mvv", "mvn", "rmlm", "rcl")
RECURRENT_KINDS = ("rnn", "lstm", "gru")


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    task: str = ""
    variant: str = ""
    degenerate: list = field(default_factory=list)
    seed: int | None = None
    split_hash: str = ""
    log: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "variant": self.variant,
            "seed": self.seed,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "degenerate": list(self.degenerate),
            "split_hash": self.split_hash,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def compute_metrics(
    predictions: Sequence[int], labels: Sequence[int], task: str = "", variant: str = ""
) -> MetricsReport:
    """Confusion counts plus precision/recall/F1; an empty denominator yields 0 and a flag."""
    pred = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(labels, dtype=np.int64)
    if pred.shape != gold.shape:
        raise EvaluationError("predictions and labels differ in length")
    if not np.isin(gold, (0, 1)).all() or not np.isin(pred, (0, 1)).all():
        raise EvaluationError("predictions and labels must be binary")
    tp = int(((pred == 1) & (gold == 1)).sum())
    fp = int(((pred == 1) & (gold == 0)).sum())
    tn = int(((pred == 0) & (gold == 0)).sum())
    fn = int(((pred == 0) & (gold == 1)).sum())
    degenerate = []
    if tp + fp == 0:
        precision = 0.0
        degenerate.append("precision")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        degenerate.append("recall")
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1 = 0.0
        degenerate.append("f1")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricsReport(tp, fp, tn, fn, precision, recall, f1, task=task, variant=variant, degenerate=degenerate)


def evaluate(
    checkpoint: Checkpoint, contracts: Sequence[EncodedContract], variant: str = "", threshold: float | None = None
) -> MetricsReport:
    threshold = checkpoint.config.threshold if threshold is None else threshold
    _, probs = encode_eval(checkpoint.model, contracts)
    preds = (probs >= threshold).long().tolist()
    report = compute_metrics(preds, [c.label(checkpoint.task) for c in contracts], checkpoint.task, variant)
    report.seed = checkpoint.config.seed
    return report


def variant_config(base: RunConfig, variant: str) -> RunConfig:
    if variant not in VARIANTS:
        raise EvaluationError(f"unknown variant {variant!r}")
    if variant in ("mvv", "mvn"):
        return base.replace(ablation=variant)
    if variant == "rmlm":
        return base.replace(lambda_mlm=0.0, ablation="none")
    return base.replace(ablation="none")


def run_variant(
    examples: Sequence[LabeledExample],
    base_config: RunConfig,
    variant: str = "full",
    *,
    out_dir: str | Path | None = None,
) -> MetricsReport:
    """Train one ablation variant end to end and score it on the held-out split.

    full/mvv/mvn/rmlm run both stages (mvv/mvn mask a pair relationship,
    rmlm drops masking and the MLM term); rcl fine-tunes a fresh encoder.
    """
    config = variant_config(base_config, variant)
    vocab, parts = prepare(
        examples, ratio=config.train_ratio, seed=config.seed, min_frequency=config.min_frequency, max_len=config.max_len
    )
    out = Path(out_dir) if out_dir is not None else None
    if variant == "rcl":
        stage1 = initialize(vocab, config)
    else:
        stage1 = pretrain_cl(parts, vocab, config, out_dir=out / "cl" if out else None)
    model = finetune(stage1, parts, config, out_dir=out / "ft" if out else None)
    report = evaluate(model, parts.test, variant=variant)
    report.split_hash = parts.hash
    report.log = model.log
    if out is not None:
        report.save(out / "metrics.json")
    logger.info("variant %s seed %d: F1=%.4f", variant, config.seed, report.f1)
    return report


def run_encoder_sweep(
    examples: Sequence[LabeledExample],
    base_config: RunConfig,
    kinds: Iterable[str] = RECURRENT_KINDS,
    *,
    out_dir: str | Path | None = None,
) -> list[MetricsReport]:
    """For each recurrent kind: one run with the contrastive stage (CL-<kind>) and one without."""
    reports = []
    for kind in kinds:
        config = base_config.replace(encoder_kind=kind)
        for variant, tag in (("full", f"CL-{kind.upper()}"), ("rcl", kind.upper())):
            sub = Path(out_dir) / tag if out_dir is not None else None
            report = run_variant(examples, config, variant, out_dir=sub)
            report.variant = tag
            if sub is not None:
                report.save(sub / "metrics.json")
            reports.append(report)
    return reports


# ------------------------------------------------------------------ embeddings / PCA


@dataclass
class EmbeddingSnapshot:
    epoch: int
    ids: list
    labels: list
    coords: np.ndarray  # (N, 2)
    components: np.ndarray  # (k, 2), orthonormal columns
    explained_variance: np.ndarray  # (2,), fractions of total variance
    centroid_distance: float = 0.0


def pca_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project rows onto the top two principal directions of the centered data.

    Returns (coords, components, explained-variance fractions). Each direction
    is sign-fixed so its first nonzero loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 3:
        raise EvaluationError("PCA needs at least three rows")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2].T.copy()
    for j in range(components.shape[1]):
        nonzero = np.flatnonzero(np.abs(components[:, j]) > 1e-12)
        if nonzero.size and components[nonzero[0], j] < 0:
            components[:, j] *= -1
    variances = s**2
    total = variances.sum()
    explained = variances[:2] / total if total > 0 else np.zeros(2)
    if explained.shape[0] < 2:
        explained = np.pad(explained, (0, 2 - explained.shape[0]))
        components = np.pad(components, ((0, 0), (0, 2 - components.shape[1])))
    return centered @ components, components, explained


def centroid_distance(vectors: np.ndarray, labels: Sequence[int]) -> float:
    """Euclidean distance between the mean vector of label-1 rows and of label-0 rows."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    if not (labels == 1).any() or not (labels == 0).any():
        raise EvaluationError("both classes are needed for a centroid distance")
    return float(np.linalg.norm(vectors[labels == 1].mean(axis=0) - vectors[labels == 0].mean(axis=0)))


def _series(checkpoints) -> list[Checkpoint]:
    if isinstance(checkpoints, (str, Path)):
        root = Path(checkpoints)
        if (root / "epochs").is_dir():
            root = root / "epochs"
        dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.txt").exists())
        if not dirs:
            raise EvaluationError(f"{checkpoints}: no per-epoch checkpoints found")
        return [load_checkpoint(d) for d in dirs]
    return list(checkpoints)


def export_embeddings(
    checkpoints, examples: Sequence[LabeledExample], task: str | None = None
) -> list[EmbeddingSnapshot]:
    """Eval-mode v for every contract at every epoch, projected to 2-D by per-epoch PCA."""
    series = sorted(_series(checkpoints), key=lambda c: c.epoch)
    if len(examples) < 3:
        raise EvaluationError("need at least three contracts to export embeddings")
    snapshots = []
    for ckpt in series:
        task_tag = task or ckpt.task
        contracts = encode_examples(examples, ckpt.vocab, ckpt.config.max_len)
        v, _ = encode_eval(ckpt.model, contracts)
        v = v.double().numpy()
        labels = [c.label(task_tag) for c in contracts]
        coords, components, explained = pca_2d(v)
        snapshots.append(
            EmbeddingSnapshot(
                epoch=ckpt.epoch,
                ids=[c.id for c in contracts],
                labels=labels,
                coords=coords,
                components=components,
                explained_variance=explained,
                centroid_distance=centroid_distance(v, labels),
            )
        )
    return snapshots


def write_embeddings(snapshots: Sequence[EmbeddingSnapshot], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "embeddings.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "id", "label", "x", "y"])
        for snap in snapshots:
            for cid, label, (x, y) in zip(snap.ids, snap.labels, snap.coords):
                writer.writerow([snap.epoch, cid, label, repr(float(x)), repr(float(y))])
    sidecar = {
        str(snap.epoch): {
            "explained_variance": [float(e) for e in snap.explained_variance],
            "centroid_distance": snap.centroid_distance,
            "components": snap.components.tolist(),
        }
        for snap in snapshots
    }
    (out / "explained_variance.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return out


def summarize(reports: Sequence[MetricsReport]) -> dict:
    """Mean precision/recall/F1 per variant tag."""
    grouped: dict[str, list[MetricsReport]] = {}
    for r in reports:
        grouped.setdefault(r.variant, []).append(r)
    return {
        tag: {
            "runs": len(rs),
            "precision": float(np.mean([r.precision for r in rs])),
            "recall": float(np.mean([r.recall for r in rs])),
            "f1": float(np.mean([r.f1 for r in rs])),
        }
        for tag, rs in grouped.items()
    }
