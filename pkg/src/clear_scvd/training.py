"""Stage-1 contrastive pretraining, stage-2 fine-tuning, and checkpoint I/O."""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import ConfigError, RunConfig
from .corpus import CorpusSplit, EncodedContract, Vocabulary
from .encoder import ClearModel, apply_mlm_mask, build_model, pad_batch
from .objectives import (
    LossReport,
    classification_loss,
    clamp_probability,
    contrastive_loss,
    mlm_loss,
    total_cl_loss,
)
from .sampling import SamplingPlan, build_pos_set, sample_pairs

logger = logging.getLogger(__name__)

STAGES = ("init", "cl", "ft")
CHECKPOINT_VERSION = 1
_MAGIC = b"CLRA"
_DTYPE_CODES = {torch.float32: (1, "<f4"), torch.float64: (2, "<f8"), torch.int64: (3, "<i8")}
_CODE_DTYPES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPE_CODES.items()}


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


class CheckpointError(ValueError):
    pass


class StageMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: ClearModel
    vocab: Vocabulary
    config: RunConfig
    stage: str = "init"
    epoch: int = 0
    log: list = field(default_factory=list)

    @property
    def task(self) -> str:
        return self.config.task


def _torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def initialize(vocab: Vocabulary, config: RunConfig) -> Checkpoint:
    """Fresh, seeded model for ``config``; stage ``init``."""
    model = build_model(config.encoder_config(len(vocab)), seed=config.seed, dtype=_torch_dtype(config.dtype))
    return Checkpoint(model=model, vocab=vocab, config=config, stage="init", epoch=0)


def make_optimizer(model: ClearModel, config: RunConfig, params=None) -> torch.optim.Optimizer:
    tc = config.train_config()
    return torch.optim.AdamW(
        model.parameters() if params is None else params,
        lr=tc.learning_rate,
        betas=tc.betas,
        eps=tc.adam_eps,
        weight_decay=tc.weight_decay,
    )


def batch_indices(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    """Shuffled mini-batches; a trailing batch of one is folded into its predecessor (batch norm needs two)."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage, epoch]))


def _check_finite(value: float, stage: str, epoch: int, batch: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss in stage {stage}, epoch {epoch}, batch {batch}")


def _mask_rows(
    rows: Sequence[Sequence[int]], mask_rate: float, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    masked = [apply_mlm_mask(r, mask_rate, rng) for r in rows]
    ids, valid = pad_batch([m.masked_ids for m in masked])
    positions = torch.zeros_like(valid)
    for i, m in enumerate(masked):
        positions[i, list(m.mask_positions)] = True
    targets, _ = pad_batch(rows)
    return ids, valid, positions, targets[positions]


def stage1_loss(
    model: ClearModel,
    rows_a: Sequence[Sequence[int]],
    rows_b: Sequence[Sequence[int]],
    labels: Sequence[int],
    config: RunConfig,
    rng: np.random.Generator | None,
):
    """Total stage-1 loss for one batch of pairs; both members go through ``model`` in one pass.

    Masking is skipped when ``rng`` is None or the MLM weight is zero.
    """
    rows = list(rows_a) + list(rows_b)
    cfg = config.loss_config()
    use_mlm = cfg.lambda_mlm > 0 and rng is not None
    if use_mlm:
        ids, valid, positions, targets = _mask_rows(rows, config.mask_rate, rng)
    else:
        ids, valid = pad_batch(rows)
        positions = targets = None
    out = model.encode(ids, valid, positions, mode="train")
    b = len(rows_a)
    label_t = torch.as_tensor(labels, dtype=out.v.dtype)
    loss_cl = contrastive_loss(out.v[:b], out.v[b:], label_t, cfg.margin)
    loss_mlm = mlm_loss(out.mlm_logits, targets) if use_mlm else loss_cl.new_zeros(())
    return total_cl_loss(loss_cl, loss_mlm, cfg), loss_cl, loss_mlm


def stage2_loss(model: ClearModel, rows: Sequence[Sequence[int]], labels: Sequence[int]):
    ids, valid = pad_batch(rows)
    out = model.encode(ids, valid, None, mode="train")
    prob = clamp_probability(model.classify(out.features, out.v, valid))
    return classification_loss(prob, torch.as_tensor(labels, dtype=prob.dtype))


def pretrain_cl(
    split: CorpusSplit,
    vocab: Vocabulary,
    config: RunConfig,
    plan: SamplingPlan | None = None,
    *,
    checkpoint: Checkpoint | None = None,
    out_dir: str | Path | None = None,
    snapshot_dir: str | Path | None = None,
    on_epoch: Callable[[Checkpoint], None] | None = None,
) -> Checkpoint:
    """Stage 1: pair sampling, masked contrastive training for ``config.epochs_cl`` epochs.

    Writes the final checkpoint to ``out_dir`` and the lowest-loss epoch to
    ``out_dir/best``; ``snapshot_dir`` receives one checkpoint per epoch.
    """
    task = config.task
    plan = plan or SamplingPlan(seed=config.seed, ablation=config.ablation, resample_each_epoch=config.resample_each_epoch)
    pos_set = build_pos_set(split.train, task)
    ckpt = checkpoint or initialize(vocab, config)
    if ckpt.stage != "init":
        raise StageMismatch(f"stage mismatch: pretraining expects an init checkpoint, got {ckpt.stage}")
    model = ckpt.model
    model.train()
    optimizer = make_optimizer(model, config)
    log = list(ckpt.log)
    best: tuple[float, dict, int] | None = None

    for epoch in range(1, config.epochs_cl + 1):
        started = time.perf_counter()
        model.train()
        pairs = sample_pairs(split.train, pos_set, plan, task, epoch=epoch)
        if not pairs:
            raise TrainingError(f"sampling produced no pairs in epoch {epoch}")
        rng = _epoch_rng(config.seed, 1, epoch)
        sums = np.zeros(3)
        count = 0
        for bi, idx in enumerate(batch_indices(len(pairs), config.batch_size, rng)):
            chunk = [pairs[i] for i in idx]
            total, loss_cl, loss_mlm = stage1_loss(
                model,
                [p.a.token_ids for p in chunk],
                [p.b.token_ids for p in chunk],
                [p.label for p in chunk],
                config,
                rng,
            )
            _check_finite(total.item(), "cl", epoch, bi)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            sums += len(chunk) * np.array([loss_mlm.item(), loss_cl.item(), total.item()])
            count += len(chunk)
        recalibrate_statistics(model, split.train)
        mean_mlm, mean_cl, mean_total = sums / count
        report = LossReport(loss_mlm=mean_mlm, loss_cl=mean_cl, loss_total=mean_total, loss_cla=0.0)
        entry = {
            "epoch": epoch,
            "stage": "cl",
            **report.as_dict(),
            "pairs": len(pairs),
            "wall_time": round(time.perf_counter() - started, 4),
            "seed": config.seed,
        }
        log.append(entry)
        logger.info("cl epoch %d: total=%.5f cl=%.5f mlm=%.5f", epoch, mean_total, mean_cl, mean_mlm)
        ckpt = Checkpoint(model=model, vocab=vocab, config=config, stage="cl", epoch=epoch, log=log)
        if best is None or mean_total < best[0]:
            best = (mean_total, copy.deepcopy(model.state_dict()), epoch)
        if snapshot_dir is not None:
            save_checkpoint(ckpt, Path(snapshot_dir) / f"epoch_{epoch:03d}")
        if on_epoch is not None:
            on_epoch(ckpt)

    if out_dir is not None:
        save_checkpoint(ckpt, out_dir)
        best_model = copy.deepcopy(model)
        best_model.load_state_dict(best[1])
        save_checkpoint(
            Checkpoint(model=best_model, vocab=vocab, config=config, stage="cl", epoch=best[2], log=log),
            Path(out_dir) / "best",
        )
    return ckpt


def finetune(
    checkpoint: Checkpoint,
    split: CorpusSplit,
    config: RunConfig | None = None,
    *,
    trainable: str = "all",
    out_dir: str | Path | None = None,
) -> Checkpoint:
    """Stage 2: classification training over single contracts; the last epoch is the product.

    ``trainable="classifier"`` freezes everything except the classifier weights.
    The input checkpoint is left untouched.
    """
    if checkpoint.stage not in ("init", "cl"):
        raise StageMismatch(f"stage mismatch: fine-tuning expects a cl or init checkpoint, got {checkpoint.stage}")
    config = config or checkpoint.config
    task = config.task
    model = copy.deepcopy(checkpoint.model)
    model.train()
    if trainable == "all":
        params = list(model.parameters())
    elif trainable == "classifier":
        params = list(model.classifier.parameters())
        for p in model.parameters():
            p.requires_grad_(False)
        for p in params:
            p.requires_grad_(True)
    else:
        raise ValueError(f"unknown trainable set {trainable!r}")
    optimizer = make_optimizer(model, config, params)
    log = list(checkpoint.log)
    train = split.train
    labels = [c.label(task) for c in train]

    for epoch in range(1, config.epochs_ft + 1):
        started = time.perf_counter()
        model.train()
        rng = _epoch_rng(config.seed, 2, epoch)
        total, count = 0.0, 0
        for bi, idx in enumerate(batch_indices(len(train), config.batch_size, rng)):
            loss = stage2_loss(model, [train[i].token_ids for i in idx], [labels[i] for i in idx])
            _check_finite(loss.item(), "ft", epoch, bi)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            count += len(idx)
        recalibrate_statistics(model, train)
        report = LossReport(loss_cla=total / count)
        log.append(
            {
                "epoch": epoch,
                "stage": "ft",
                **report.as_dict(),
                "wall_time": round(time.perf_counter() - started, 4),
                "seed": config.seed,
            }
        )
        logger.info("ft epoch %d: cla=%.5f", epoch, report.loss_cla)

    for p in model.parameters():
        p.requires_grad_(True)
    result = Checkpoint(model=model, vocab=checkpoint.vocab, config=config, stage="ft", epoch=config.epochs_ft, log=log)
    if out_dir is not None:
        save_checkpoint(result, out_dir)
    return result


@torch.no_grad()
def recalibrate_statistics(model: ClearModel, contracts: Sequence[EncodedContract], batch_size: int = 64) -> None:
    """Set the projection's running statistics to the exact unmasked training-set statistics.

    An exponential moving average lags behind parameters that are still
    moving; when CLS' varies little across contracts that lag swamps the
    signal in eval mode. Called at the end of every epoch.
    """
    if model.projection.batch_norm is None or len(contracts) < 2:
        return
    hs = []
    for start in range(0, len(contracts), batch_size):
        ids, valid = pad_batch([c.token_ids for c in contracts[start : start + batch_size]])
        cls_prime, _, _ = model.summarize(ids, valid)
        hs.append(model.projection.pre_batchnorm(cls_prime))
    model.projection.set_statistics(torch.cat(hs))


@torch.no_grad()
def encode_eval(model: ClearModel, contracts: Sequence[EncodedContract], batch_size: int = 64):
    """Eval-mode (v, probability) for each contract, batch by batch."""
    model.eval()
    vs, probs = [], []
    for start in range(0, len(contracts), batch_size):
        chunk = contracts[start : start + batch_size]
        ids, valid = pad_batch([c.token_ids for c in chunk])
        out = model.encode(ids, valid, None, mode="eval")
        vs.append(out.v)
        probs.append(model.classify(out.features, out.v, valid))
    return torch.cat(vs), torch.cat(probs)


# ------------------------------------------------------------------ checkpoint I/O


def _write_array(path: Path, tensor: torch.Tensor) -> None:
    code, np_dtype = _DTYPE_CODES[tensor.dtype]
    arr = tensor.detach().cpu().numpy().astype(np_dtype, copy=False)
    header = _MAGIC + struct.pack("<HBB", CHECKPOINT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    path.write_bytes(header + np.ascontiguousarray(arr).tobytes())


def _read_array(path: Path) -> torch.Tensor:
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path.name}: bad magic")
    version, code, ndim = struct.unpack_from("<HBB", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path.name}: array format version {version} != {CHECKPOINT_VERSION}")
    if code not in _CODE_DTYPES:
        raise CheckpointError(f"{path.name}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 8)
    offset = 8 + 8 * ndim
    torch_dtype, np_dtype = _CODE_DTYPES[code]
    arr = np.frombuffer(raw, dtype=np_dtype, offset=offset)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"{path.name}: payload does not match shape {shape}")
    native = np.dtype(np_dtype).newbyteorder("=")
    return torch.from_numpy(arr.reshape(shape).astype(native, copy=True)).to(torch_dtype)


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """Directory layout: manifest.txt, vocab.txt, log.jsonl, params/<name>.bin."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    state = checkpoint.model.state_dict()
    lines = [
        "format=clear-checkpoint",
        f"version={CHECKPOINT_VERSION}",
        f"stage={checkpoint.stage}",
        f"epoch={checkpoint.epoch}",
        f"vocab_hash={checkpoint.vocab.hash}",
        f"vocab_size={len(checkpoint.vocab)}",
        "optimizer=adamw betas=0.9,0.999 eps=1e-08",
    ]
    lines += [f"config.{line}" for line in checkpoint.config.to_text().splitlines()]
    for name, tensor in state.items():
        shape = "x".join(str(s) for s in tensor.shape) or "scalar"
        lines.append(f"param.{name}={_DTYPE_CODES[tensor.dtype][1]}:{shape}")
        _write_array(path / "params" / f"{name}.bin", tensor)
    (path / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    checkpoint.vocab.save(path / "vocab.txt")
    with open(path / "log.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for entry in checkpoint.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path, expected_vocab_hash: str | None = None) -> Checkpoint:
    from .config import parse_config_text

    path = Path(path)
    manifest_path = path / "manifest.txt"
    if not manifest_path.exists():
        raise CheckpointError(f"{path}: no manifest.txt")
    manifest: dict[str, str] = {}
    config_lines, param_specs = [], {}
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("=")
        if key.startswith("config."):
            config_lines.append(f"{key[len('config.'):]}={value}")
        elif key.startswith("param."):
            param_specs[key[len("param.") :]] = value
        else:
            manifest[key] = value
    if manifest.get("format") != "clear-checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    if manifest.get("version") != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    stage = manifest.get("stage")
    if stage not in STAGES:
        raise CheckpointError(f"{path}: unknown stage {stage!r}")
    try:
        config = parse_config_text("\n".join(config_lines))
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc

    vocab = Vocabulary.load(path / "vocab.txt")
    if vocab.hash != manifest.get("vocab_hash"):
        raise CheckpointError(f"{path}: vocabulary file does not match the manifest hash")
    if expected_vocab_hash is not None and vocab.hash != expected_vocab_hash:
        raise CheckpointError(f"{path}: vocabulary hash mismatch")

    model = build_model(config.encoder_config(len(vocab)), seed=config.seed, dtype=_torch_dtype(config.dtype))
    expected = model.state_dict()
    if set(param_specs) != set(expected):
        raise CheckpointError(f"{path}: parameter set does not match the configuration")
    state = {}
    for name, ref in expected.items():
        tensor = _read_array(path / "params" / f"{name}.bin")
        if tuple(tensor.shape) != tuple(ref.shape) or tensor.dtype != ref.dtype:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {tuple(tensor.shape)} vs {tuple(ref.shape)}")
        spec_shape = "x".join(str(s) for s in tensor.shape) or "scalar"
        if param_specs[name] != f"{_DTYPE_CODES[tensor.dtype][1]}:{spec_shape}":
            raise CheckpointError(f"{path}: manifest entry for {name} disagrees with its array file")
        state[name] = tensor
    model.load_state_dict(state)
    log = []
    log_path = path / "log.jsonl"
    if log_path.exists():
        log = [json.loads(line) for line in log_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return Checkpoint(model=model, vocab=vocab, config=config, stage=stage, epoch=int(manifest["epoch"]), log=log)
