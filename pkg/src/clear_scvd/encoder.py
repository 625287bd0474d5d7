"""Contract encoder: MLM augmentation stack, CLS summary, feature stack, projection head.

One :class:`ClearModel` instance holds every learnable array used by both
training stages, so the two members of a contract pair are always encoded
by the same parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import MASK, PAD

ENCODER_KINDS = ("transformer", "rnn", "lstm", "gru")
PROJECTION_NORMS = ("layer", "l2", "none")


class EncoderError(ValueError):
    pass


class UninitializedStatisticsError(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    vocab_size: int
    k: int = 128
    heads: int = 4
    layers_mlm: int = 3
    layers_feat: int = 3
    max_len: int = 256
    mask_rate: float = 0.3
    encoder_kind: str = "transformer"
    ffn_dim: int = 0  # 0 -> 4 * k
    projection_norm: str = "layer"
    projection_batchnorm: bool = True

    def __post_init__(self):
        if self.vocab_size < 4:
            raise EncoderError("vocab_size must cover the reserved tokens plus one")
        if self.k < 2 or self.k % 2:
            raise EncoderError("k must be even (paired sin/cos positional columns)")
        if self.heads < 1 or self.k % self.heads:
            raise EncoderError(f"k={self.k} is not divisible by heads={self.heads}")
        if self.layers_mlm < 0 or self.layers_feat < 0:
            raise EncoderError("layer counts must be non-negative")
        if not 0.0 < self.mask_rate < 1.0:
            raise EncoderError("mask_rate must lie in (0, 1)")
        if self.encoder_kind not in ENCODER_KINDS:
            raise EncoderError(f"unknown encoder kind {self.encoder_kind!r}")
        if self.projection_norm not in PROJECTION_NORMS:
            raise EncoderError(f"unknown projection norm {self.projection_norm!r}")
        if self.max_len < 1:
            raise EncoderError("max_len must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------------ masking


@dataclass(frozen=True)
class MaskedBatch:
    masked_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    mask_positions: tuple[int, ...]


def mask_count(n: int, mask_rate: float) -> int:
    """max(1, round-half-up(mask_rate * n))."""
    return max(1, math.floor(mask_rate * n + 0.5))


def apply_mlm_mask(
    ids: Sequence[int], mask_rate: float, seed: int | np.random.Generator = 0
) -> MaskedBatch:
    """Replace a uniformly chosen subset of positions with MASK; everything else is kept."""
    n = len(ids)
    if n < 1:
        raise EncoderError("cannot mask an empty sequence")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    positions = np.sort(rng.choice(n, size=mask_count(n, mask_rate), replace=False))
    masked = list(ids)
    for p in positions:
        masked[p] = MASK
    return MaskedBatch(tuple(masked), tuple(ids), tuple(int(p) for p in positions))


# ------------------------------------------------------------- pure tensor helpers


def positional_encoding(n: int, k: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Sinusoidal table: even columns sin(pos / 10000^(2l/k)), odd columns cos of the same angle."""
    if k % 2:
        raise EncoderError("k must be even")
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    l = torch.arange(k // 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, 2.0 * l / k)
    pe = torch.empty(n, k, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe.to(dtype)


def compute_cls(x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled sum of token rows, (1/sqrt(n)) * sum_i x_i.

    ``x`` is (n, k) or (B, L, k); with a batch, ``valid`` (B, L) marks real
    tokens and n is the per-row count of real tokens.
    """
    if x.dim() == 2:
        n = x.shape[0]
        if n < 1:
            raise EncoderError("compute_cls needs at least one row")
        return x.sum(dim=0) / math.sqrt(n)
    if valid is None:
        valid = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
    counts = valid.sum(dim=1, keepdim=True).to(x.dtype)
    summed = (x * valid[..., None].to(x.dtype)).sum(dim=1)
    return summed / counts.sqrt()


def pad_batch(sequences: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad id sequences with PAD; returns (ids (B, L), valid mask (B, L))."""
    lengths = [len(s) for s in sequences]
    if not lengths or min(lengths) < 1:
        raise EncoderError("every sequence needs at least one token")
    ids = torch.full((len(sequences), max(lengths)), PAD, dtype=torch.long)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = torch.as_tensor(seq, dtype=torch.long)
    valid = torch.arange(ids.shape[1])[None, :] < torch.as_tensor(lengths)[:, None]
    return ids, valid


# ------------------------------------------------------------------------ modules


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, k: int, heads: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(k, k)
        self.key = nn.Linear(k, k)
        self.value = nn.Linear(k, k)
        self.out = nn.Linear(k, k)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        b, t, k = x.shape
        h = self.heads
        q = self.query(x).view(b, t, h, -1).transpose(1, 2)
        key = self.key(x).view(b, t, h, -1).transpose(1, 2)
        v = self.value(x).view(b, t, h, -1).transpose(1, 2)
        # padded keys receive no attention; padded queries are computed and ignored
        out = F.scaled_dot_product_attention(q, key, v, attn_mask=valid[:, None, None, :])
        return self.out(out.transpose(1, 2).reshape(b, t, k))


class TransformerLayer(nn.Module):
    """Post-norm encoder block: attention and feed-forward sublayers with residuals."""

    def __init__(self, k: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attention = MultiHeadSelfAttention(k, heads)
        self.norm1 = nn.LayerNorm(k)
        self.ffn = nn.Sequential(nn.Linear(k, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, k))
        self.norm2 = nn.LayerNorm(k)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attention(x, valid))
        return self.norm2(x + self.ffn(x))


class ProjectionHead(nn.Module):
    """v = BatchNorm(W2 . Norm(W1 . CLS')) with Norm in {LayerNorm, L2 row norm, identity}."""

    def __init__(self, k: int, norm: str = "layer", batchnorm: bool = True):
        super().__init__()
        self.w1 = nn.Linear(k, k, bias=False)
        self.w2 = nn.Linear(k, k, bias=False)
        self.norm_kind = norm
        self.layer_norm = nn.LayerNorm(k) if norm == "layer" else None
        self.batch_norm = nn.BatchNorm1d(k) if batchnorm else None

    @property
    def initialized(self) -> bool:
        return self.batch_norm is None or int(self.batch_norm.num_batches_tracked) > 0

    def pre_batchnorm(self, cls_prime: torch.Tensor) -> torch.Tensor:
        h = self.w1(cls_prime)
        if self.norm_kind == "layer":
            h = self.layer_norm(h)
        elif self.norm_kind == "l2":
            h = F.normalize(h, p=2.0, dim=-1)
        return self.w2(h)

    @torch.no_grad()
    def set_statistics(self, h: torch.Tensor) -> None:
        """Overwrite the running statistics with the exact mean/variance of ``h`` (N, k)."""
        bn = self.batch_norm
        if bn is None:
            return
        if h.shape[0] < 2:
            raise EncoderError("need at least two vectors to estimate normalization statistics")
        bn.running_mean.copy_(h.mean(dim=0))
        bn.running_var.copy_(h.var(dim=0, unbiased=True))
        bn.num_batches_tracked.clamp_(min=1)

    def forward(self, cls_prime: torch.Tensor, mode: str = "train") -> torch.Tensor:
        h = self.pre_batchnorm(cls_prime)
        bn = self.batch_norm
        if bn is None:
            return h
        if mode == "train":
            if h.shape[0] < 2:
                raise EncoderError("train-mode batch normalization needs at least two vectors")
            with torch.no_grad():
                bn.num_batches_tracked += 1
            return F.batch_norm(
                h, bn.running_mean, bn.running_var, bn.weight, bn.bias,
                training=True, momentum=bn.momentum, eps=bn.eps,
            )
        if mode != "eval":
            raise EncoderError(f"unknown projection mode {mode!r}")
        if not self.initialized:
            raise UninitializedStatisticsError("uninitialized running statistics")
        return F.batch_norm(
            h, bn.running_mean, bn.running_var, bn.weight, bn.bias,
            training=False, momentum=0.0, eps=bn.eps,
        )


@dataclass
class EncoderOutput:
    cls_prime: torch.Tensor  # (B, k)
    features: torch.Tensor  # (B, L, k); rows beyond each length are padding
    v: torch.Tensor  # (B, k)
    mlm_logits: torch.Tensor  # (m, V), one row per masked position, row-major over (b, pos)
    valid: torch.Tensor  # (B, L)


class ClearModel(nn.Module):
    """All learnable state: embeddings, both stacks, MLM head, projection, classifier."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        k, v = config.k, config.vocab_size
        ffn = config.ffn_dim or 4 * k
        self.embedding = nn.Embedding(v, k)
        self.mlm_layers = nn.ModuleList(TransformerLayer(k, config.heads, ffn) for _ in range(config.layers_mlm))
        self.mlm_head = nn.Linear(k, v)
        if config.encoder_kind == "transformer":
            self.feat_layers = nn.ModuleList(
                TransformerLayer(k, config.heads, ffn) for _ in range(config.layers_feat)
            )
        else:
            rnn_cls = {"rnn": nn.RNN, "lstm": nn.LSTM, "gru": nn.GRU}[config.encoder_kind]
            self.recurrent = rnn_cls(k, k, batch_first=True)
            self.summary = nn.Linear(k, k)
        self.projection = ProjectionHead(k, config.projection_norm, config.projection_batchnorm)
        self.classifier = nn.Linear(2 * k, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                nn.init.uniform_(module.weight, -bound, bound)
                if module.bias is not None:
                    nn.init.uniform_(module.bias, -bound, bound)
            elif isinstance(module, nn.Embedding):
                nn.init.uniform_(module.weight, -1.0, 1.0)
            elif isinstance(module, (nn.RNN, nn.LSTM, nn.GRU)):
                bound = 1.0 / math.sqrt(module.hidden_size)
                for p in module.parameters():
                    nn.init.uniform_(p, -bound, bound)

    @property
    def dtype(self) -> torch.dtype:
        return self.embedding.weight.dtype

    def parameter_groups(self) -> dict[str, list[str]]:
        """Parameter names grouped by role; used for gradient checks and diagnostics."""
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            head = name.split(".")[0]
            if head in ("mlm_layers", "feat_layers"):
                head = ".".join(name.split(".")[:2])
            elif head == "projection":
                head = ".".join(name.split(".")[:2])
            groups.setdefault(head, []).append(name)
        return groups

    # -- stages of the forward pass -------------------------------------------------

    def mlm_forward(
        self, ids: torch.Tensor, valid: torch.Tensor, mask_positions: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Contextual embeddings X' (B, L, k) and vocabulary logits at masked positions."""
        if int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0:
            raise EncoderError("token id outside the vocabulary")
        x = self.embedding(ids)
        for layer in self.mlm_layers:
            x = layer(x, valid)
        if mask_positions is None:
            logits = x.new_zeros((0, self.config.vocab_size))
        else:
            logits = self.mlm_head(x[mask_positions & valid])
        return x, logits

    def feature_forward(
        self, cls: torch.Tensor, x: torch.Tensor, pe: torch.Tensor, valid: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Attend over CLS prepended to X' + PE; position 0 of the output is CLS'."""
        seq = torch.cat([cls[:, None, :], x + pe], dim=1)
        seq_valid = torch.cat([valid.new_ones((valid.shape[0], 1)), valid], dim=1)
        for layer in self.feat_layers:
            seq = layer(seq, seq_valid)
        return seq[:, 0], seq[:, 1:]

    def recurrent_encode(self, x: torch.Tensor, valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Unidirectional recurrence over X'; summary is the projected last real step."""
        out, _ = self.recurrent(x)
        last = valid.sum(dim=1) - 1
        final = out[torch.arange(out.shape[0]), last]
        return self.summary(final), out

    def project(self, cls_prime: torch.Tensor, mode: str = "train") -> torch.Tensor:
        return self.projection(cls_prime, mode)

    def classify(self, features: torch.Tensor, v: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """sigmoid(W3 . (mean of real token rows ++ v) + b), shape (B,)."""
        counts = valid.sum(dim=1, keepdim=True)
        if int(counts.min()) < 1:
            raise EncoderError("cannot pool an empty feature matrix")
        pooled = (features * valid[..., None].to(features.dtype)).sum(dim=1) / counts.to(features.dtype)
        return torch.sigmoid(self.classifier(torch.cat([pooled, v], dim=-1))).squeeze(-1)

    def summarize(
        self, ids: torch.Tensor, valid: torch.Tensor, mask_positions: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Everything before the projection: (CLS', F, MLM logits)."""
        x, logits = self.mlm_forward(ids, valid, mask_positions)
        if self.config.encoder_kind == "transformer":
            cls = compute_cls(x, valid)
            pe = positional_encoding(x.shape[1], self.config.k, dtype=x.dtype)
            cls_prime, feats = self.feature_forward(cls, x, pe, valid)
        else:
            cls_prime, feats = self.recurrent_encode(x, valid)
        return cls_prime, feats, logits

    def encode(
        self,
        ids: torch.Tensor,
        valid: torch.Tensor,
        mask_positions: torch.Tensor | None = None,
        mode: str = "train",
    ) -> EncoderOutput:
        cls_prime, feats, logits = self.summarize(ids, valid, mask_positions)
        v = self.project(cls_prime, mode)
        return EncoderOutput(cls_prime, feats, v, logits, valid)


def build_model(config: EncoderConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ClearModel:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = ClearModel(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)
