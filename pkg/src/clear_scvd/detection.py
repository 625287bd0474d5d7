"""Vulnerability scoring: fuse pooled token features with the correlation vector."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .corpus import encode, tokenize
from .encoder import ClearModel, EncoderError, pad_batch
from .training import Checkpoint, StageMismatch

DEFAULT_THRESHOLD = 0.5


class DetectionError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    id: str
    probability: float
    verdict: int
    task: str
    threshold: float

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "task": self.task,
            "probability": round(self.probability, 6),
            "verdict": self.verdict,
        }


def classify(
    features: torch.Tensor, v: torch.Tensor, model: ClearModel, valid: torch.Tensor | None = None
) -> torch.Tensor:
    """Probability that each contract is vulnerable.

    ``features`` is (n, k) with ``v`` (k,) for one contract, or (B, L, k) with
    ``v`` (B, k) and a (B, L) ``valid`` mask excluding padded rows from the mean.
    """
    single = features.dim() == 2
    if single:
        features, v = features[None], v[None]
    if features.shape[1] == 0:
        raise DetectionError("cannot classify a contract with no token features")
    if valid is None:
        valid = torch.ones(features.shape[:2], dtype=torch.bool)
    try:
        prob = model.classify(features, v, valid)
    except EncoderError as exc:
        raise DetectionError(str(exc)) from exc
    return prob[0] if single else prob


def predict(probability: float, threshold: float = DEFAULT_THRESHOLD) -> int:
    if not 0.0 < threshold < 1.0:
        raise DetectionError("threshold must lie in (0, 1)")
    return int(probability >= threshold)


@torch.no_grad()
def score_ids(model: ClearModel, token_ids) -> float:
    model.eval()
    ids, valid = pad_batch([token_ids])
    out = model.encode(ids, valid, None, mode="eval")
    return float(model.classify(out.features, out.v, valid)[0])


def detect(
    source: str,
    checkpoint: Checkpoint,
    task: str | None = None,
    *,
    id: str = "",
    threshold: float | None = None,
) -> Prediction:
    """Tokenize, encode without masking, and score one contract with a fine-tuned model."""
    if checkpoint.stage != "ft":
        raise StageMismatch(f"stage mismatch: detection needs a fine-tuned model, got stage {checkpoint.stage}")
    task = task or checkpoint.task
    if task != checkpoint.task:
        raise DetectionError(f"model was fine-tuned for {checkpoint.task}, not {task}")
    threshold = checkpoint.config.threshold if threshold is None else threshold
    contract = encode(tokenize(source), checkpoint.vocab, checkpoint.config.max_len, id=id)
    probability = score_ids(checkpoint.model, contract.token_ids)
    return Prediction(id=id, probability=probability, verdict=predict(probability, threshold), task=task, threshold=threshold)
