"""POS-set construction and contract-pair sampling with correlation labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import EncodedContract

VV = "V-V"
VN = "V-N"

ABLATIONS = ("none", "mask_VV", "mask_VN")
_ABLATION_ALIASES = {"none": "none", "mvv": "mask_VV", "mask_VV": "mask_VV", "mvn": "mask_VN", "mask_VN": "mask_VN"}


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class ContractPair:
    a: EncodedContract
    b: EncodedContract
    label: int
    relationship: str


@dataclass(frozen=True)
class SamplingPlan:
    seed: int = 0
    ablation: str = "none"
    resample_each_epoch: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, "ablation", _ABLATION_ALIASES[self.ablation])
        except KeyError:
            raise SamplingError(f"unknown ablation {self.ablation!r}") from None


def build_pos_set(train: Sequence[EncodedContract], task: str) -> set[str]:
    if not train:
        raise SamplingError("training set is empty")
    pos = {c.id for c in train if c.label(task) == 1}
    if not pos:
        raise SamplingError(f"empty POS set for task {task}")
    return pos


def correlation_label(label_a: int, label_b: int) -> int:
    """1 for a vulnerable/vulnerable pair, 0 for non-vulnerable/vulnerable."""
    if label_b != 1:
        raise SamplingError("N-N pairing forbidden: the partner must come from the POS set")
    if label_a not in (0, 1):
        raise SamplingError(f"label must be 0 or 1, got {label_a!r}")
    return 1 if label_a == 1 else 0


def sample_pairs(
    train: Sequence[EncodedContract],
    pos_set: set[str],
    plan: SamplingPlan,
    task: str,
    epoch: int = 0,
) -> list[ContractPair]:
    """Pair every training contract with a uniformly drawn POS member.

    Self-pairs are allowed. Ablation masks drop the named relationship after
    sampling, so masked plans emit fewer pairs.
    """
    if not pos_set:
        raise SamplingError(f"empty POS set for task {task}")
    pos_members = [c for c in train if c.id in pos_set]
    if len(pos_members) != len(pos_set):
        raise SamplingError("POS set references contracts outside the training set")
    stream = epoch if plan.resample_each_epoch else 0
    rng = np.random.default_rng(np.random.SeedSequence([plan.seed, stream]))
    partners = rng.integers(len(pos_members), size=len(train))

    pairs = []
    for contract, j in zip(train, partners):
        partner = pos_members[int(j)]
        label = correlation_label(contract.label(task), partner.label(task))
        relationship = VV if label == 1 else VN
        if (plan.ablation == "mask_VV" and relationship == VV) or (
            plan.ablation == "mask_VN" and relationship == VN
        ):
            continue
        pairs.append(ContractPair(contract, partner, label, relationship))
    return pairs
