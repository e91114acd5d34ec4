"""Versioned JSON checkpoints for the head, prototype bank, and class prior.

Floats serialize via json's shortest round-trip representation, so a
save/load cycle reproduces every array bit for bit.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .representation import ProjectionHead, PrototypeBank
from .transport import ClassPrior

CHECKPOINT_VERSION = 1

_FIELDS = ("version", "weight", "bias", "prototypes", "beta",
           "prior_momentum", "prototype_momentum", "epoch", "known_count")


@dataclass(frozen=True)
class Checkpoint:
    version: int
    head: ProjectionHead
    bank: PrototypeBank
    prior: ClassPrior
    epoch: int
    known_count: int


def save_checkpoint(path, head: ProjectionHead, bank: PrototypeBank,
                    prior: ClassPrior, epoch: int, known_count: int) -> None:
    blob = {
        "version": CHECKPOINT_VERSION,
        "weight": head.weight.tolist(),
        "bias": head.bias.tolist(),
        "prototypes": bank.prototypes.tolist(),
        "beta": prior.beta.tolist(),
        "prior_momentum": prior.momentum,
        "prototype_momentum": bank.momentum,
        "epoch": int(epoch),
        "known_count": int(known_count),
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True, indent=2) + "\n")


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if not isinstance(blob, dict):
        raise ValidationError(f"checkpoint {path} must hold a JSON object")
    missing = [field for field in _FIELDS if field not in blob]
    if missing:
        raise ValidationError(f"checkpoint {path} is missing fields: {missing}")
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValidationError(
            f"checkpoint version {blob['version']} is unsupported (expected {CHECKPOINT_VERSION})"
        )
    head = ProjectionHead(weight=np.array(blob["weight"], dtype=float),
                          bias=np.array(blob["bias"], dtype=float))
    bank = PrototypeBank(np.array(blob["prototypes"], dtype=float),
                         momentum=float(blob["prototype_momentum"]))
    prior = ClassPrior(np.array(blob["beta"], dtype=float),
                       momentum=float(blob["prior_momentum"]))
    return Checkpoint(
        version=int(blob["version"]),
        head=head,
        bank=bank,
        prior=prior,
        epoch=int(blob["epoch"]),
        known_count=int(blob["known_count"]),
    )
