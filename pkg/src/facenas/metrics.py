"""Regression metrics over clip-level predictions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class PredictionSet:
    clip_ids: tuple[str, ...]
    predictions: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "clip_ids", tuple(self.clip_ids))
        object.__setattr__(self, "predictions", np.asarray(self.predictions, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=np.float64).reshape(-1))
        n = len(self.clip_ids)
        if self.predictions.size != n or self.targets.size != n:
            raise ContractError(f"{n} clip ids but {self.predictions.size} predictions and {self.targets.size} targets")
        if len(set(self.clip_ids)) != n:
            raise ContractError("clip ids must be unique")
        if not (np.isfinite(self.predictions).all() and np.isfinite(self.targets).all()):
            raise ContractError("predictions and targets must be finite")

    def __len__(self):
        return len(self.clip_ids)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, float, float]]) -> "PredictionSet":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), np.array([p[1] for p in pairs]), np.array([p[2] for p in pairs]))

    @classmethod
    def from_csv(cls, path) -> "PredictionSet":
        """CSV with header clip_id,prediction,target."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"clip_id", "prediction", "target"} - set(reader.fieldnames or ())
            if missing:
                raise ContractError(f"{path}: missing columns {sorted(missing)}")
            rows = [(r["clip_id"], float(r["prediction"]), float(r["target"])) for r in reader]
        return cls.from_pairs(rows)

    def to_csv(self, path):
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clip_id", "prediction", "target"])
            for c, p, t in zip(self.clip_ids, self.predictions, self.targets):
                w.writerow([c, repr(float(p)), repr(float(t))])


def _check(preds: PredictionSet):
    if len(preds) == 0:
        raise ContractError("metrics need at least one prediction")


def rmse(preds: PredictionSet) -> float:
    _check(preds)
    return math.sqrt(float(np.mean((preds.predictions - preds.targets) ** 2)))


def mae(preds: PredictionSet) -> float:
    _check(preds)
    return float(np.mean(np.abs(preds.predictions - preds.targets)))
