"""Dice scoring and split-level evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, ParameterError
from .segmodel import forward, load_checkpoint, predict_mask
from .synthdata import DatasetReader


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|) for binary masks; two empty masks score 1.0."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ParameterError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    a = pred.astype(bool)
    b = truth.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def batch_dice(preds: np.ndarray, truths: np.ndarray) -> list[float]:
    return [dice(p, t) for p, t in zip(preds, truths)]


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation (ddof=0)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DataError("cannot aggregate an empty list")
    return float(arr.mean()), float(arr.std(ddof=0))


@dataclass
class EvalReport:
    split: str
    ids: list[str]
    per_image: list[float]
    mean: float
    std: float
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())

    @classmethod
    def from_records(cls, split: str, ids: list[str], per_image: list[float], meta: dict | None = None) -> "EvalReport":
        m, s = mean_std(per_image)
        return cls(split, list(ids), [float(v) for v in per_image], m, s, dict(meta or {}))


def predict_masks(model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    return predict_mask(forward(model, images, batch_size=batch_size))


def evaluate(model_or_checkpoint, reader: DatasetReader, split: str, audit: bool = False, meta: dict | None = None) -> EvalReport:
    """Per-image Dice of argmax predictions on ``split``.

    ``model_or_checkpoint`` is a model or a checkpoint path. Reading the masks
    of the unlabeled split requires ``audit=True``.
    """
    if isinstance(model_or_checkpoint, (str, Path)):
        model, header = load_checkpoint(model_or_checkpoint)
        meta = {**header.get("meta", {}), **(meta or {})}
    else:
        model = model_or_checkpoint
    items = reader.items(split)
    if not items:
        raise DataError(f"split {split!r} is empty")
    for it in items:
        if not (reader.manifest.root / it.mask).is_file():
            raise DataError(f"missing mask for {it.id} in split {split!r}")
    truths = reader.load_masks(items, audit=audit)
    images = reader.load_images(items)
    with torch.no_grad():
        preds = predict_masks(model, images)
    return EvalReport.from_records(split, [it.id for it in items], batch_dice(preds, truths), meta)
