"""Accuracy, the entropy-threshold divergence estimate, and feature snapshots."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import ContractError
from .models import UodaModel, predict

DOMAINS = ("source", "target_labeled", "target_unlabeled")


def accuracy_from_log_probs(log_probs: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ContractError("accuracy of an empty example list")
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return float(np.mean(np.argmax(log_probs, axis=1) == labels))


def accuracy(model: UodaModel, head: int, examples) -> float:
    """Top-1 accuracy of one head over a LabeledSet or a list of (x, y) pairs."""
    if hasattr(examples, "x") and hasattr(examples, "y"):
        x, y = examples.x, examples.y
    else:
        examples = list(examples)
        if not examples:
            raise ContractError("accuracy of an empty example list")
        x = np.stack([np.asarray(e[0], dtype=np.float64) for e in examples])
        y = np.array([int(e[1]) for e in examples])
    if head not in (1, 2):
        raise ContractError(f"head must be 1 or 2, got {head!r}")
    if len(y) == 0:
        raise ContractError("accuracy of an empty example list")
    _, lp1, lp2 = predict(model, x)
    return accuracy_from_log_probs(lp1 if head == 1 else lp2, y)


def row_entropy(log_probs: np.ndarray) -> np.ndarray:
    """Per-row -sum p log p from log-probabilities."""
    return -np.sum(np.exp(log_probs) * log_probs, axis=1)


def default_gamma_grid(num_classes: int, n: int = 20) -> np.ndarray:
    """``n`` evenly spaced thresholds strictly inside (0, ln K)."""
    return np.log(num_classes) * np.arange(1, n + 1) / (n + 1)


@dataclass
class DivergenceReport:
    gamma: List[float]
    frac_src: List[float]
    frac_tar: List[float]
    d_hat: List[float]
    d_hat_max: float
    n_src: int = 0
    n_tar: int = 0

    def to_json(self) -> dict:
        return {"gamma": self.gamma, "frac_src": self.frac_src, "frac_tar": self.frac_tar,
                "d_hat": self.d_hat, "d_hat_max": self.d_hat_max}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def _exceedance(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    # count of values >= gamma, ties included
    ordered = np.sort(values)
    return len(ordered) - np.searchsorted(ordered, grid, side="left")


def divergence_from_entropies(src_entropy, tar_entropy, gamma_grid) -> DivergenceReport:
    """d_hat(gamma) = 2 (P_u[H >= gamma] - P_s[H >= gamma]) over a threshold grid."""
    src = np.asarray(src_entropy, dtype=np.float64).ravel()
    tar = np.asarray(tar_entropy, dtype=np.float64).ravel()
    grid = np.asarray(gamma_grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise ContractError("gamma grid is empty")
    if src.size == 0 or tar.size == 0:
        raise ContractError("source and unlabeled samples must be non-empty")
    frac_src = _exceedance(src, grid) / src.size
    frac_tar = _exceedance(tar, grid) / tar.size
    d_hat = 2.0 * (frac_tar - frac_src)
    return DivergenceReport(grid.tolist(), frac_src.tolist(), frac_tar.tolist(), d_hat.tolist(),
                            float(d_hat.max()), int(src.size), int(tar.size))


def estimate_divergence(model: UodaModel, source_x, unlabeled_x, gamma_grid=None) -> DivergenceReport:
    """Head-1 entropies on S against head-2 entropies on U."""
    k = model.num_classes
    grid = default_gamma_grid(k) if gamma_grid is None else np.asarray(gamma_grid, dtype=np.float64)
    if grid.size == 0:
        raise ContractError("gamma grid is empty")
    if np.any(grid <= 0) or np.any(grid >= np.log(k)):
        raise ContractError(f"gamma values must lie in (0, ln {k})")
    if len(source_x) == 0 or len(unlabeled_x) == 0:
        raise ContractError("source and unlabeled samples must be non-empty")
    _, lp1, _ = predict(model, source_x)
    _, _, lp2 = predict(model, unlabeled_x)
    return divergence_from_entropies(row_entropy(lp1), row_entropy(lp2), grid)


@dataclass
class BoundReport:
    empirical_source_risk: float
    d_hat_max: float
    bound_partial: float
    delta: str = "unknown"

    def to_json(self) -> dict:
        return asdict(self)


def assemble_bound(source_risk: float, d_hat_max: float) -> BoundReport:
    return BoundReport(source_risk, d_hat_max, source_risk + 0.5 * d_hat_max)


def bound_report(model: UodaModel, source, unlabeled_x, gamma_grid=None) -> BoundReport:
    """Source risk of head 1 plus half the divergence estimate; the constant term stays symbolic."""
    report = estimate_divergence(model, source.x, unlabeled_x, gamma_grid)
    return assemble_bound(1.0 - accuracy(model, 1, source), report.d_hat_max)


@dataclass
class FeatureSnapshot:
    epoch: int
    features: np.ndarray
    domain: List[str]
    label: np.ndarray
    pred1: np.ndarray
    pred2: np.ndarray
    feature_dim: int = field(init=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ContractError("snapshot features must be a matrix")
        self.feature_dim = self.features.shape[1]
        n = len(self.features)
        if not (len(self.domain) == len(self.label) == len(self.pred1) == len(self.pred2) == n):
            raise ContractError("snapshot columns have different lengths")

    def __len__(self):
        return len(self.features)

    def write_csv(self, path) -> None:
        cols = [f"f_{i}" for i in range(self.feature_dim)] + ["domain", "label", "pred1", "pred2", "epoch"]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i in range(len(self)):
                w.writerow([*(repr(float(v)) for v in self.features[i]), self.domain[i],
                            int(self.label[i]), int(self.pred1[i]), int(self.pred2[i]), self.epoch])

    @classmethod
    def read_csv(cls, path) -> "FeatureSnapshot":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ContractError(f"{path}: empty snapshot file")
            fcols = [i for i, c in enumerate(header) if c.startswith("f_")]
            idx = {c: header.index(c) for c in ("domain", "label", "pred1", "pred2", "epoch")}
            feats, dom, lab, p1, p2, epochs = [], [], [], [], [], []
            for row in reader:
                if not row:
                    continue
                feats.append([float(row[i]) for i in fcols])
                dom.append(row[idx["domain"]])
                lab.append(int(row[idx["label"]]))
                p1.append(int(row[idx["pred1"]]))
                p2.append(int(row[idx["pred2"]]))
                epochs.append(int(row[idx["epoch"]]))
        features = np.asarray(feats, dtype=np.float64).reshape(len(feats), len(fcols))
        return cls(epochs[0] if epochs else 0, features, dom, np.asarray(lab, dtype=np.int64),
                   np.asarray(p1, dtype=np.int64), np.asarray(p2, dtype=np.int64))


def snapshot_features(model: UodaModel, dataset, epoch: int) -> FeatureSnapshot:
    """Generator features and both heads' predictions for S, T and U (U labels recorded as -1)."""
    parts = [
        ("source", dataset.source.x, dataset.source.y),
        ("target_labeled", dataset.target_labeled.x, dataset.target_labeled.y),
        ("target_unlabeled", dataset.target_unlabeled,
         np.full(len(dataset.target_unlabeled), -1, dtype=np.int64)),
    ]
    x = np.concatenate([p[1].reshape(-1, model.input_dim) for p in parts])
    labels = np.concatenate([p[2] for p in parts]).astype(np.int64)
    domain = [name for name, xs, _ in parts for _ in range(len(xs))]
    f, lp1, lp2 = predict(model, x)
    return FeatureSnapshot(epoch, f, domain, labels, lp1.argmax(axis=1), lp2.argmax(axis=1))
