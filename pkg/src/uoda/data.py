"""Synthetic domain pairs, CSV ingestion and k-shot SSDA splits."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .autodiff import ContractError


class EmptyDatasetError(ContractError):
    pass


class CsvFormatError(ContractError):
    def __init__(self, path, message, line=None, column=None):
        self.path, self.line, self.column = str(path), line, column
        where = f"{path}" + (f":{line}" if line is not None else "")
        super().__init__(f"{where}: {message}")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from one integer seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),)))


class LabeledExample(NamedTuple):
    x: np.ndarray
    y: int


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ContractError(f"features {self.x.shape} and labels {self.y.shape} disagree")
        if not np.all(np.isfinite(self.x)):
            raise ContractError("features must be finite")
        if self.y.size and self.y.min() < 0:
            raise ContractError("labels must be non-negative")

    def __len__(self):
        return len(self.y)

    def __iter__(self):
        for xi, yi in zip(self.x, self.y):
            yield LabeledExample(xi, int(yi))

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.x[idx], self.y[idx])


class SealedLabels:
    """Ground truth of the unlabeled pool, reachable only through :meth:`reveal`."""

    __slots__ = ("_y",)

    def __init__(self, y):
        self._y = np.asarray(y, dtype=np.int64)
        self._y.flags.writeable = False

    def reveal(self) -> np.ndarray:
        return self._y

    def __len__(self):
        return len(self._y)

    def __repr__(self):
        return f"SealedLabels(n={len(self._y)})"


@dataclass
class SsdaDataset:
    source: LabeledSet
    target_labeled: LabeledSet
    target_unlabeled: np.ndarray
    target_test: LabeledSet
    num_classes: int
    unlabeled_truth: SealedLabels = field(repr=False)
    split_indices: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    k_shot: Optional[int] = None

    def __post_init__(self):
        self.target_unlabeled = np.asarray(self.target_unlabeled, dtype=np.float64)
        d = self.source.x.shape[1]
        for name, arr in (("target_labeled", self.target_labeled.x), ("target_test", self.target_test.x),
                          ("target_unlabeled", self.target_unlabeled)):
            if len(arr) and arr.shape[1] != d:
                raise ContractError(f"{name} has {arr.shape[1]} features, source has {d}")
        if len(self.unlabeled_truth) != len(self.target_unlabeled):
            raise ContractError("sealed labels do not match the unlabeled pool")
        for part in (self.source, self.target_labeled, self.target_test):
            if len(part) and part.y.max() >= self.num_classes:
                raise ContractError(f"label outside [0, {self.num_classes})")
        if self.k_shot is not None:
            counts = np.bincount(self.target_labeled.y, minlength=self.num_classes)
            if len(self.target_labeled) != self.k_shot * self.num_classes or np.any(counts != self.k_shot):
                raise ContractError(f"labeled target set is not {self.k_shot}-shot: counts {counts.tolist()}")
        n_t, n_u = len(self.target_labeled), len(self.target_unlabeled)
        if n_u < 5 * n_t:
            raise ContractError(f"unlabeled pool too small: N_u={n_u} < 5 * N_t={5 * n_t}")
        if self.split_indices:
            parts = [self.split_indices[k] for k in ("labeled", "unlabeled", "test")]
            joined = np.concatenate(parts)
            if len(np.unique(joined)) != len(joined):
                raise ContractError("labeled, unlabeled and test splits overlap")

    @property
    def input_dim(self) -> int:
        return self.source.x.shape[1]

    def without_target_labels(self) -> "SsdaDataset":
        """Same dataset with T emptied, for UDA runs."""
        empty = LabeledSet(np.empty((0, self.input_dim)), np.empty(0, dtype=np.int64))
        return SsdaDataset(self.source, empty, self.target_unlabeled, self.target_test,
                           self.num_classes, self.unlabeled_truth, {}, None)


def _moons(rng: np.random.Generator, n: int, noise_sd: float):
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    outer = np.column_stack([np.cos(t0), np.sin(t0)])
    inner = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([outer, inner])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise_sd > 0:
        x = x + rng.normal(0.0, noise_sd, x.shape)
    order = rng.permutation(n)
    return x[order], y[order]


def rotation_matrix(deg: float) -> np.ndarray:
    th = np.deg2rad(deg)
    return np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])


def gen_two_moons_pair(n_per_domain: int, rotation_deg: float, noise_sd: float, seed: int):
    """Two-moons source pool and a target pool rotated about the origin.

    Returns ``(source_pool, target_pool)`` as :class:`LabeledSet`.
    """
    if n_per_domain < 8:
        raise ContractError(f"n_per_domain must be >= 4K = 8, got {n_per_domain}")
    if noise_sd < 0:
        raise ContractError("noise_sd must be >= 0")
    xs, ys = _moons(substream(seed, "source"), n_per_domain, noise_sd)
    xt, yt = _moons(substream(seed, "target"), n_per_domain, noise_sd)
    # row vectors: x' = x R^T
    xt = xt @ rotation_matrix(rotation_deg).T
    return LabeledSet(xs, ys), LabeledSet(xt, yt)


def default_means(num_classes: int, input_dim: int, radius: float = 3.0) -> np.ndarray:
    """Class means evenly spread on [-r, r] (D = 1) or on a circle in the first two axes."""
    means = np.zeros((num_classes, input_dim))
    if input_dim == 1:
        means[:, 0] = np.linspace(-radius, radius, num_classes)
    else:
        ang = 2 * np.pi * np.arange(num_classes) / num_classes
        means[:, 0] = radius * np.cos(ang)
        means[:, 1] = radius * np.sin(ang)
    return means


def gen_gaussian_shift_pair(num_classes: int, input_dim: int, n_per_class: int, mean_shift,
                            seed: int, means=None):
    """Unit-covariance Gaussian blobs; target means are source means plus ``mean_shift``."""
    if num_classes < 2 or input_dim < 1 or n_per_class < 1:
        raise ContractError("need num_classes >= 2, input_dim >= 1, n_per_class >= 1")
    shift = np.atleast_1d(np.asarray(mean_shift, dtype=np.float64))
    if shift.shape != (input_dim,):
        raise ContractError(f"mean_shift has shape {shift.shape}, expected ({input_dim},)")
    means = default_means(num_classes, input_dim) if means is None else np.asarray(means, dtype=np.float64)
    if means.shape != (num_classes, input_dim):
        raise ContractError(f"means has shape {means.shape}, expected ({num_classes}, {input_dim})")

    def draw(rng, centers):
        x = np.concatenate([rng.normal(c, 1.0, (n_per_class, input_dim)) for c in centers])
        y = np.repeat(np.arange(num_classes), n_per_class)
        order = rng.permutation(len(y))
        return LabeledSet(x[order], y[order])

    return draw(substream(seed, "source"), means), draw(substream(seed, "target"), means + shift)


def split_kshot(source_pool: LabeledSet, target_pool: LabeledSet, k: int, test_fraction: float,
                seed: int, num_classes: Optional[int] = None) -> SsdaDataset:
    """Pick exactly k labeled target examples per class; split the rest into U and test."""
    if not 0.0 <= test_fraction < 1.0:
        raise ContractError("test_fraction must lie in [0, 1)")
    if k < 0:
        raise ContractError("k must be >= 0")
    if num_classes is None:
        num_classes = int(max(source_pool.y.max(initial=-1), target_pool.y.max(initial=-1))) + 1
    rng = substream(seed, "split")
    labeled = []
    for c in range(num_classes):
        idx = np.flatnonzero(target_pool.y == c)
        if len(idx) < k + 2:
            raise ContractError(f"class {c} has {len(idx)} target examples; need at least {k + 2}")
        labeled.append(rng.choice(idx, size=k, replace=False))
    labeled = np.sort(np.concatenate(labeled)).astype(np.int64) if k else np.empty(0, dtype=np.int64)
    rest = np.setdiff1d(np.arange(len(target_pool)), labeled)
    rest = rng.permutation(rest)
    n_test = int(round(test_fraction * len(rest)))
    test_idx, unl_idx = np.sort(rest[:n_test]), np.sort(rest[n_test:])
    return SsdaDataset(
        source=source_pool,
        target_labeled=target_pool.subset(labeled),
        target_unlabeled=target_pool.x[unl_idx],
        target_test=target_pool.subset(test_idx),
        num_classes=num_classes,
        unlabeled_truth=SealedLabels(target_pool.y[unl_idx]),
        split_indices={"labeled": labeled, "unlabeled": unl_idx, "test": test_idx},
        k_shot=k,
    )


@dataclass
class CsvData:
    pools: Dict[str, LabeledSet]
    labels: List[str]
    feature_cols: List[str]

    @property
    def num_classes(self) -> int:
        return len(self.labels)


def load_csv(path, feature_cols: Optional[Sequence[str]] = None, label_col: str = "label",
             domain_col: Optional[str] = "domain") -> CsvData:
    """Read a headered CSV into per-domain pools.

    Labels are mapped to 0..K-1 in lexicographic order of their string form.
    Rows without a domain column land in the ``"all"`` pool.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise EmptyDatasetError(f"{path}: empty dataset")
        header = [h.strip() for h in header]
        if label_col not in header:
            raise CsvFormatError(path, f"missing label column {label_col!r}", line=1)
        has_domain = domain_col is not None and domain_col in header
        if feature_cols is None:
            feature_cols = [h for h in header if h not in (label_col, domain_col)]
        missing = [c for c in feature_cols if c not in header]
        if missing:
            raise CsvFormatError(path, f"missing feature columns {missing}", line=1)
        if not feature_cols:
            raise CsvFormatError(path, "no feature columns", line=1)
        fidx = [header.index(c) for c in feature_cols]
        lidx = header.index(label_col)
        didx = header.index(domain_col) if has_domain else None

        feats, raw_labels, domains = [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(path, f"expected {len(header)} fields, found {len(row)}", line=line)
            vals = []
            for col, i in zip(feature_cols, fidx):
                try:
                    v = float(row[i])
                except ValueError:
                    raise CsvFormatError(path, f"non-numeric value {row[i]!r} in column {col!r}",
                                         line=line, column=col) from None
                if not np.isfinite(v):
                    raise CsvFormatError(path, f"non-finite value in column {col!r}", line=line, column=col)
                vals.append(v)
            feats.append(vals)
            raw_labels.append(row[lidx].strip())
            dom = row[didx].strip() if didx is not None else "all"
            if didx is not None and dom not in ("source", "target"):
                raise CsvFormatError(path, f"domain must be 'source' or 'target', got {dom!r}",
                                     line=line, column=domain_col)
            domains.append(dom)
    if not feats:
        raise EmptyDatasetError(f"{path}: empty dataset")

    vocab = sorted(set(raw_labels))
    index = {lab: i for i, lab in enumerate(vocab)}
    x = np.asarray(feats, dtype=np.float64)
    y = np.asarray([index[lab] for lab in raw_labels], dtype=np.int64)
    dom = np.asarray(domains)
    pools = {d: LabeledSet(x[dom == d], y[dom == d]) for d in dict.fromkeys(domains)}
    return CsvData(pools, vocab, list(feature_cols))


def write_csv(path, pools: Dict[str, LabeledSet], labels: Optional[Sequence[str]] = None,
              feature_cols: Optional[Sequence[str]] = None) -> None:
    """Write pools in the same format :func:`load_csv` reads."""
    dim = next(iter(pools.values())).x.shape[1]
    feature_cols = list(feature_cols) if feature_cols else [f"x{i}" for i in range(dim)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*feature_cols, "label", "domain"])
        for dom, pool in pools.items():
            for xi, yi in zip(pool.x, pool.y):
                lab = labels[yi] if labels is not None else str(int(yi))
                w.writerow([*(repr(float(v)) for v in xi), lab, dom])
