"""Supervision losses, entropy terms and the three per-group objectives."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node
from .models import UodaModel, class_log_probs, features

METHODS = ("uoda", "s_plus_t", "ent_only")
MODES = ("ssda", "uda")
GENERATOR_SUPERVISION = ("paper_literal", "all_heads")


@dataclass(frozen=True)
class SelfTrainConfig:
    start_epoch: Optional[int] = None  # None -> half of the epochs
    confidence_tau: float = 0.9
    require_agreement: bool = True


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.75
    beta: float = 0.1
    lam: float = 0.1
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 20
    iterations_per_epoch: Optional[int] = None  # None -> ceil(N_u / batch_u)
    batch_s: int = 24
    batch_t: Optional[int] = None  # None -> 2K when available, else all of T
    batch_u: int = 24
    mode: str = "ssda"
    method: str = "uoda"
    generator_supervision: str = "paper_literal"
    self_train: Optional[SelfTrainConfig] = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("beta", "lam", "weight_decay"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.lr < 0:
            raise ContractError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.iterations_per_epoch is not None and self.iterations_per_epoch < 1:
            raise ContractError("iterations_per_epoch must be >= 1")
        for name in ("batch_s", "batch_u"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.batch_t is not None and self.batch_t < 1:
            raise ContractError("batch_t must be >= 1")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.method not in METHODS:
            raise ContractError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.generator_supervision not in GENERATOR_SUPERVISION:
            raise ContractError(f"generator_supervision must be one of {GENERATOR_SUPERVISION}")
        if self.method == "s_plus_t" and (self.beta != 0 or self.lam != 0):
            raise ContractError("s_plus_t requires beta = lambda = 0")
        if self.method == "ent_only" and (self.beta != 0 or self.lam <= 0):
            raise ContractError("ent_only requires beta = 0 and lambda > 0")

    @classmethod
    def preset(cls, method: str, **overrides) -> "HyperParams":
        """Defaults for a method with its coefficient constraints applied."""
        if method == "s_plus_t":
            overrides.setdefault("beta", 0.0)
            overrides.setdefault("lam", 0.0)
        elif method == "ent_only":
            overrides.setdefault("beta", 0.0)
        return cls(method=method, **overrides)

    def replace(self, **changes) -> "HyperParams":
        return replace(self, **changes)


@dataclass
class LossBundle:
    """Scalar loss nodes of one forward pass; terms a pass did not compute are None."""

    L_src_1: Optional[Node] = None
    L_tar_1: Optional[Node] = None
    L_src_2: Optional[Node] = None
    L_tar_2: Optional[Node] = None
    H_src: Optional[Node] = None
    H_tar: Optional[Node] = None
    log_probs: Dict[str, Node] = field(default_factory=dict, repr=False)

    def values(self) -> Dict[str, float]:
        out = {}
        for name in ("L_src_1", "L_tar_1", "L_src_2", "L_tar_2", "H_src", "H_tar"):
            node = getattr(self, name)
            if node is not None:
                out[name] = float(node.value)
        return out


def cross_entropy(log_probs: Node, labels) -> Node:
    """Batch mean of -log p(y_i)."""
    labels = np.asarray(labels)
    batch, k = log_probs.shape
    if labels.shape != (batch,):
        raise ContractError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k or
                        not np.issubdtype(labels.dtype, np.integer)):
        raise ContractError(f"labels must be integers in [0, {k})")
    onehot = np.zeros((batch, k))
    onehot[np.arange(batch), labels] = 1.0
    picked = ad.sum_all(ad.mul(log_probs, log_probs.graph.constant(onehot)))
    return ad.scale(picked, -1.0 / batch)


def mean_entropy(log_probs: Node) -> Node:
    """Batch mean of -sum_k p_k log p_k, computed from log-probabilities."""
    batch = log_probs.shape[0]
    plogp = ad.sum_all(ad.mul(ad.exp(log_probs), log_probs))
    return ad.scale(plogp, -1.0 / batch)


def _supervision(b: LossBundle, *names: str) -> list:
    terms = []
    for name in names:
        node = getattr(b, name)
        if node is None:
            raise ContractError(f"{name} is required by this objective but was not computed")
        terms.append(node)
    return terms


def _weighted_sum(pairs: Sequence[tuple]) -> Node:
    total = None
    for coef, node in pairs:
        term = ad.scale(node, coef)
        total = term if total is None else ad.add(total, term)
    return total


def objective_f1(b: LossBundle, h: HyperParams) -> Node:
    """alpha L_src + (1 - alpha) L_tar + beta H_src on head 1 (UDA: L_src + beta H_src)."""
    if h.method == "s_plus_t":
        names = ("L_src_1",) if h.mode == "uda" else ("L_src_1", "L_tar_1")
        return _weighted_sum([(1.0, n) for n in _supervision(b, *names)])
    if h.mode == "uda":
        (ls,) = _supervision(b, "L_src_1")
        pairs = [(1.0, ls)]
    else:
        ls, lt = _supervision(b, "L_src_1", "L_tar_1")
        pairs = [(h.alpha, ls), (1.0 - h.alpha, lt)]
    (hs,) = _supervision(b, "H_src")
    return _weighted_sum(pairs + [(h.beta, hs)])


def objective_f2(b: LossBundle, h: HyperParams) -> Node:
    """(1 - alpha) L_src + alpha L_tar - lambda H_tar on head 2 (UDA: L_src - lambda H_tar).

    The ``ent_only`` baseline flips the entropy sign so head 2 minimizes it.
    """
    if h.method == "s_plus_t":
        names = ("L_src_2",) if h.mode == "uda" else ("L_src_2", "L_tar_2")
        return _weighted_sum([(1.0, n) for n in _supervision(b, *names)])
    if h.mode == "uda":
        (ls,) = _supervision(b, "L_src_2")
        pairs = [(1.0, ls)]
    else:
        ls, lt = _supervision(b, "L_src_2", "L_tar_2")
        pairs = [(1.0 - h.alpha, ls), (h.alpha, lt)]
    (ht,) = _supervision(b, "H_tar")
    sign = 1.0 if h.method == "ent_only" else -1.0
    return _weighted_sum(pairs + [(sign * h.lam, ht)])


def objective_g(b: LossBundle, h: HyperParams) -> Node:
    """L_src + L_tar - beta H_src + lambda H_tar for the generator."""
    all_heads = h.method == "s_plus_t" or h.generator_supervision == "all_heads"
    if h.mode == "uda":
        names = ("L_src_1", "L_src_2") if all_heads else ("L_src_1",)
    else:
        names = ("L_src_1", "L_tar_1", "L_src_2", "L_tar_2") if all_heads else ("L_src_1", "L_tar_2")
    pairs = [(1.0, n) for n in _supervision(b, *names)]
    if h.method == "s_plus_t":
        return _weighted_sum(pairs)
    hs, ht = _supervision(b, "H_src", "H_tar")
    return _weighted_sum(pairs + [(-h.beta, hs), (h.lam, ht)])


def compute_losses(model: UodaModel, params: Dict[str, Node], xs, ys, xt, yt, xu,
                   heads: Sequence[int] = (1, 2), freeze_features: bool = False,
                   mode: str = "ssda") -> LossBundle:
    """One generator forward over the concatenated S, T, U batches and the requested heads.

    In UDA mode (or with an empty T batch) the target supervision terms are skipped.
    """
    graph = next(iter(params.values())).graph
    xs = np.asarray(xs, dtype=np.float64)
    xu = np.asarray(xu, dtype=np.float64)
    use_t = mode == "ssda" and xt is not None and len(xt) > 0
    xt = np.asarray(xt, dtype=np.float64).reshape(-1, xs.shape[1]) if use_t else xs[:0]
    ns, nt, nu = len(xs), len(xt), len(xu)
    f = features(model, graph.constant(np.concatenate([xs, xt, xu])), params)
    if freeze_features:
        f = ad.stop_gradient(f)
    fs, ft, fu = ad.rows(f, 0, ns), ad.rows(f, ns, ns + nt), ad.rows(f, ns + nt, ns + nt + nu)

    b = LossBundle()
    if 1 in heads:
        lp_s = class_log_probs(model, 1, fs, params)
        b.log_probs["s1"] = lp_s
        b.L_src_1 = cross_entropy(lp_s, ys)
        b.H_src = mean_entropy(lp_s)
        if use_t:
            lp_t = class_log_probs(model, 1, ft, params)
            b.log_probs["t1"] = lp_t
            b.L_tar_1 = cross_entropy(lp_t, yt)
    if 2 in heads:
        lp_s = class_log_probs(model, 2, fs, params)
        lp_u = class_log_probs(model, 2, fu, params)
        b.log_probs["s2"], b.log_probs["u2"] = lp_s, lp_u
        b.L_src_2 = cross_entropy(lp_s, ys)
        b.H_tar = mean_entropy(lp_u)
        if use_t:
            lp_t = class_log_probs(model, 2, ft, params)
            b.log_probs["t2"] = lp_t
            b.L_tar_2 = cross_entropy(lp_t, yt)
    return b
