"""Three-phase alternating training loop with momentum SGD.

Every iteration updates the classifier heads and then the generator on the
same minibatches:

1. head 1 on ``objective_f1`` with the generator frozen,
2. head 2 on ``objective_f2`` (after head 1 has moved),
3. the generator on ``objective_g`` with both heads frozen.

Each phase does its own fresh forward pass.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Graph
from .data import SsdaDataset, substream
from .evaluation import DivergenceReport, accuracy_from_log_probs, default_gamma_grid, estimate_divergence
from .losses import HyperParams, LossBundle, compute_losses, objective_f1, objective_f2, objective_g
from .models import UodaModel, bind, init_model, predict

METRIC_COLUMNS = (
    "epoch", "L_src_1", "L_tar_2", "H_src", "H_tar", "objective_g", "target_test_accuracy",
    "unlabeled_accuracy", "d_hat_max", "pseudo_label_count", "wall_time_ms",
)


class TrainingDiverged(RuntimeError):
    """A loss term became NaN or infinite."""

    def __init__(self, term: str, iteration: int, phase: str):
        self.term, self.iteration, self.phase = term, iteration, phase
        super().__init__(f"non-finite {term} at iteration {iteration} ({phase} phase)")


@dataclass
class OptimizerState:
    velocity: Dict[str, np.ndarray]
    lr: float
    momentum: float
    weight_decay: float

    @classmethod
    def zeros(cls, params: Dict[str, np.ndarray], lr: float, momentum: float, weight_decay: float):
        return cls({k: np.zeros_like(v) for k, v in params.items()}, lr, momentum, weight_decay)


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState):
    """v <- momentum v + (grad + wd param); param <- param - lr v.

    Returns new ``(params, state)``; inputs are not modified.
    """
    if set(params) != set(state.velocity) or set(grads) != set(params):
        raise ContractError("params, grads and velocity must share the same keys")
    new_params, new_vel = {}, {}
    for name, p in params.items():
        g, v = grads[name], state.velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ad.ShapeError(f"sgd_step[{name}]", p.shape, g.shape)
        v = state.momentum * v + (g + state.weight_decay * p)
        new_vel[name] = v
        new_params[name] = p - state.lr * v
    return new_params, replace(state, velocity=new_vel)


@dataclass
class Batches:
    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    yt: np.ndarray
    xu: np.ndarray


@dataclass
class TrainState:
    model: UodaModel
    opt_g: OptimizerState
    opt_f1: OptimizerState
    opt_f2: OptimizerState
    epoch: int = 0
    iteration: int = 0
    rng: Optional[np.random.Generator] = field(default=None, repr=False)
    pseudo_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    pseudo_y: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def pseudo_label_count(self) -> int:
        return len(self.pseudo_index)


def init_state(model: UodaModel, h: HyperParams, rng: Optional[np.random.Generator] = None) -> TrainState:
    opts = {g: OptimizerState.zeros(model.group(g), h.lr, h.momentum, h.weight_decay)
            for g in ("G", "F1", "F2")}
    return TrainState(model, opts["G"], opts["F1"], opts["F2"], rng=rng)


def _check_finite(bundle: LossBundle, objective: ad.Node, iteration: int, phase: str):
    for name, value in bundle.values().items():
        if not math.isfinite(value):
            raise TrainingDiverged(name, iteration, phase)
    if not math.isfinite(float(objective.value)):
        raise TrainingDiverged(f"objective_{phase}", iteration, phase)


def _phase(state: TrainState, batches: Batches, h: HyperParams, group: str, heads, objective,
           freeze_features: bool, opt_attr: str) -> TrainState:
    graph = Graph()
    params = bind(state.model, graph, trainable=(group,))
    bundle = compute_losses(state.model, params, batches.xs, batches.ys, batches.xt, batches.yt,
                            batches.xu, heads=heads, freeze_features=freeze_features, mode=h.mode)
    loss = objective(bundle, h)
    _check_finite(bundle, loss, state.iteration, group.lower())
    grads = ad.backward(graph, loss)
    new_params, new_opt = sgd_step(state.model.group(group), grads, getattr(state, opt_attr))
    return replace(state, model=state.model.with_params(new_params), **{opt_attr: new_opt})


def step_f1(state: TrainState, batches: Batches, h: HyperParams) -> TrainState:
    return _phase(state, batches, h, "F1", (1,), objective_f1, True, "opt_f1")


def step_f2(state: TrainState, batches: Batches, h: HyperParams) -> TrainState:
    return _phase(state, batches, h, "F2", (2,), objective_f2, True, "opt_f2")


def step_g(state: TrainState, batches: Batches, h: HyperParams) -> TrainState:
    return _phase(state, batches, h, "G", (1, 2), objective_g, False, "opt_g")


def train_iteration(state: TrainState, batches: Batches, h: HyperParams) -> TrainState:
    if len(batches.xs) == 0 or len(batches.xu) == 0:
        raise ContractError("source and unlabeled batches must be non-empty")
    if h.mode == "ssda" and len(batches.xt) == 0:
        raise ContractError("SSDA mode needs a non-empty labeled target batch")
    state = step_f1(state, batches, h)
    state = step_f2(state, batches, h)
    state = step_g(state, batches, h)
    return replace(state, iteration=state.iteration + 1)


def labeled_target_pool(dataset: SsdaDataset, state: TrainState):
    """T plus any adopted pseudo-labels."""
    xt, yt = dataset.target_labeled.x, dataset.target_labeled.y
    if state.pseudo_label_count:
        xt = np.concatenate([xt, dataset.target_unlabeled[state.pseudo_index]])
        yt = np.concatenate([yt, state.pseudo_y])
    return xt, yt


def _draw(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    return rng.choice(n, size=min(size, n), replace=False)


def sample_batches(rng: np.random.Generator, dataset: SsdaDataset, state: TrainState,
                   h: HyperParams) -> Batches:
    """Independent uniform minibatches (without replacement) from S, T, U."""
    s = _draw(rng, len(dataset.source), h.batch_s)
    u = _draw(rng, len(dataset.target_unlabeled), h.batch_u)
    if h.mode == "uda":
        xt = np.empty((0, dataset.input_dim))
        yt = np.empty(0, dtype=np.int64)
    else:
        pool_x, pool_y = labeled_target_pool(dataset, state)
        bt = h.batch_t if h.batch_t is not None else 2 * dataset.num_classes
        t = _draw(rng, len(pool_y), bt)
        xt, yt = pool_x[t], pool_y[t]
    return Batches(dataset.source.x[s], dataset.source.y[s], xt, yt, dataset.target_unlabeled[u])


def self_train_update(state: TrainState, unlabeled: np.ndarray, h: HyperParams,
                      epoch: Optional[int] = None) -> TrainState:
    """Adopt confident unlabeled samples as pseudo-labeled targets.

    A sample is adopted when the mean of both heads' max-probabilities reaches
    ``confidence_tau`` (and, optionally, both heads agree).  Adoptions are final.
    """
    cfg = h.self_train
    if cfg is None:
        return state
    start = cfg.start_epoch if cfg.start_epoch is not None else h.epochs // 2
    epoch = state.epoch if epoch is None else epoch
    if epoch < start or len(unlabeled) == 0:
        return state
    _, lp1, lp2 = predict(state.model, unlabeled)
    p1, p2 = np.exp(lp1), np.exp(lp2)
    y1, y2 = p1.argmax(axis=1), p2.argmax(axis=1)
    conf = 0.5 * (p1.max(axis=1) + p2.max(axis=1))
    ok = conf >= cfg.confidence_tau
    if cfg.require_agreement:
        ok &= y1 == y2
    ok[state.pseudo_index] = False
    new = np.flatnonzero(ok)
    if len(new) == 0:
        return state
    # agreement not required: take head 2's vote
    return replace(state,
                   pseudo_index=np.concatenate([state.pseudo_index, new]),
                   pseudo_y=np.concatenate([state.pseudo_y, y2[new]]))


@dataclass
class EpochEvent:
    epoch: int
    model: UodaModel
    row: Dict[str, object]
    divergence: DivergenceReport
    dataset: SsdaDataset


@dataclass
class MetricLog:
    rows: List[Dict[str, object]] = field(default_factory=list)

    def append(self, row):
        self.rows.append(row)

    def column(self, name: str) -> List[object]:
        return [r[name] for r in self.rows]

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class TrainResult:
    state: TrainState
    log: MetricLog
    divergence: Optional[DivergenceReport]


def evaluate_epoch(state: TrainState, dataset: SsdaDataset, h: HyperParams, eval_head: int = 2,
                   gamma_grid=None):
    """Full-set losses, accuracies and the entropy-threshold divergence."""
    model = state.model
    graph = Graph()
    params = bind(model, graph, trainable=())
    xt, yt = dataset.target_labeled.x, dataset.target_labeled.y
    bundle = compute_losses(model, params, dataset.source.x, dataset.source.y, xt, yt,
                            dataset.target_unlabeled, mode=h.mode)
    obj_g = float(objective_g(bundle, h).value)
    vals = bundle.values()

    _, lp1_test, lp2_test = predict(model, dataset.target_test.x)
    _, lp1_u, lp2_u = predict(model, dataset.target_unlabeled)
    test_acc = accuracy_from_log_probs(_head_log_probs(lp1_test, lp2_test, eval_head), dataset.target_test.y)
    unl_acc = accuracy_from_log_probs(_head_log_probs(lp1_u, lp2_u, eval_head),
                                      dataset.unlabeled_truth.reveal())
    grid = default_gamma_grid(dataset.num_classes) if gamma_grid is None else gamma_grid
    report = estimate_divergence(model, dataset.source.x, dataset.target_unlabeled, grid)
    row = {
        "epoch": state.epoch,
        "L_src_1": vals.get("L_src_1"),
        "L_tar_2": vals.get("L_tar_2"),
        "H_src": vals.get("H_src"),
        "H_tar": vals.get("H_tar"),
        "objective_g": obj_g,
        "target_test_accuracy": test_acc,
        "unlabeled_accuracy": unl_acc,
        "d_hat_max": report.d_hat_max,
        "pseudo_label_count": state.pseudo_label_count,
    }
    return row, report


def _head_log_probs(lp1, lp2, head):
    if head == 1:
        return lp1
    if head == 2:
        return lp2
    if head == "ensemble":
        return np.log(0.5 * (np.exp(lp1) + np.exp(lp2)))
    raise ContractError(f"eval_head must be 1, 2 or 'ensemble', got {head!r}")


def iterations_per_epoch(dataset: SsdaDataset, h: HyperParams) -> int:
    if h.iterations_per_epoch is not None:
        return h.iterations_per_epoch
    return math.ceil(len(dataset.target_unlabeled) / h.batch_u)


def train(dataset: SsdaDataset, h: HyperParams, seed: int, model: Optional[UodaModel] = None,
          callbacks: Sequence[Callable[[EpochEvent], None]] = (), eval_every: int = 1,
          hidden: Sequence[int] = (32,), feature_dim: int = 2, head_hidden: Sequence[int] = (),
          eval_head=2, record_wall_time: bool = False, gamma_grid=None) -> TrainResult:
    """Run ``h.epochs`` epochs of :func:`train_iteration` with fresh minibatches.

    Metrics are evaluated at epoch 0, every ``eval_every`` epochs and at the
    final epoch; each evaluation is passed to every callback.
    """
    if h.mode == "ssda" and len(dataset.target_labeled) == 0:
        raise ContractError("SSDA mode requires labeled target examples; use mode='uda'")
    if eval_every < 1:
        raise ContractError("eval_every must be >= 1")
    if model is None:
        init_seed = int(substream(seed, "init").integers(2**32))
        model = init_model(dataset.input_dim, hidden, feature_dim, dataset.num_classes, init_seed,
                           head_hidden=head_hidden)
    state = init_state(model, h, rng=substream(seed, "shuffle"))
    log = MetricLog()
    t0 = time.perf_counter()
    report = None

    def record():
        nonlocal report
        row, report = evaluate_epoch(state, dataset, h, eval_head, gamma_grid)
        row["wall_time_ms"] = int((time.perf_counter() - t0) * 1000) if record_wall_time else 0
        log.append(row)
        event = EpochEvent(state.epoch, state.model.copy(), dict(row), report, dataset)
        for cb in callbacks:
            cb(event)

    record()
    n_iter = iterations_per_epoch(dataset, h)
    for epoch in range(1, h.epochs + 1):
        state = self_train_update(state, dataset.target_unlabeled, h, epoch=epoch - 1)
        for _ in range(n_iter):
            batches = sample_batches(state.rng, dataset, state, h)
            state = train_iteration(state, batches, h)
        state = replace(state, epoch=epoch)
        if epoch % eval_every == 0 or epoch == h.epochs:
            record()
    return TrainResult(state, log, report)


def uda_train(dataset: SsdaDataset, h: HyperParams, seed: int, **kwargs) -> TrainResult:
    """:func:`train` with every target-supervision term dropped."""
    return train(dataset, h.replace(mode="uda"), seed, **kwargs)
