"""Generator and the two classifier heads as MLPs over the autodiff graph."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Graph, Node, ShapeError

GROUPS = ("G", "F1", "F2")
HEADS = {1: "F1", 2: "F2"}
CHECKPOINT_FORMAT = "uoda-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output; relu on hidden layers, identity on the output."""

    layer_widths: Tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ContractError(f"invalid MLP widths {widths}: need >= 2 layers of width >= 1")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def shapes(self, prefix: str) -> Dict[str, tuple]:
        out = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_widths[:-1], self.layer_widths[1:])):
            out[f"{prefix}.{i}.W"] = (fan_in, fan_out)
            out[f"{prefix}.{i}.b"] = (fan_out,)
        return out


@dataclass
class UodaModel:
    generator: MlpSpec
    head: MlpSpec
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.generator.layer_widths[-1] != self.head.layer_widths[0]:
            raise ContractError("generator output width must equal classifier input width")
        if self.head.layer_widths[-1] < 2:
            raise ContractError("classifier heads need K >= 2 outputs")
        expected = self.param_shapes()
        if self.params:
            if set(self.params) != set(expected):
                raise ContractError("parameter names do not match the layer specs")
            for name, shape in expected.items():
                if self.params[name].shape != shape:
                    raise ShapeError(name, self.params[name].shape, shape)

    @property
    def input_dim(self) -> int:
        return self.generator.layer_widths[0]

    @property
    def feature_dim(self) -> int:
        return self.generator.layer_widths[-1]

    @property
    def num_classes(self) -> int:
        return self.head.layer_widths[-1]

    def param_shapes(self) -> Dict[str, tuple]:
        shapes = self.generator.shapes("G")
        shapes.update(self.head.shapes("F1"))
        shapes.update(self.head.shapes("F2"))
        return shapes

    def group(self, name: str) -> Dict[str, np.ndarray]:
        if name not in GROUPS:
            raise ContractError(f"unknown parameter group {name!r}")
        return {k: v for k, v in self.params.items() if k.split(".", 1)[0] == name}

    def with_params(self, updates: Dict[str, np.ndarray]) -> "UodaModel":
        params = dict(self.params)
        params.update(updates)
        return UodaModel(self.generator, self.head, params)

    def copy(self) -> "UodaModel":
        return UodaModel(self.generator, self.head, {k: v.copy() for k, v in self.params.items()})


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def init_model(input_dim: int, hidden: Sequence[int], feature_dim: int, num_classes: int,
               seed: int, head_hidden: Sequence[int] = ()) -> UodaModel:
    """Glorot-uniform weights and zero biases, one independent stream per group."""
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    if input_dim < 1 or feature_dim < 1:
        raise ContractError("input_dim and feature_dim must be >= 1")
    generator = MlpSpec((input_dim, *hidden, feature_dim))
    head = MlpSpec((feature_dim, *head_hidden, num_classes))
    streams = dict(zip(GROUPS, np.random.SeedSequence(seed).spawn(len(GROUPS))))
    params: Dict[str, np.ndarray] = {}
    for group, spec in (("G", generator), ("F1", head), ("F2", head)):
        rng = np.random.default_rng(streams[group])
        for name, shape in spec.shapes(group).items():
            params[name] = _glorot(rng, *shape) if len(shape) == 2 else np.zeros(shape)
    return UodaModel(generator, head, params)


def bind(model: UodaModel, graph: Graph, trainable: Iterable[str] = GROUPS) -> Dict[str, Node]:
    """Place every parameter on ``graph``; groups outside ``trainable`` become constants."""
    trainable = set(trainable)
    nodes = {}
    for name, value in model.params.items():
        if name.split(".", 1)[0] in trainable:
            nodes[name] = graph.parameter(name, value)
        else:
            nodes[name] = graph.constant(value, name=name)
    return nodes


def _mlp(x: Node, params: Dict[str, Node], prefix: str, n_layers: int) -> Node:
    h = x
    for i in range(n_layers):
        h = ad.add_row(ad.matmul(h, params[f"{prefix}.{i}.W"]), params[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def features(model: UodaModel, x, params: Optional[Dict[str, Node]] = None,
             graph: Optional[Graph] = None) -> Node:
    """Generator forward pass mapping a [B, D] batch to [B, d] features."""
    if isinstance(x, Node):
        graph = x.graph
    else:
        graph = graph if graph is not None else (
            next(iter(params.values())).graph if params else Graph())
        x = graph.constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if x.value.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError("features", x.shape, (None, model.input_dim))
    if params is None:
        params = bind(model, graph)
    return _mlp(x, params, "G", model.generator.n_layers)


def class_log_probs(model: UodaModel, head: int, f: Node,
                    params: Optional[Dict[str, Node]] = None) -> Node:
    """Log-softmax of head 1 (source-scattering) or head 2 (target-clustering)."""
    if head not in HEADS:
        raise ContractError(f"head must be 1 or 2, got {head!r}")
    if f.value.ndim != 2 or f.shape[1] != model.feature_dim:
        raise ShapeError("class_log_probs", f.shape, (None, model.feature_dim))
    if params is None:
        params = bind(model, f.graph)
    return ad.log_softmax(_mlp(f, params, HEADS[head], model.head.n_layers))


def predict(model: UodaModel, x) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Features and both heads' log-probabilities as plain arrays (no trainable leaves)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, model.input_dim)
    graph = Graph()
    params = bind(model, graph, trainable=())
    f = features(model, graph.constant(x), params)
    return (f.value, class_log_probs(model, 1, f, params).value,
            class_log_probs(model, 2, f, params).value)


def save_checkpoint(model: UodaModel, path) -> None:
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "generator": list(model.generator.layer_widths),
        "head": list(model.head.layer_widths),
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in sorted(model.params.items())
        },
    }
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(path) -> UodaModel:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: not a model checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    params = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in blob["params"].items()
    }
    return UodaModel(MlpSpec(tuple(blob["generator"])), MlpSpec(tuple(blob["head"])), params)
