"""Experiment configuration: an INI file with [data], [model], [train] and [run].

Example::

    [data]
    generator = two_moons
    n_per_domain = 500
    rotation_deg = 30
    noise_sd = 0.1
    k_shot = 3
    test_fraction = 0.5

    [model]
    hidden = 32
    feature_dim = 2

    [train]
    method = uoda
    epochs = 20
    iterations_per_epoch = 100

    [run]
    seed = 0
    output_dir = runs/moons

Every key is optional; see ``DATA_KEYS`` etc. for the accepted names and
defaults.  Errors carry the 1-based line number of the offending entry.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

from .autodiff import ContractError
from .data import SsdaDataset, gen_gaussian_shift_pair, gen_two_moons_pair, load_csv, split_kshot
from .losses import HyperParams, SelfTrainConfig

GENERATORS = ("two_moons", "gaussian_shift", "csv")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known, ``key`` is (section, name)."""

    def __init__(self, message: str, path=None, line: Optional[int] = None, key=None):
        self.message, self.path, self.line, self.key = message, path, line, key
        where = f"{path}:{line}: " if path is not None and line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)


@dataclass(frozen=True)
class DataConfig:
    generator: str = "two_moons"
    n_per_domain: int = 500
    rotation_deg: float = 30.0
    noise_sd: float = 0.1
    num_classes: int = 3
    input_dim: int = 2
    n_per_class: int = 100
    mean_shift: Tuple[float, ...] = (1.0, 0.0)
    path: Optional[str] = None
    label_col: str = "label"
    domain_col: str = "domain"
    source_domain: str = "source"
    target_domain: str = "target"
    k_shot: int = 3
    test_fraction: float = 0.5


@dataclass(frozen=True)
class ModelConfig:
    hidden: Tuple[int, ...] = (32,)
    feature_dim: int = 2
    head_hidden: Tuple[int, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/uoda"
    eval_every: int = 1
    snapshot_every: int = 0  # 0: only the first and final evaluation
    eval_head: str = "2"
    record_wall_time: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: HyperParams = field(default_factory=HyperParams)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def method(self) -> str:
        return self.train.method

    @property
    def seed(self) -> int:
        return self.run.seed

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        return {
            "data": _jsonable(dataclasses.asdict(self.data)),
            "model": _jsonable(dataclasses.asdict(self.model)),
            "train": _jsonable(train),
            "run": _jsonable(dataclasses.asdict(self.run)),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "ExperimentConfig":
        try:
            data = DataConfig(**_tuples(blob["data"]))
            model = ModelConfig(**_tuples(blob["model"]))
            train = dict(blob["train"])
            st = train.pop("self_train", None)
            hp = HyperParams(**train, self_train=SelfTrainConfig(**st) if st else None)
            run = RunConfig(**blob["run"])
        except (KeyError, TypeError, ContractError) as exc:
            raise ConfigError(f"malformed config dictionary: {exc}") from None
        cfg = cls(data, model, hp, run)
        validate(cfg)
        return cfg

    def with_train(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, train=self.train.replace(**changes))

    def with_data(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, data=dataclasses.replace(self.data, **changes))

    def with_run(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, **changes))


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (tuple, list)):
        return [_jsonable(v) for v in d]
    return d


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _int_list(text: str) -> Tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in re.split(r"[,\s]+", text)) if text else ()


def _float_list(text: str) -> Tuple[float, ...]:
    return tuple(float(t) for t in re.split(r"[,\s]+", text.strip()))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


DATA_KEYS = {
    "generator": str, "n_per_domain": int, "rotation_deg": float, "noise_sd": float,
    "num_classes": int, "input_dim": int, "n_per_class": int, "mean_shift": _float_list,
    "path": str, "label_col": str, "domain_col": str, "source_domain": str, "target_domain": str,
    "k_shot": int, "test_fraction": float,
}
MODEL_KEYS = {"hidden": _int_list, "feature_dim": int, "head_hidden": _int_list}
# config key -> (HyperParams field, parser)
TRAIN_KEYS = {
    "method": ("method", str), "alpha": ("alpha", float), "beta": ("beta", float),
    "lambda": ("lam", float), "lr": ("lr", float), "momentum": ("momentum", float),
    "weight_decay": ("weight_decay", float), "epochs": ("epochs", int),
    "iterations_per_epoch": ("iterations_per_epoch", _opt_int), "batch_s": ("batch_s", int),
    "batch_t": ("batch_t", _opt_int), "batch_u": ("batch_u", int), "mode": ("mode", str),
    "generator_supervision": ("generator_supervision", str),
}
SELF_TRAIN_KEYS = {
    "self_train": _bool, "self_train_start_epoch": _opt_int, "self_train_tau": float,
    "self_train_require_agreement": _bool,
}
RUN_KEYS = {
    "seed": int, "output_dir": str, "eval_every": int, "snapshot_every": int, "eval_head": str,
    "record_wall_time": _bool,
}
SECTIONS = {"data": DATA_KEYS, "model": MODEL_KEYS, "train": {**TRAIN_KEYS, **SELF_TRAIN_KEYS}, "run": RUN_KEYS}


def _key_lines(text: str) -> Dict[Tuple[str, str], int]:
    """(section, key) -> line number, for error messages."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip().lower()
            lines[(section, "")] = no
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None and not raw[:1].isspace():
            lines[(section, m.group(1).strip().lower())] = no
    return lines


def parse_config(text: str, path=None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", path, exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", path, exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("entry before any [section] header", path, exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("cannot parse line", path, line) from None
    lines = _key_lines(text)

    values: Dict[str, Dict[str, object]] = {}
    for section in parser.sections():
        sec = section.lower()
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", path, lines.get((sec, "")))
        values[sec] = {}
        for key, raw in parser.items(section):
            conv = SECTIONS[sec].get(key)
            if conv is None:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", path, lines.get((sec, key)))
            fn = conv[1] if isinstance(conv, tuple) else conv
            try:
                values[sec][key] = fn(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}", path, lines.get((sec, key))) from None

    def line_of(sec, key):
        return lines.get((sec, key), lines.get((sec, "")))

    data_kw = values.get("data", {})
    model_kw = values.get("model", {})
    run_kw = values.get("run", {})
    train_raw = values.get("train", {})
    train_kw = {TRAIN_KEYS[k][0]: v for k, v in train_raw.items() if k in TRAIN_KEYS}
    if train_raw.get("self_train", False):
        st = SelfTrainConfig(
            start_epoch=train_raw.get("self_train_start_epoch"),
            confidence_tau=train_raw.get("self_train_tau", 0.9),
            require_agreement=train_raw.get("self_train_require_agreement", True),
        )
        train_kw["self_train"] = st
    method = train_kw.pop("method", "uoda")
    try:
        hp = HyperParams.preset(method, **train_kw)
    except ContractError as exc:
        msg = str(exc)
        # point at the first offending key the file actually sets
        named = [k for k in train_raw if re.search(rf"\b({k}|{TRAIN_KEYS.get(k, (k,))[0]})\b", msg)]
        raise ConfigError(msg, path, line_of("train", named[0] if named else "method")) from None

    cfg = ExperimentConfig(DataConfig(**data_kw), ModelConfig(**model_kw), hp, RunConfig(**run_kw))
    try:
        validate(cfg)
    except ConfigError as exc:
        raise ConfigError(exc.message, path, line_of(*exc.key) if exc.key else None) from None
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    d, r = cfg.data, cfg.run
    if d.generator not in GENERATORS:
        raise ConfigError(f"generator must be one of {GENERATORS}, got {d.generator!r}", key=("data", "generator"))
    if d.generator == "csv" and not d.path:
        raise ConfigError("csv generator needs data.path", key=("data", "generator"))
    if not 0.0 < d.test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)", key=("data", "test_fraction"))
    if d.k_shot < 0:
        raise ConfigError("k_shot must be >= 0", key=("data", "k_shot"))
    if cfg.train.mode == "ssda" and d.k_shot < 1:
        raise ConfigError("ssda mode needs k_shot >= 1 (use mode = uda for zero-shot)", key=("data", "k_shot"))
    if r.eval_every < 1:
        raise ConfigError("eval_every must be >= 1", key=("run", "eval_every"))
    if r.snapshot_every < 0:
        raise ConfigError("snapshot_every must be >= 0", key=("run", "snapshot_every"))
    if r.eval_head not in ("1", "2", "ensemble"):
        raise ConfigError("eval_head must be 1, 2 or ensemble", key=("run", "eval_head"))
    if cfg.model.feature_dim < 1 or any(w < 1 for w in cfg.model.hidden + cfg.model.head_hidden):
        raise ConfigError("layer widths must be >= 1", key=("model", "feature_dim"))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), path)


def eval_head(cfg: ExperimentConfig):
    return cfg.run.eval_head if cfg.run.eval_head == "ensemble" else int(cfg.run.eval_head)


def build_dataset(cfg: ExperimentConfig) -> SsdaDataset:
    """Materialize the configured source/target split for ``cfg.seed``."""
    d, seed = cfg.data, cfg.seed
    if d.generator == "two_moons":
        src, tgt = gen_two_moons_pair(d.n_per_domain, d.rotation_deg, d.noise_sd, seed)
    elif d.generator == "gaussian_shift":
        src, tgt = gen_gaussian_shift_pair(d.num_classes, d.input_dim, d.n_per_class, list(d.mean_shift), seed)
    else:
        data = load_csv(d.path, label_col=d.label_col, domain_col=d.domain_col)
        missing = [n for n in (d.source_domain, d.target_domain) if n not in data.pools]
        if missing:
            raise ContractError(f"{d.path}: no rows for domain(s) {missing}")
        src, tgt = data.pools[d.source_domain], data.pools[d.target_domain]
        k = data.num_classes
        return split_kshot(src, tgt, d.k_shot, d.test_fraction, seed, num_classes=k)
    return split_kshot(src, tgt, d.k_shot, d.test_fraction, seed)
