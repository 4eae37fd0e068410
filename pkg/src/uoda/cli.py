"""Command-line runner: ``uoda run``, ``uoda sweep`` and ``uoda plot``.

Exit codes: 0 success, 1 unexpected failure, 2 usage or config error,
3 training diverged (non-finite loss), 4 sweep finished with failed cells.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .autodiff import ContractError
from .config import ConfigError, ExperimentConfig, build_dataset, eval_head, load_config
from .evaluation import bound_report, snapshot_features
from .models import save_checkpoint
from .plotting import emit_scatter_svg, plot_divergence, plot_metrics, plot_sweep
from .training import EpochEvent, TrainingDiverged, train

log = logging.getLogger("uoda")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_DIVERGED, EXIT_PARTIAL = 0, 1, 2, 3, 4
MANIFEST_FORMAT = "uoda-run-manifest"
SWEEP_PARAMS = {"alpha": "alpha", "beta": "beta", "lambda": "lam", "k_shot": "k_shot"}
SWEEP_COLUMNS = ("param", "value", "status", "unlabeled_accuracy", "target_test_accuracy", "d_hat_max",
                 "output_dir", "message")


@dataclass
class RunOutcome:
    status: str  # "ok" or "diverged"
    out_dir: Path
    final_row: Optional[Dict[str, object]] = None
    message: str = ""


def load_experiment(path) -> ExperimentConfig:
    """Read an INI config, or the config embedded in a run manifest (``.json``)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    if path.suffix.lower() == ".json":
        try:
            blob = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
        if blob.get("format") != MANIFEST_FORMAT:
            raise ConfigError("not a run manifest", path)
        return ExperimentConfig.from_dict(blob["config"])
    return load_config(path)


def _snapshot_due(cfg: ExperimentConfig, epoch: int) -> bool:
    every = cfg.run.snapshot_every
    return epoch in (0, cfg.train.epochs) or (every > 0 and epoch % every == 0)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunOutcome:
    """Train one configuration and write every artifact under ``out_dir``."""
    out = Path(out_dir if out_dir is not None else cfg.run.output_dir)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    manifest = {"format": MANIFEST_FORMAT, "version": 1, "package_version": __version__,
                "seed": cfg.seed, "config": cfg.to_dict()}

    def snapshot(event: EpochEvent):
        if _snapshot_due(cfg, event.epoch):
            snap = snapshot_features(event.model, event.dataset, event.epoch)
            snap.write_csv(out / "snapshots" / f"epoch_{event.epoch:04d}.csv")
            emit_scatter_svg(snap, out / "figures" / f"features_epoch_{event.epoch:04d}.svg")

    try:
        result = train(dataset, cfg.train, cfg.seed, callbacks=[snapshot], eval_every=cfg.run.eval_every,
                       hidden=cfg.model.hidden, feature_dim=cfg.model.feature_dim,
                       head_hidden=cfg.model.head_hidden, eval_head=eval_head(cfg),
                       record_wall_time=cfg.run.record_wall_time)
    except TrainingDiverged as exc:
        manifest.update(status="diverged", error=str(exc))
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return RunOutcome("diverged", out, message=str(exc))

    result.log.to_csv(out / "metrics.csv")
    model = result.state.model
    bound = bound_report(model, dataset.source, dataset.target_unlabeled)
    divergence = dict(result.divergence.to_json(), bound=bound.to_json())
    (out / "divergence.json").write_text(json.dumps(divergence, indent=2))
    save_checkpoint(model, out / "checkpoint.json")
    plot_metrics(result.log.rows, out / "figures" / "metrics.svg")
    plot_divergence(result.divergence, out / "figures" / "divergence.svg")
    manifest["status"] = "ok"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return RunOutcome("ok", out, result.log.rows[-1])


def _sweep_value(param: str, token: str):
    return int(token) if param == "k_shot" else float(token)


def sweep_cell(cfg: ExperimentConfig, param: str, token: str, out_dir) -> Dict[str, object]:
    row = {"param": param, "value": token, "status": "error", "unlabeled_accuracy": "",
           "target_test_accuracy": "", "d_hat_max": "", "output_dir": str(out_dir), "message": ""}
    try:
        value = _sweep_value(param, token)
        field = SWEEP_PARAMS[param]
        cell = cfg.with_data(k_shot=value) if field == "k_shot" else cfg.with_train(**{field: value})
        outcome = run_experiment(cell, out_dir)
    except (ValueError, ContractError, OSError) as exc:
        row["message"] = str(exc)
        return row
    row["status"] = outcome.status
    row["message"] = outcome.message
    if outcome.final_row is not None:
        for k in ("unlabeled_accuracy", "target_test_accuracy", "d_hat_max"):
            row[k] = outcome.final_row[k]
    return row


def run_sweep(cfg: ExperimentConfig, param: str, tokens: Sequence[str], out_dir=None,
              jobs: int = 1) -> List[Dict[str, object]]:
    """One run per value with the shared seed; failed cells are recorded, not raised."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}, got {param!r}")
    out = Path(out_dir if out_dir is not None else cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [(cfg, param, t, out / f"{param}_{t}") for t in tokens]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            rows = list(ex.map(sweep_cell, *zip(*cells)))
    else:
        rows = [sweep_cell(*c) for c in cells]
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    (out / "figures").mkdir(exist_ok=True)
    plot_sweep(param, rows, out / "figures" / f"sweep_{param}.svg")
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uoda", description="Train and inspect opposite-structure domain adaptation runs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("config", help="INI config file or a run manifest (.json)")
    r.add_argument("--out", help="output directory (overrides [run] output_dir)")
    r.add_argument("--seed", type=int, help="override [run] seed")

    s = sub.add_parser("sweep", help="one run per value of a hyperparameter")
    s.add_argument("config")
    s.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    s.add_argument("--values", required=True, help="comma-separated, e.g. 0.1,0.5,0.75,0.9")
    s.add_argument("--out", help="sweep directory (overrides [run] output_dir)")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1, help="parallel cells")

    pl = sub.add_parser("plot", help="render a feature snapshot CSV as an SVG scatter")
    pl.add_argument("snapshot")
    pl.add_argument("out")
    return p


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = cfg.with_run(seed=args.seed)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "plot":
            from .evaluation import FeatureSnapshot

            if not Path(args.snapshot).is_file():
                raise FileNotFoundError(f"snapshot not found: {args.snapshot}")
            emit_scatter_svg(FeatureSnapshot.read_csv(args.snapshot), args.out)
            return EXIT_OK

        cfg = _apply_overrides(load_experiment(args.config), args)
        if args.command == "run":
            outcome = run_experiment(cfg, args.out)
            if outcome.status == "diverged":
                print(f"uoda: training diverged: {outcome.message}", file=sys.stderr)
                return EXIT_DIVERGED
            log.info("wrote %s", outcome.out_dir)
            print(outcome.out_dir)
            return EXIT_OK

        tokens = [t.strip() for t in args.values.split(",") if t.strip()]
        if not tokens:
            raise ConfigError("--values is empty")
        rows = run_sweep(cfg, args.param, tokens, args.out, jobs=args.jobs)
        failed = [r for r in rows if r["status"] != "ok"]
        for r in failed:
            print(f"uoda: {args.param}={r['value']} {r['status']}: {r['message']}", file=sys.stderr)
        return EXIT_PARTIAL if failed else EXIT_OK
    except (FileNotFoundError, ConfigError) as exc:
        print(f"uoda: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"uoda: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"uoda: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
