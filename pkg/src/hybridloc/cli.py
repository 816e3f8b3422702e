"""Command-line entry points: generate, train, track, bounds.

All subcommands accept ``--config`` (experiment YAML; built-in defaults
when omitted), ``--out`` (output directory), ``--seed`` and ``--jobs``.
``track`` exits non-zero when a realization fails unless
``--allow-partial`` is given.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .ceda import ComponentMeasurement, write_measurements_csv

log = logging.getLogger("hybridloc")


def _config(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.ExperimentConfig() if args.config is None else pipeline.load_config(args.config)
    if args.seed is None:
        args.seed = cfg.evaluation.seed
    return cfg


def _snapshot(cfg, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    pipeline.save_config(cfg, out / "config.yaml")
    shutil.copyfile(cfg.scenario_path, out / "scenario.yaml")


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _snapshot(cfg, out)
    data = pipeline.generate_datasets(cfg, out, args.seed)
    log.info("wrote %s (%d pre-training positions, %d labeled positions)",
             out / "datasets.npz", len(data["pretrain_positions"]), len(data["full_positions"]))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    data_path = Path(args.data) if args.data else out / "datasets.npz"
    if not data_path.exists():
        log.error("dataset file %s not found; run 'generate' first", data_path)
        return 2
    data = pipeline.load_datasets(data_path)
    pipeline.train_models(cfg, data, out / "models")
    _snapshot(cfg, out)
    log.info("wrote models to %s", out / "models")
    return 0


def _dump_streams(runner: pipeline.RealizationRunner, realizations, seed, out: Path) -> None:
    meas_rows, feat_rows = [], []
    for r in realizations:
        streams = runner.streams(pipeline._rng(seed, pipeline._REALIZATION, 2 * r))
        for n, (meas, feats) in enumerate(streams):
            for j, (m, f) in enumerate(zip(meas, feats), start=1):
                meas_rows.append((r, n, j, [ComponentMeasurement(*row) for row in m]))
                if f is not None:
                    feat_rows.extend((r, n, j, i, v) for i, v in enumerate(f, start=1))
    write_measurements_csv(out / "measurements.csv", meas_rows)
    with open(out / "features.csv", "w") as fh:
        fh.write("realization,n,j,i,z_f\n")
        for r, n, j, i, v in feat_rows:
            fh.write(f"{r},{n},{j},{i},{float(v)!r}\n")


def cmd_track(args) -> int:
    cfg = _config(args)
    if args.realizations is not None:
        cfg.evaluation.n_realizations = args.realizations
    out = Path(args.out)
    model_dir = Path(args.models) if args.models else out / "models"
    use_models = cfg.features.enabled and (model_dir / "gp_models.json").exists()
    if cfg.features.enabled and not use_models and cfg.tracker.feature_mode != "phys_only":
        log.warning("no trained models in %s; running without features", model_dir)
    models = pipeline.load_trained(model_dir) if use_models else None
    results = pipeline.run_realizations(cfg, models, args.seed, args.jobs,
                                        str(model_dir) if use_models else None)
    agg = pipeline.write_run_artifacts(out, cfg, results, args.seed)
    shutil.copyfile(cfg.scenario_path, out / "scenario.yaml")
    if args.dump_measurements:
        _dump_streams(pipeline.RealizationRunner(cfg, models), range(len(results)), args.seed, out)
    failed = sum(r.failed for r in results)
    lost = sum(r.lost for r in results)
    log.info("%d realizations, %d failed, %d lost; final RMSE %.3f m", len(results), failed, lost,
             float(agg.rmse[-1]) if len(agg.rmse) else float("nan"))
    if failed and not args.allow_partial:
        log.error("%d realization(s) failed; rerun with --allow-partial to accept", failed)
        return 1
    return 0


def cmd_bounds(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    b = pipeline.compute_bounds(cfg)
    pipeline.write_bounds_csv(out / "bounds.csv", b)
    n_bad = int(np.sum(~np.isfinite(b["sp_crlb"])))
    if n_bad:
        log.warning("SP-CRLB undefined at %d step(s): fewer than two anchors in LOS", n_bad)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML (defaults built in)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="master seed (default: evaluation.seed)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hybridloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate training datasets")
    p = sub.add_parser("train", parents=[common], help="fit encoders and GP models")
    p.add_argument("--data", help="datasets.npz (default: OUT/datasets.npz)")
    p = sub.add_parser("track", parents=[common], help="Monte-Carlo tracking runs")
    p.add_argument("--models", help="model directory (default: OUT/models)")
    p.add_argument("--realizations", type=int, help="override evaluation.n_realizations")
    p.add_argument("--allow-partial", action="store_true",
                   help="exit 0 even when some realizations fail")
    p.add_argument("--dump-measurements", action="store_true",
                   help="also write measurements.csv and features.csv")
    sub.add_parser("bounds", parents=[common], help="SP-CRLB and P-CRLB along the trajectory")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "track": cmd_track,
            "bounds": cmd_bounds}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        log.error("--jobs must be at least 1")
        return 2
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
