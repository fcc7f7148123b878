"""Command-line entry point: ``capformer {synth,train,evaluate,gradcheck}``.

Settings come from an optional flat TOML file (``--config``) whose keys are
run options plus any ModelConfig / TrainConfig field; synthetic-data
parameters live in a ``[synth]`` table. Command-line flags win over the file.
Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from . import numcore as nc
from .checkpoint import load_checkpoint, save_checkpoint
from .datapipe import downsample_cells, group_by_cell, parse_cycles, write_cycles
from .errors import CapformerError, CheckpointError, ConfigError, DataError
from .forecast import format_summary, plot_report, write_metrics
from .model import ModelConfig, param_group
from .pipeline import PreparedData, assess, build_corpus, prepare
from .synthetic import SynthConfig, check_horizon, generate_synthetic
from .training import GRADCHECK_CONFIG, TrainConfig, gradient_audit, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

DEFAULT_SIGMAS = (0.001, 0.002, 0.005)
_MODEL_FIELDS = {f.name for f in fields(ModelConfig)} - {"seed"}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    target_cell: str = "S1"
    holdout: int = 60
    seed: int = 0
    sigma: tuple[float, ...] = DEFAULT_SIGMAS
    augment: bool = True
    out: str = "runs"
    data: list[str] = field(default_factory=list)
    checkpoint: str | None = None
    synth: dict[str, Any] | None = None
    model: dict[str, Any] = field(default_factory=dict)
    training: dict[str, Any] = field(default_factory=dict)

    @property
    def sigmas(self) -> tuple[float, ...]:
        return self.sigma if self.augment else ()

    def model_config(self) -> ModelConfig:
        return _build(ModelConfig, {**self.model, "seed": self.seed})

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, {"shuffle_seed": self.seed, **self.training})

    def synth_config(self) -> SynthConfig:
        return _build(SynthConfig.from_dict, self.synth or {})


def _build(factory, values: dict):
    try:
        return factory(**values) if isinstance(factory, type) else factory(values)
    except TypeError as exc:
        raise ConfigError(f"bad configuration value: {exc}") from None


_RUN_KEYS = {"target_cell", "holdout", "seed", "sigma", "augment", "out", "data", "checkpoint"}


def _parse_sigmas(value) -> tuple[float, ...]:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    try:
        sigmas = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"sigma must be a list of numbers, got {value!r}") from None
    if any(s < 0 for s in sigmas):
        raise ConfigError(f"sigma entries must be >= 0, got {list(sigmas)}")
    return sigmas


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    base = Path(path).resolve().parent
    for key, value in doc.items():
        if key == "synth":
            if not isinstance(value, dict):
                raise ConfigError("[synth] must be a table")
            cfg.synth = dict(value)
        elif key in _MODEL_FIELDS:
            cfg.model[key] = value
        elif key in _TRAIN_FIELDS:
            cfg.training[key] = value
        elif key in _RUN_KEYS:
            if key == "sigma":
                value = _parse_sigmas(value)
            elif key == "data":
                value = [str(base / v) for v in ([value] if isinstance(value, str) else value)]
            elif key in ("out", "checkpoint"):
                value = str(base / value)
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"config file {path}: unknown key {key!r}")
    return cfg


def _apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for key in ("target_cell", "holdout", "seed", "out", "checkpoint"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "data", None):
        cfg.data = list(args.data)
        cfg.synth = None  # a data flag overrides a [synth] table from the file
    if getattr(args, "sigma", None) is not None:
        cfg.sigma = _parse_sigmas(args.sigma)
    if getattr(args, "no_augment", False):
        cfg.augment = False
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.training[key] = value
    for flag in ("n_cells", "n_cycles"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.synth = {**(cfg.synth or {}), flag: value}
    if cfg.holdout < 1:
        raise ConfigError(f"holdout must be >= 1, got {cfg.holdout}")
    return cfg


# --------------------------------------------------------------------------
# data loading
# --------------------------------------------------------------------------


def _csv_paths(entries: list[str]) -> list[Path]:
    paths = []
    for entry in entries:
        p = Path(entry)
        if p.is_dir():
            found = sorted(p.glob("*.csv"))
            if not found:
                raise ConfigError(f"data directory {p} contains no .csv files")
            paths.extend(found)
        elif p.is_file():
            paths.append(p)
        else:
            raise ConfigError(f"data path {p} does not exist")
    return paths


def load_cells(cfg: RunConfig) -> dict:
    if cfg.data and cfg.synth is not None:
        raise ConfigError("give either data paths or a [synth] table, not both")
    if cfg.data:
        profiles = []
        for path in _csv_paths(cfg.data):
            try:
                profiles.extend(parse_cycles(path))
            except DataError as exc:
                raise type(exc)(f"{path}: {exc}") from None
        cells = group_by_cell(profiles)
        if not cells:
            raise DataError("no cycles found in the data files")
        return cells
    if cfg.synth is not None:
        return generate_synthetic(cfg.synth_config(), cfg.seed).cells
    raise ConfigError("no data: pass --data PATH or put a [synth] table in the config")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    synth = cfg.synth_config()
    check_horizon(synth, cfg.model_config().window, cfg.holdout)
    data = generate_synthetic(synth, cfg.seed)
    out = _out_dir(cfg)
    files = []
    for cell, profiles in data.cells.items():
        name = f"{cell}.csv"
        write_cycles(profiles, out / name)
        files.append(name)
    manifest = {
        "seed": cfg.seed,
        "synth": synth.to_dict(),
        "files": files,
        "regeneration_events": {c: [[e.cycle_index, e.jump] for e in ev]
                                for c, ev in data.events.items()},
    }
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(files)} cell files ({synth.n_cycles} cycles each) and manifest.json to {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    cells = load_cells(cfg)
    data = prepare(cells, cfg.target_cell, cfg.holdout)
    windows, _ = build_corpus(data, cfg.target_cell, cfg.holdout, model_cfg.window, cfg.sigmas,
                              cfg.seed)
    out = _out_dir(cfg)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.json"
    print(f"training on {len(windows)} windows (target {cfg.target_cell}, holdout {cfg.holdout}, "
          f"sigmas {list(cfg.sigmas)})")
    params, report = train(windows, model_cfg, train_cfg)
    save_checkpoint(ckpt, params, data.stats,
                    {"target_cell": cfg.target_cell, "holdout": cfg.holdout,
                     "sigmas": list(cfg.sigmas), "seed": cfg.seed, "n_windows": len(windows)})
    report.write_log(out / "train_log.csv")
    first, last = report.epochs[0], report.final
    print(f"epoch 1 total {first.total_loss:.6g}; epoch {last.epoch} total {last.total_loss:.6g} "
          f"(pred {last.pred_loss:.6g}, recon {last.recon_loss:.6g})")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.json"
    params, stats, _ = load_checkpoint(ckpt)
    if stats is None:
        raise CheckpointError(f"checkpoint {ckpt} carries no normalization statistics")
    if stats.layout.n_features != params.config.n_features:
        raise CheckpointError(f"checkpoint feature layout has {stats.layout.n_features} entries "
                              f"but the model expects {params.config.n_features}")
    cells = load_cells(cfg)
    targets = sorted(cells) if cfg.target_cell == "all" else [cfg.target_cell]
    for cell in targets:
        if cell not in cells:
            raise ConfigError(f"target cell {cell!r} not found; available: {sorted(cells)}")
    data = PreparedData(downsample_cells(cells, stats.layout), {}, stats)
    model_reports, naive_reports = [], []
    for cell in targets:
        report, naive = assess(params, data, cell, cfg.holdout)
        report.write_csv(out / f"report_{cell}.csv")
        plot_report(report, out / f"pred_{cell}.svg", out / f"abserr_{cell}.svg")
        model_reports.append(report)
        naive_reports.append(naive)
    write_metrics(model_reports, out / "metrics.csv")
    summary = format_summary({"model": model_reports, "naive": naive_reports})
    (out / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    print(summary)
    return 0


def cmd_gradcheck(cfg: RunConfig, inject: str | None = None) -> int:
    if inject:
        with nc.inject_fault(inject):
            report = gradient_audit(GRADCHECK_CONFIG, seed=cfg.seed)
    else:
        report = gradient_audit(GRADCHECK_CONFIG, seed=cfg.seed)
    print(report.format_table(param_group))
    worst = report.worst
    print(f"worst: {worst.name} rel_diff {worst.rel_diff:.3e} (tol {report.tol:g})")
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat TOML config file")
    p.add_argument("--seed", type=int, help="global seed (model init, shuffling, noise, synth)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--target-cell", dest="target_cell", help="held-out cell id ('all' to evaluate every cell)")
    p.add_argument("--holdout", type=int, help="number of final cycles to forecast (default 60)")
    p.add_argument("--no-augment", dest="no_augment", action="store_true",
                   help="train on the original windows only")
    p.add_argument("--sigma", help="comma-separated noise levels, e.g. 0.001,0.002,0.005")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capformer",
        description="Battery capacity forecasting with an autoencoder + transformer encoder.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cycle dataset")
    _common(p)
    p.add_argument("--n-cells", dest="n_cells", type=int)
    p.add_argument("--n-cycles", dest="n_cycles", type=int)

    for name, text in (("train", "train a model and write a checkpoint"),
                       ("evaluate", "rolling forecast over the holdout")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--data", nargs="+", help="cycle CSV files or directories")
        p.add_argument("--checkpoint", help="checkpoint path (default OUT/model.json)")
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--lr", type=float)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the full model")
    _common(p)
    p.add_argument("--inject-fault", dest="inject_fault", help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_flags(load_config(args.config), args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        return cmd_gradcheck(cfg, args.inject_fault)
    except CapformerError as exc:
        print(f"capformer {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"capformer {args.command}: IOError: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
