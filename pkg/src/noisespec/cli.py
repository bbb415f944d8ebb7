"""Batch command-line front end for the pipeline.

Subcommands: gen, train, search, predict, hs, eval, sweep.  Settings come
from an optional key=value config file plus flags; flags win.  Every
artifact-producing command takes a single --seed, writes its outputs plus a
provenance sidecar into --out, and holds a lockfile so only one writer runs
per output directory.  Exit codes: 0 success, 2 usage/config error, 1
runtime numerical failure (with an error record in JSON).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import hs as hs_module
from .dataset import (GridSpec, ParamRanges, build_dataset, load_dataset,
                      save_dataset)
from .evaluate import (compare_methods_sweep, evaluate_method, file_sha256,
                       write_provenance, write_report_csv)
from .mlp import (TUNED_CONFIGS, MlpConfig, SearchSpace, fit_model, load_model,
                  predict_params, random_search, save_model)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def merged_setting(args, config: dict[str, str], name: str, cast, default):
    """Flag value if set, else config-file value, else default."""
    flag = getattr(args, name.replace("-", "_"), None)
    if flag is not None:
        return flag
    if name in config:
        try:
            return cast(config[name])
        except ValueError as exc:
            raise UsageError(f"config key {name!r}: {exc}") from None
    return default


class OutputLock:
    """Single writer per output directory via an O_EXCL lockfile."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(
                f"output directory {self.path.parent} is locked by another run "
                f"(remove {self.path} if stale)") from None
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def _provenance(out_dir: Path, command: str, settings: dict, extra: dict | None = None):
    record = {
        "tool": "noisespec",
        "version": __version__,
        "command": command,
        "settings": settings,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if extra:
        record.update(extra)
    write_provenance(out_dir / "provenance.json", record)


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _progress(label):
    def callback(done, total):
        if done == total or done % max(1, total // 10) == 0:
            print(f"{label}: {done}/{total}", flush=True)
    return callback


def _parse_nbars(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--nbars must be a comma-separated integer list, got {text!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args, config):
    _require(args, "out", "seed")
    count = merged_setting(args, config, "count", int, 100)
    noise_std = merged_setting(args, config, "noise-std", float, 0.05)
    delta_tau_ns = merged_setting(args, config, "delta-tau-ns", int, 20)
    out = Path(args.out)
    grid = GridSpec(delta_tau_ns=delta_tau_ns)
    ranges = ParamRanges()
    with OutputLock(out):
        dataset = build_dataset(ranges, grid, count, args.seed, noise_std,
                                progress=_progress("gen"))
        data_path = out / "dataset.txt"
        save_dataset(dataset, data_path)
        _provenance(out, "gen", {"count": count, "seed": args.seed,
                                 "noise_std": noise_std,
                                 "delta_tau_ns": delta_tau_ns},
                    {"dataset_sha256": file_sha256(data_path)})
    print(f"wrote {data_path}")
    return 0


def _config_from_settings(args, config, n_bar) -> MlpConfig:
    preset = TUNED_CONFIGS.get(n_bar)
    fields = {
        "hidden_layer_count": int, "hidden_dim": int, "learning_rate": float,
        "batch_size": int, "dropout": float, "weight_decay": float,
        "max_epochs": int, "patience": int,
    }
    values = {}
    for name, cast in fields.items():
        default = getattr(preset, name) if preset is not None else None
        values[name] = merged_setting(args, config, name.replace("_", "-"),
                                      cast, default)
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise UsageError(
            f"no tuned preset for n_bar={n_bar}; set {', '.join(missing)} "
            f"via flags or config file")
    try:
        return MlpConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args, config):
    _require(args, "out", "seed", "dataset", "nbar")
    dataset = load_dataset(args.dataset)
    cfg = _config_from_settings(args, config, args.nbar)
    out = Path(args.out)
    with OutputLock(out):
        model = fit_model(dataset, args.nbar, cfg, args.seed)
        model_path = out / f"mlp_nbar{args.nbar}.txt"
        save_model(model, model_path)
        history_path = out / f"history_nbar{args.nbar}.csv"
        with open(history_path, "w") as fh:
            fh.write("epoch,train_risk,val_risk\n")
            for epoch, (tr, va) in enumerate(model.history_):
                fh.write(f"{epoch},{tr!r},{va!r}\n")
        _provenance(out, "train",
                    {"dataset": str(args.dataset), "n_bar": args.nbar,
                     "seed": args.seed, "config": asdict(cfg)},
                    {"dataset_sha256": file_sha256(args.dataset),
                     "model_sha256": file_sha256(model_path),
                     "best_epoch": model.best_epoch_,
                     "best_val_risk": model.best_val_risk_})
    print(f"trained n_bar={args.nbar}: best_val_risk={model.best_val_risk_:.6g} "
          f"(epoch {model.best_epoch_}) -> {model_path}")
    return 0


def cmd_search(args, config):
    _require(args, "out", "seed", "dataset", "nbar", "trials")
    dataset = load_dataset(args.dataset)
    max_epochs = merged_setting(args, config, "search-max-epochs", int, 40)
    patience = merged_setting(args, config, "search-patience", int, 5)
    out = Path(args.out)
    with OutputLock(out):
        best, records = random_search(dataset, args.nbar, SearchSpace(),
                                      args.trials, args.seed,
                                      max_epochs=max_epochs, patience=patience,
                                      log=print)
        trials_path = out / "trials.csv"
        with open(trials_path, "w") as fh:
            fh.write("trial,hidden_layer_count,hidden_dim,learning_rate,"
                     "batch_size,dropout,weight_decay,val_risk,status\n")
            for rec in records:
                c = rec["config"]
                fh.write(f"{rec['trial']},{c.hidden_layer_count},{c.hidden_dim},"
                         f"{c.learning_rate!r},{c.batch_size},{c.dropout!r},"
                         f"{c.weight_decay!r},{rec['val_risk']!r},{rec['status']}\n")
        best_path = out / "best_config.txt"
        with open(best_path, "w") as fh:
            for key, value in asdict(best).items():
                fh.write(f"{key.replace('_', '-')} = {value!r}\n")
        _provenance(out, "search",
                    {"dataset": str(args.dataset), "n_bar": args.nbar,
                     "trials": args.trials, "seed": args.seed},
                    {"dataset_sha256": file_sha256(args.dataset),
                     "best_config": asdict(best)})
    print(f"best config -> {best_path}")
    return 0


def cmd_predict(args, config):
    _require(args, "model", "input")
    model = load_model(args.model)
    try:
        rows = [np.array([float(v) for v in line.split()])
                for line in Path(args.input).read_text().splitlines() if line.strip()]
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read feature vectors from {args.input}: {exc}")
    if not rows:
        raise UsageError(f"no feature vectors in {args.input}")
    for row in rows:
        if len(row) != model.n_features_in_:
            raise UsageError(
                f"feature vector length {len(row)} != model input "
                f"{model.n_features_in_}")
    lines = ["s0_mhz,amplitude_mhz,sigma_mhz"]
    for row in rows:
        est = predict_params(model, row)
        lines.append(f"{est.s0!r},{est.amplitude!r},{est.sigma!r}")
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        out = Path(args.out)
        with OutputLock(out):
            (out / "predictions.csv").write_text(text)
            _provenance(out, "predict", {"model": str(args.model),
                                         "input": str(args.input)},
                        {"model_sha256": file_sha256(args.model)})
        print(f"wrote {out / 'predictions.csv'}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_hs(args, config):
    _require(args, "out", "dataset", "nbar")
    dataset = load_dataset(args.dataset)
    split = merged_setting(args, config, "split", str, "test")
    out = Path(args.out)
    with OutputLock(out):
        lines = ["index,s0_mhz,amplitude_mhz,sigma_mhz,reduced_chi2,converged"]
        all_points = []
        harmonics = hs_module.assign_harmonics(dataset.grid, dataset.ranges.omega_c)
        for idx in dataset.split_indices(split):
            sample = dataset.samples[idx]
            est, fits, report = hs_module.reconstruct(sample, dataset.grid,
                                                      args.nbar, dataset.ranges)
            lines.append(f"{idx},{est.s0!r},{est.amplitude!r},{est.sigma!r},"
                         f"{report.reduced_chi2!r},{report.converged}")
            if args.spectrum_out is not None:
                all_points.extend(
                    hs_module.reconstruct_spectrum_points(fits, harmonics))
        (out / "hs_estimates.csv").write_text("\n".join(lines) + "\n")
        if args.spectrum_out is not None:
            hs_module.export_spectrum_csv(all_points, args.spectrum_out)
        _provenance(out, "hs", {"dataset": str(args.dataset), "n_bar": args.nbar,
                                "split": split},
                    {"dataset_sha256": file_sha256(args.dataset)})
    print(f"wrote {out / 'hs_estimates.csv'}")
    return 0


def cmd_eval(args, config):
    _require(args, "out", "dataset", "nbar")
    dataset = load_dataset(args.dataset)
    method = merged_setting(args, config, "method", str, "NN")
    out = Path(args.out)
    model = None
    extra = {"dataset_sha256": file_sha256(args.dataset)}
    if method == "NN":
        _require(args, "model")
        model = load_model(args.model)
        extra["model_sha256"] = file_sha256(args.model)
    with OutputLock(out):
        report = evaluate_method(dataset, args.nbar, method, model=model)
        write_report_csv([report], out / "report.csv")
        _provenance(out, "eval", {"dataset": str(args.dataset),
                                  "n_bar": args.nbar, "method": method,
                                  "dataset_seed": dataset.seed}, extra)
    print(f"wrote {out / 'report.csv'}")
    return 0


def cmd_sweep(args, config):
    _require(args, "out", "dataset", "nbars", "models")
    dataset = load_dataset(args.dataset)
    n_bars = _parse_nbars(args.nbars)
    models_dir = Path(args.models)
    models, hashes = {}, {}
    for n_bar in n_bars:
        path = models_dir / f"mlp_nbar{n_bar}.txt"
        if path.exists():
            models[n_bar] = load_model(path)
            hashes[str(path)] = file_sha256(path)
    out = Path(args.out)
    with OutputLock(out):
        reports = compare_methods_sweep(dataset, models, n_bars, log=print)
        write_report_csv(reports, out / "report.csv")
        _provenance(out, "sweep", {"dataset": str(args.dataset),
                                   "n_bars": n_bars,
                                   "dataset_seed": dataset.seed},
                    {"dataset_sha256": file_sha256(args.dataset),
                     "model_sha256": hashes})
    print(f"wrote {out / 'report.csv'} ({len(reports)} rows)")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "search": cmd_search,
    "predict": cmd_predict,
    "hs": cmd_hs,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisespec",
        description="Simulate CP dephasing data and reconstruct the noise "
                    "spectral density with an MLP or harmonics spectroscopy.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, seed=False):
        p.add_argument("--config", type=str, default=None,
                       help="key = value settings file (flags win)")
        p.add_argument("--out", type=str, default=None, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, seed=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--delta-tau-ns", type=int, default=None)

    p = sub.add_parser("train", help="train the MLP for one pulse-count cap")
    common(p, seed=True)
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--nbar", type=int, default=None)
    for name in ("hidden-layer-count", "hidden-dim", "batch-size",
                 "max-epochs", "patience"):
        p.add_argument(f"--{name}", type=int, default=None)
    for name in ("learning-rate", "dropout", "weight-decay"):
        p.add_argument(f"--{name}", type=float, default=None)

    p = sub.add_parser("search", help="hyperparameter random search")
    common(p, seed=True)
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--nbar", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--search-max-epochs", type=int, default=None)
    p.add_argument("--search-patience", type=int, default=None)

    p = sub.add_parser("predict", help="predict NSD parameters from feature vectors")
    common(p)
    p.add_argument("--model", type=str, default=None)
    p.add_argument("--input", type=str, default=None,
                   help="text file, one whitespace-separated vector per line")

    p = sub.add_parser("hs", help="harmonics-spectroscopy reconstruction")
    common(p)
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--nbar", type=int, default=None)
    p.add_argument("--split", type=str, default=None)
    p.add_argument("--spectrum-out", type=str, default=None,
                   help="also export spectrum-point diagnostics CSV")

    p = sub.add_parser("eval", help="metrics for one method at one cap")
    common(p)
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--model", type=str, default=None)
    p.add_argument("--nbar", type=int, default=None)
    p.add_argument("--method", type=str, default=None, choices=("NN", "HS"))

    p = sub.add_parser("sweep", help="NN-vs-HS report across pulse-count caps")
    common(p)
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--models", type=str, default=None,
                   help="directory with mlp_nbar<N>.txt files")
    p.add_argument("--nbars", type=str, default=None, help="comma-separated caps")

    return parser


def _error_record(exc: Exception) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc)})


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = read_config_file(args.config) if getattr(args, "config", None) else {}
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(_error_record(exc), file=sys.stderr)
        return USAGE_ERROR
    except (OSError, ValueError) as exc:
        # unreadable/malformed inputs are usage-class errors
        print(_error_record(exc), file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # numerical/runtime failures
        print(_error_record(exc), file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
