"""Command-line entry point: synth, train, evaluate, gradcheck, grid.

Exit codes: 0 success, 1 usage, 2 data validation, 3 numerical failure.
Set ``REGIONEMBED_LOG`` (e.g. ``DEBUG``) to change log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .checkpoint import export_embeddings, read_embeddings, save_checkpoint
from .data import DataValidationError, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .downstream import LassoConfig, kfold_evaluate
from .trainer import ConfigError, ModelConfig, TrainConfig, config_dict, train

log = logging.getLogger("regionembed")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, command: str, config: dict, seed, inputs: dict, outputs: dict, started: float):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }
    tmp = out / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    os.replace(tmp, out / "run_manifest.json")
    return manifest


def cmd_synth(args) -> int:
    started = time.time()
    try:
        cfg = SynthConfig(n=args.regions, latent_dim=args.latent, noise=args.noise, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _prepare_out(Path(args.out), args.force)
    dataset = generate_synthetic(cfg)
    save_dataset(dataset, out)
    write_manifest(out, "synth", asdict(cfg), args.seed, {}, {"dataset": str(out)}, started)
    print(f"wrote synthetic dataset n={dataset.n} v={dataset.v} to {out}")
    return EXIT_OK


MODEL_FLAGS = {
    "d": "d", "d_prime": "d_prime", "d_m": "d_m", "channels": "channels", "heads": "heads",
    "intra_layers": "intra_layers", "inter_layers": "inter_layers", "fusion_layers": "fusion_layers",
    "dropout": "dropout", "leaky_slope": "leaky_slope", "conv_kernel": "conv_kernel",
}
TRAIN_FLAGS = {
    "epochs": "epochs", "lr": "learning_rate", "seed": "seed", "precision": "precision",
    "weight_decay": "weight_decay", "grad_clip": "grad_clip", "checkpoint_every": "checkpoint_every",
}


def resolve_configs(args):
    """Built-in defaults < config file < command-line flags."""
    raw = {"model": {}, "train": {}}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        raw["model"].update(loaded.get("model", {}))
        raw["train"].update(loaded.get("train", {}))
    for flag, key in MODEL_FLAGS.items():
        if getattr(args, flag, None) is not None:
            raw["model"][key] = getattr(args, flag)
    for flag, key in TRAIN_FLAGS.items():
        if getattr(args, flag, None) is not None:
            raw["train"][key] = getattr(args, flag)
    try:
        return ModelConfig.from_dict(raw["model"]), TrainConfig.from_dict(raw["train"])
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"config error: {exc}") from None


def _train_into(out: Path, dataset, model_cfg: ModelConfig, train_cfg: TrainConfig):
    def periodic(epoch, model):
        if train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint", model, dataset, epoch, train_cfg)

    with (out / "train.log.jsonl").open("w") as fh:
        result = train(dataset, model_cfg, train_cfg, log_file=fh, on_epoch=periodic)
    save_checkpoint(out / "checkpoint", result.model, dataset, result.epochs, train_cfg)
    export_embeddings(result.model, dataset, out, train_cfg.seed, result.epochs)
    return result


def cmd_train(args) -> int:
    started = time.time()
    model_cfg, train_cfg = resolve_configs(args)
    dataset = load_dataset(args.data)
    out = _prepare_out(Path(args.out), args.force)
    result = _train_into(out, dataset, model_cfg, train_cfg)
    write_manifest(
        out, "train", config_dict(model_cfg, train_cfg), train_cfg.seed,
        {"data": str(args.data), "config": args.config},
        {
            "checkpoint": str(out / "checkpoint"),
            "embeddings": str(out / "embeddings.csv"),
            "log": str(out / "train.log.jsonl"),
            "initial_loss": result.initial_loss,
            "final_loss": result.final_loss,
            "seconds_per_epoch": result.seconds / result.epochs,
        },
        started,
    )
    print(
        f"trained {result.epochs} epochs: loss {result.initial_loss:.6g} -> {result.final_loss:.6g}; "
        f"alpha={[round(a, 4) for a in result.history[-1]['alpha']]} beta={result.history[-1]['beta']:.4f}"
    )
    return EXIT_OK


def _evaluate(embeddings_path, data_dir, task, folds, alpha, seed):
    dataset = load_dataset(data_dir)
    if task not in dataset.targets:
        available = ", ".join(sorted(dataset.targets)) or "none"
        raise UsageError(f"unknown task {task!r}; available tasks: {available}")
    h = read_embeddings(embeddings_path)
    if h.shape[0] != dataset.n:
        raise DataValidationError(f"{embeddings_path}: {h.shape[0]} rows for {dataset.n} regions")
    return kfold_evaluate(h, dataset.targets[task], folds, seed, LassoConfig(alpha=alpha), task=task)


def cmd_evaluate(args) -> int:
    started = time.time()
    if args.manifest:
        prior = json.loads(Path(args.manifest).read_text())
        if prior.get("command") != "evaluate":
            raise UsageError(f"{args.manifest} is not an evaluate manifest")
        for key, value in prior["inputs"].items():
            setattr(args, key, value)
        for key in ("folds", "alpha"):
            setattr(args, key, prior["config"][key])
        args.seed = prior["seed"]
        if not args.out:
            args.out = str(Path(args.manifest).parent)
    missing = [f for f in ("embeddings", "data", "task") if not getattr(args, f)]
    if missing:
        raise UsageError(f"missing required options: {', '.join('--' + m for m in missing)}")
    report = _evaluate(args.embeddings, args.data, args.task, args.folds, args.alpha, args.seed)
    out = Path(args.out) if args.out else Path(args.embeddings).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = f"report_{args.task}"
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    (out / f"{stem}.txt").write_text(report.to_text())
    write_manifest(
        out, "evaluate", {"folds": args.folds, "alpha": args.alpha}, args.seed,
        {"embeddings": str(args.embeddings), "data": str(args.data), "task": args.task},
        {"json": str(out / f"{stem}.json"), "text": str(out / f"{stem}.txt")},
        started,
    )
    print(report.to_text(), end="")
    if not report.converged:
        log.error("Lasso did not converge on at least one fold")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(seed=args.seed, eps=args.eps, tol=args.tol)
    worst = report.worst
    print(
        f"checked {len(report.entries)} coordinates in {len(report.groups)} parameter tensors; "
        f"max relative error {report.max_rel_error:.3e} (tol {args.tol:g})"
    )
    if not report.passed:
        print(f"FAIL worst parameter {worst.parameter}{list(worst.index)}: "
              f"analytic {worst.analytic:.6e} vs numeric {worst.numeric:.6e}")
        return EXIT_NUMERIC
    print("PASS")
    return EXIT_OK


def _grid_cell(job):
    data_dir, out_dir, d, layers, model_raw, train_raw, task, folds, alpha, seed = job
    try:
        model_cfg = ModelConfig.from_dict({**model_raw, "d": d, "fusion_layers": layers})
        train_cfg = TrainConfig.from_dict(train_raw)
        dataset = load_dataset(data_dir)
        cell = Path(out_dir) / f"d{d}_L{layers}"
        cell.mkdir(parents=True, exist_ok=True)
        result = _train_into(cell, dataset, model_cfg, train_cfg)
        report = kfold_evaluate(result.embeddings, dataset.targets[task], folds, seed, LassoConfig(alpha=alpha), task)
        (cell / f"report_{task}.json").write_text(report.to_json() + "\n")
        return {"d": d, "layers": layers, "status": "ok", **report.mean}
    except Exception as exc:  # a failed cell must not stop the grid
        return {"d": d, "layers": layers, "status": f"failed: {exc}", "mae": None, "rmse": None, "r2": None}


def format_grid(rows, task: str) -> str:
    lines = [f"task: {task}", f"{'d':>5} {'layers':>6} {'MAE':>12} {'RMSE':>12} {'R2':>8}  status"]
    for r in rows:
        if r["status"] == "ok":
            lines.append(f"{r['d']:>5} {r['layers']:>6} {r['mae']:>12.4f} {r['rmse']:>12.4f} {r['r2']:>8.4f}  ok")
        else:
            lines.append(f"{r['d']:>5} {r['layers']:>6} {'-':>12} {'-':>12} {'-':>8}  {r['status']}")
    return "\n".join(lines) + "\n"


def cmd_grid(args) -> int:
    started = time.time()
    model_cfg, train_cfg = resolve_configs(args)
    dataset = load_dataset(args.data)
    if args.task not in dataset.targets:
        raise UsageError(f"unknown task {args.task!r}; available tasks: {', '.join(sorted(dataset.targets))}")
    out = _prepare_out(Path(args.out), args.force)
    jobs = [
        (args.data, str(out), d, layers, asdict(model_cfg), asdict(train_cfg), args.task, args.folds, args.alpha, train_cfg.seed)
        for d in args.d_list
        for layers in args.layers_list
    ]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_grid_cell, jobs))
    else:
        rows = [_grid_cell(job) for job in jobs]
    table = format_grid(rows, args.task)
    (out / "grid.txt").write_text(table)
    (out / "grid.json").write_text(json.dumps(rows, indent=2) + "\n")
    write_manifest(
        out, "grid",
        {**config_dict(model_cfg, train_cfg), "d_list": args.d_list, "layers_list": args.layers_list,
         "folds": args.folds, "alpha": args.alpha},
        train_cfg.seed, {"data": str(args.data), "task": args.task},
        {"table": str(out / "grid.txt")}, started,
    )
    print(table, end="")
    return EXIT_OK


def _add_model_flags(p):
    g = p.add_argument_group("model (defaults: d=144, d'=64, d_m=72, c=32, heads=4, layers 3/3/3)")
    g.add_argument("--d", type=int)
    g.add_argument("--d-prime", dest="d_prime", type=int)
    g.add_argument("--d-m", dest="d_m", type=int)
    g.add_argument("--channels", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--intra-layers", dest="intra_layers", type=int)
    g.add_argument("--inter-layers", dest="inter_layers", type=int)
    g.add_argument("--fusion-layers", dest="fusion_layers", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--leaky-slope", dest="leaky_slope", type=float)
    g.add_argument("--conv-kernel", dest="conv_kernel", type=int)
    t = p.add_argument_group("training (defaults: 2500 epochs, Adam lr 0.0005)")
    t.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--precision", choices=["float32", "float64"])
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--grad-clip", dest="grad_clip", type=float)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, help="also checkpoint every N epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regionembed", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a planted-factor synthetic dataset")
    p.add_argument("--regions", type=int, required=True)
    p.add_argument("--latent", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory and export embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="k-fold Lasso evaluation of an embedding file")
    p.add_argument("--embeddings")
    p.add_argument("--data")
    p.add_argument("--task")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report directory (default: next to the embeddings)")
    p.add_argument("--manifest", help="re-run from an earlier evaluate run_manifest.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients (tiny float64 model)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("grid", help="train and evaluate over embedding sizes x fusion layer counts")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--d-list", dest="d_list", type=_int_list, default=[36, 72, 144, 288])
    p.add_argument("--layers-list", dest="layers_list", type=_int_list, default=[1, 2, 3, 4, 5])
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--force", action="store_true")
    _add_model_flags(p)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("REGIONEMBED_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"regionembed: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as exc:
        print(f"regionembed: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except nx.NumericalError as exc:
        print(f"regionembed: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
