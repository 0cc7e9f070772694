"""Command line: dataset generation, basis building, training, evaluation,
gradient checking, and the complexity benchmark.

Every subcommand takes a JSON config (``--config``), an output directory
(``--out``) where all writes happen, and optional ``--seed``/``--force``
overrides.  Exit codes: 0 success, 1 config/validation error, 2 runtime
failure.  The ``SUPRA_THREADS`` environment variable caps worker and BLAS
threads.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .basis import load_basis, save_basis, chebyshev_basis_2d, fourier_basis_2d, \
    laplacian_eigenbasis
from .data import gen_dataset, load_manifest
from .diagnostics import BENCH_CHANNELS, BENCH_POINTS, BENCH_SIZES, \
    full_model_grad_check, run_bench
from .mesh import load_off
from .model import ModelConfig, SupraOperator, load_model
from .training import TrainConfig, TrainingDiverged, evaluate, fit, mean_baseline

GRADCHECK_LIMIT = 1e-4


class ConfigError(ValueError):
    """Bad config file: wrong type, missing field, or unknown key."""


# ---------------------------------------------------------------------------
# config schema: nested known keys with type predicates


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return _is_int(v) or isinstance(v, float)


def _is_pair(v):
    return isinstance(v, list) and len(v) == 2 and all(_is_int(x) for x in v)


def _is_str(v):
    return isinstance(v, str)


def _is_bool(v):
    return isinstance(v, bool)


def _is_int_list(v):
    return isinstance(v, list) and all(_is_int(x) for x in v)


def _opt(pred):
    return lambda v: v is None or pred(v)


SCHEMA = {
    "seed": _is_int,
    "task": {
        "name": _is_str,
        "grid": _is_pair,
        "counts": _is_pair,
        "annulus_resolution": _is_pair,
    },
    "basis": {
        "kind": _is_str,
        "grid": _is_pair,
        "modes": _is_pair,
        "degrees": _is_pair,
        "n": _is_int,
        "mesh": _is_str,
    },
    "model": {
        "in_channels": _is_int,
        "out_channels": _is_int,
        "hidden": _is_int,
        "layers": _is_int,
        "n_basis": _is_int,
        "heads": _is_int,
        "norm": _is_str,
        "mlp_ratio": _is_int,
        "use_coords": _is_bool,
    },
    "train": {
        "epochs": _is_int,
        "batch_size": _is_int,
        "max_lr": _is_num,
        "weight_decay": _is_num,
        "loss": _is_str,
        "h1_weight": _is_num,
        "augment": _is_bool,
        "max_steps": _opt(_is_int),
        "eval_every": _is_int,
    },
    "paths": {
        "dataset": _is_str,
        "basis": _is_str,
        "run": _is_str,
        "split": _is_str,
    },
    "gradcheck": {
        "hidden": _is_int,
        "layers": _is_int,
        "n_basis": _is_int,
        "heads": _is_int,
        "norm": _is_str,
        "grid": _is_pair,
        "h": _is_num,
        "scale": _is_num,
    },
    "bench": {
        "points": _is_int_list,
        "channels": _is_int_list,
        "sizes": _is_int_list,
        "reps": _is_int,
    },
}


def validate_config(blob: dict, schema=None, prefix: str = "") -> None:
    schema = SCHEMA if schema is None else schema
    if not isinstance(blob, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be an object")
    for key, value in blob.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config field {path!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            validate_config(value, expected, prefix=f"{path}.")
        elif not expected(value):
            raise ConfigError(f"config field {path!r} has invalid value {value!r}")


def load_config(path, seed_override=None) -> dict:
    if path is None:
        return {} if seed_override is None else {"seed": seed_override}
    try:
        blob = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    validate_config(blob)
    if seed_override is not None:
        blob["seed"] = seed_override
    return blob


def _require(cfg: dict, *path):
    cur = cfg
    for key in path:
        if not isinstance(cur, dict) or key not in cur:
            raise ConfigError(f"config field {'.'.join(path)!r} is required")
        cur = cur[key]
    return cur


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict, out: Path, force: bool) -> int:
    task = _require(cfg, "task", "name")
    counts = tuple(_require(cfg, "task", "counts"))
    seed = cfg.get("seed", 0)
    grid = tuple(cfg.get("task", {}).get("grid", [32, 32]))
    annulus = tuple(cfg.get("task", {}).get("annulus_resolution", [16, 64]))
    manifest = gen_dataset(task, counts, seed, out, grid=grid,
                           annulus_resolution=annulus, force=force)
    print(f"wrote {len(manifest['files'])} samples to {out}")
    return 0


def _build_basis_from_config(cfg: dict):
    kind = _require(cfg, "basis", "kind")
    section = cfg["basis"]
    if kind == "fourier":
        modes = section.get("modes", [4, 4])
        grid = tuple(_require(cfg, "basis", "grid"))
        return fourier_basis_2d(modes[0], modes[1], grid)
    if kind == "chebyshev":
        degrees = section.get("degrees", [9, 9])
        grid = tuple(_require(cfg, "basis", "grid"))
        return chebyshev_basis_2d(degrees[0], degrees[1], grid)
    if kind == "laplacian":
        mesh = load_off(_require(cfg, "basis", "mesh"))
        return laplacian_eigenbasis(mesh, _require(cfg, "basis", "n"))
    raise ConfigError(f"unknown basis kind {kind!r}")


def cmd_build_basis(cfg: dict, out: Path) -> int:
    basis = _build_basis_from_config(cfg)
    save_basis(basis, out)
    deviation = basis.gram_deviation()
    report = {"kind": basis.kind, "size": basis.size, "points": basis.num_points,
              "gram_deviation": deviation, "fingerprint": basis.fingerprint()}
    (out / "gram_report.json").write_text(json.dumps(report, indent=2))
    print(f"basis {basis.kind} N={basis.size} gram_deviation={deviation:.3e}")
    return 0


def cmd_train(cfg: dict, out: Path) -> int:
    dataset = _require(cfg, "paths", "dataset")
    basis = load_basis(_require(cfg, "paths", "basis"))
    manifest = load_manifest(dataset)
    model_cfg = dict(cfg.get("model", {}))
    model_cfg.setdefault("in_channels", manifest["in_channels"])
    model_cfg.setdefault("out_channels", manifest["out_channels"])
    model_cfg.setdefault("n_basis", basis.size)
    model_cfg.setdefault("seed", cfg.get("seed", 0))
    config = ModelConfig(**model_cfg)
    if config.n_basis != basis.size:
        raise ConfigError(f"model.n_basis {config.n_basis} does not match basis size "
                          f"{basis.size}")
    model = SupraOperator(config, basis)
    train_cfg = dict(cfg.get("train", {}))
    train_cfg.setdefault("seed", cfg.get("seed", 0))
    result = fit(model, dataset, TrainConfig(**train_cfg), out)
    summary = {"best_test_rel_l2": result.best_test_rel_l2,
               "final_train_loss": result.final_train_loss,
               "steps": result.steps,
               "checkpoint": result.checkpoint_dir}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"trained {result.steps} steps; best test rel_l2 {result.best_test_rel_l2:.4e}")
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    dataset = _require(cfg, "paths", "dataset")
    basis = load_basis(_require(cfg, "paths", "basis"))
    run_dir = Path(_require(cfg, "paths", "run"))
    split = cfg.get("paths", {}).get("split", "test")
    model = load_model(run_dir / "checkpoint", basis)
    normalizers = json.loads((run_dir / "normalizer.json").read_text())
    metrics = evaluate(model, dataset, split, normalizers)
    metrics["baseline_rel_l2"] = mean_baseline(dataset, split)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    print(f"{split} mean rel_l2 {metrics['mean_rel_l2']:.4e} "
          f"(mean-predictor baseline {metrics['baseline_rel_l2']:.4e})")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    opts = cfg.get("gradcheck", {})
    err = full_model_grad_check(
        hidden=opts.get("hidden", 8), layers=opts.get("layers", 2),
        n_basis=opts.get("n_basis", 16), heads=opts.get("heads", 2),
        norm=opts.get("norm", "layer"), grid=tuple(opts.get("grid", [8, 8])),
        h=opts.get("h", 1e-5), seed=cfg.get("seed", 3),
        scale=opts.get("scale", 3.0))
    print(f"max relative gradient error: {err:.3e} (limit {GRADCHECK_LIMIT:.0e})")
    return 0 if err <= GRADCHECK_LIMIT else 2


def cmd_bench(cfg: dict, out: Path) -> int:
    opts = cfg.get("bench", {})
    rows = run_bench(out / "bench.csv",
                     points=tuple(opts.get("points", BENCH_POINTS)),
                     channels=tuple(opts.get("channels", BENCH_CHANNELS)),
                     sizes=tuple(opts.get("sizes", BENCH_SIZES)),
                     reps=opts.get("reps", 5))
    supra = [r for r in rows if r["impl"] == "supra"]
    ref = [r for r in rows if r["impl"] == "token_reference"]
    print(f"bench.csv written: {len(rows)} rows "
          f"(supra {min(r['wall_seconds'] for r in supra):.2e}.."
          f"{max(r['wall_seconds'] for r in supra):.2e}s, reference "
          f"{min(r['wall_seconds'] for r in ref):.2e}.."
          f"{max(r['wall_seconds'] for r in ref):.2e}s)")
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # flag misuse is a validation error: exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="supra",
                     description="Subspace-attention neural operator toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_out in (("gen-data", True), ("build-basis", True),
                            ("train", True), ("eval", True),
                            ("gradcheck", False), ("bench", True)):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        if needs_out:
            p.add_argument("--out", type=str, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--force", action="store_true",
                       help="overwrite non-empty output")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, seed_override=args.seed)
        out = Path(args.out) if getattr(args, "out", None) else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out, args.force)
        if args.command == "build-basis":
            return cmd_build_basis(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "bench":
            return cmd_bench(cfg, out)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
