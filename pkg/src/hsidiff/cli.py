"""Command line front end: synth, train, eval, map, sweep, selftest.

Every training-style command reads one flat JSON run configuration;
unknown keys are rejected and any flag given on the command line wins
over the file. One seed in the configuration is split into independent
streams for parameter init, the data split, and the training loop, so
a whole run is reproducible from the config alone. With timing turned
off the artifacts of two identical runs are byte-identical.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file
format error, 3 numeric failure (including a failed selftest).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import data, metrics, model, plots
from . import selftest as selftest_mod
from . import tensor as tc
from . import train as tr
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    GraphError,
    NumericError,
    ShapeError,
    UndefinedMetricError,
    UsageError,
)


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad invocations as UsageError (exit 1)."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class RunConfig:
    """Flat union of the data, model, split, and optimizer settings."""

    cube: str | None = None
    out_dir: str | None = None
    patch_size: int = 12
    pca_bands: int = 15
    token_spatial: int = 2
    d_embed: int = 64
    n_layers: int = 4
    n_heads: int = 8
    d_ff: int = 256
    dropout_rate: float = 0.1
    ln_eps: float = 1e-3
    attention_kind: str = "DMHSA"
    l2_head: float = 0.01
    dtype: str = "f64"
    epochs: int = 50
    batch_size: int = 56
    lr: float = 0.001
    decay: float = 1e-6
    shuffle: bool = True
    train_frac: float = 0.25
    val_frac: float = 0.25
    test_frac: float = 0.50
    seed: int = 0
    timing: bool = True


_INT_KEYS = {
    "patch_size",
    "pca_bands",
    "token_spatial",
    "d_embed",
    "n_layers",
    "n_heads",
    "d_ff",
    "epochs",
    "batch_size",
    "seed",
}
_FLOAT_KEYS = {
    "dropout_rate",
    "ln_eps",
    "l2_head",
    "lr",
    "decay",
    "train_frac",
    "val_frac",
    "test_frac",
}
_BOOL_KEYS = {"shuffle", "timing"}
_STR_KEYS = {"cube", "out_dir", "attention_kind", "dtype"}


def _checked(key: str, value):
    """Coerce a JSON value onto the key's declared type or complain."""
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a boolean, got {value!r}")
        return value
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
        return float(value)
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string, got {value!r}")
        return value
    raise ConfigError(f"unknown config key {key!r}")


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File values under CLI overrides under the defaults."""
    values: dict = {}
    if path is not None:
        try:
            raw = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            parsed = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: config is not valid JSON ({exc})") from exc
        if not isinstance(parsed, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        for key, value in parsed.items():
            values[key] = _checked(key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = _checked(key, value)
    return RunConfig(**values)


def _require(rc: RunConfig, *keys: str) -> None:
    for key in keys:
        if getattr(rc, key) is None:
            raise ConfigError(f"missing config key {key!r}")


def model_config_from(rc: RunConfig, n_classes: int, model_seed: int) -> model.ModelConfig:
    return model.ModelConfig(
        n_classes=n_classes,
        patch_size=rc.patch_size,
        pca_bands=rc.pca_bands,
        token_spatial=rc.token_spatial,
        d_embed=rc.d_embed,
        n_layers=rc.n_layers,
        n_heads=rc.n_heads,
        d_ff=rc.d_ff,
        dropout_rate=rc.dropout_rate,
        ln_eps=rc.ln_eps,
        attention_kind=rc.attention_kind,
        l2_head=rc.l2_head,
        seed=model_seed,
        dtype=rc.dtype,
    )


# ---------------------------------------------------------------------------
# Pipeline plumbing


@contextlib.contextmanager
def _stage(name: str):
    """Prefix errors with the pipeline stage that raised them."""
    try:
        yield
    except OSError as exc:
        raise DataError(f"[{name}] {exc}") from exc
    except (
        ConfigError,
        DataError,
        FormatError,
        GraphError,
        NumericError,
        ShapeError,
        UndefinedMetricError,
    ) as exc:
        if exc.args and isinstance(exc.args[0], str):
            exc.args = (f"[{name}] {exc.args[0]}",) + exc.args[1:]
        raise


def _stack(samples: list[data.PatchSample]) -> tuple[np.ndarray, np.ndarray]:
    patches = np.stack([np.asarray(s.patch, dtype=np.float64) for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return patches, labels


def _evaluate_samples(
    params, config: model.ModelConfig, samples: list[data.PatchSample], timing: bool
) -> metrics.EvalReport:
    cm = metrics.ConfusionMatrix(config.n_classes)
    wall = 0.0
    if samples:
        patches, labels = _stack(samples)
        start = time.perf_counter()
        predicted = tr.predict_labels(params, config, patches)
        wall = time.perf_counter() - start if timing else 0.0
        cm.add_batch(labels, predicted)
    return metrics.evaluate(cm, wall_seconds=wall)


def _pca_extras(pca: data.PcaModel) -> dict[str, np.ndarray]:
    return {
        "pca/mean": pca.mean,
        "pca/components": pca.components,
        "pca/explained_variance": pca.explained_variance,
    }


def _pca_from_checkpoint(ckpt: model.Checkpoint, cube: data.HsiCube) -> data.PcaModel:
    """Stored projection when the checkpoint has one, else a fresh fit."""
    keys = ("pca/mean", "pca/components", "pca/explained_variance")
    if all(k in ckpt.extras for k in keys):
        pca = data.PcaModel(
            mean=ckpt.extras["pca/mean"],
            components=ckpt.extras["pca/components"],
            explained_variance=ckpt.extras["pca/explained_variance"],
        )
    else:
        pca = data.fit_pca(cube, ckpt.config.pca_bands)
    if pca.mean.shape[0] != cube.bands:
        raise DataError(
            f"checkpoint projection expects {pca.mean.shape[0]} bands, cube has {cube.bands}"
        )
    if pca.components.shape[0] != ckpt.config.pca_bands:
        raise DataError(
            f"checkpoint projection keeps {pca.components.shape[0]} components, "
            f"model expects {ckpt.config.pca_bands}"
        )
    return pca


def run_training_pipeline(rc: RunConfig, out_dir: Path, log=print) -> dict:
    """load -> pca -> patches -> split -> train -> evaluate -> artifacts."""
    _require(rc, "cube")
    model_seed, split_seed, train_seed = tc.spawn_seeds(rc.seed, 3)

    with _stage("load"):
        cube = data.load_cube(rc.cube)
        n_classes = cube.n_classes
        if n_classes < 2:
            raise DataError(f"cube has {n_classes} labeled classes; need at least 2")
    with _stage("pca"):
        pca = data.fit_pca(cube, rc.pca_bands)
        reduced = data.apply_pca(cube, pca)
    with _stage("patches"):
        samples = data.extract_patches(reduced, rc.patch_size)
    with _stage("split"):
        spec = data.SplitSpec(rc.train_frac, rc.val_frac, rc.test_frac, seed=split_seed)
        train_set, val_set, test_set = data.stratified_split(samples, spec)
    log(
        f"cube {cube.width}x{cube.height}x{cube.bands}, {n_classes} classes; "
        f"split {len(train_set)}/{len(val_set)}/{len(test_set)} train/val/test"
    )

    mc = model_config_from(rc, n_classes, model_seed)
    tcfg = tr.TrainConfig(
        epochs=rc.epochs,
        batch_size=rc.batch_size,
        lr=rc.lr,
        decay=rc.decay,
        l2_head=rc.l2_head,
        seed=train_seed,
        shuffle=rc.shuffle,
    )
    with _stage("train"):
        result = tr.train_model(train_set, val_set, mc, tcfg, timing=rc.timing, log=log)
    with _stage("evaluate"):
        report = _evaluate_samples(result.best_params, mc, test_set, rc.timing)

    class_names = cube.class_names or [f"class {c}" for c in range(1, n_classes + 1)]
    with _stage("artifacts"):
        figures = out_dir / "figures"
        figures.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.csv").write_text(tr.history_csv(result.history), encoding="utf-8")
        (out_dir / "report.json").write_text(metrics.report_json(report), encoding="utf-8")
        (out_dir / "report.txt").write_text(
            metrics.report_text(report, class_names), encoding="utf-8"
        )
        model.save_checkpoint(
            out_dir / "model.ckpt",
            mc,
            result.best_params,
            epoch=result.best_epoch,
            rng_state=result.rng_state,
            extras=_pca_extras(pca),
        )
        plots.save_training_curves(result.history, figures / "training_curves.png")
        plots.save_confusion_figure(report.confusion.counts, figures / "confusion.png", class_names)
        manifest = {
            "artifacts": [
                "figures/confusion.png",
                "figures/training_curves.png",
                "history.csv",
                "manifest.json",
                "model.ckpt",
                "report.json",
                "report.txt",
            ],
            "config": asdict(rc),
            "derived": {
                "n_classes": n_classes,
                "param_count": model.param_count(mc),
                "seeds": {"model": model_seed, "split": split_seed, "train": train_seed},
            },
            "results": {
                "best_epoch": result.best_epoch,
                "best_val_oa": result.best_val_oa,
                "test_aa": report.aa,
                "test_kappa": report.kappa,
                "test_oa": report.oa,
            },
        }
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    log(metrics.report_text(report, class_names))
    log(f"artifacts in {out_dir}")
    return {"report": report, "result": result, "model_config": mc, "n_classes": n_classes}


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    cube = data.synth_cube(
        classes=args.classes,
        width=args.width,
        height=args.height,
        bands=args.bands,
        noise_sigma=args.sigma,
        seed=args.seed,
    )
    data.save_cube(cube, args.out)
    print(
        f"wrote {args.out}: {cube.width}x{cube.height}x{cube.bands}, "
        f"{cube.n_classes} classes, sigma {args.sigma}"
    )
    return 0


def _overrides(args) -> dict:
    names = [f.name for f in fields(RunConfig)]
    return {name: getattr(args, name) for name in names if hasattr(args, name)}


def cmd_train(args) -> int:
    rc = load_run_config(args.config, _overrides(args))
    _require(rc, "cube", "out_dir")
    run_training_pipeline(rc, Path(rc.out_dir))
    return 0


_SUBSETS = ("all", "train", "val", "test")


def cmd_eval(args) -> int:
    with _stage("load"):
        ckpt = model.load_checkpoint(args.checkpoint)
        cube = data.load_cube(args.cube)
    mc = ckpt.config
    with _stage("pca"):
        pca = _pca_from_checkpoint(ckpt, cube)
        reduced = data.apply_pca(cube, pca)
    with _stage("patches"):
        samples = data.extract_patches(reduced, mc.patch_size)
        if cube.n_classes > mc.n_classes:
            raise DataError(
                f"cube labels reach class {cube.n_classes}, model has {mc.n_classes}"
            )
    if args.subset != "all":
        if args.config is None:
            raise UsageError("evaluating a split subset needs --config for the split seed")
        rc = load_run_config(args.config, _overrides(args))
        _, split_seed, _ = tc.spawn_seeds(rc.seed, 3)
        with _stage("split"):
            spec = data.SplitSpec(rc.train_frac, rc.val_frac, rc.test_frac, seed=split_seed)
            parts = data.stratified_split(samples, spec)
        samples = parts[_SUBSETS.index(args.subset) - 1]
    with _stage("evaluate"):
        report = _evaluate_samples(ckpt.params, mc, samples, args.timing)
    class_names = cube.class_names
    print(f"{len(samples)} samples, subset {args.subset}")
    print(metrics.report_text(report, class_names), end="")
    if args.out_dir is not None:
        out_dir = Path(args.out_dir)
        with _stage("artifacts"):
            figures = out_dir / "figures"
            figures.mkdir(parents=True, exist_ok=True)
            (out_dir / "report.json").write_text(metrics.report_json(report), encoding="utf-8")
            (out_dir / "report.txt").write_text(
                metrics.report_text(report, class_names), encoding="utf-8"
            )
            plots.save_confusion_figure(
                report.confusion.counts, figures / "confusion.png", class_names
            )
        print(f"report in {out_dir}")
    return 0


def cmd_map(args) -> int:
    with _stage("load"):
        ckpt = model.load_checkpoint(args.checkpoint)
        cube = data.load_cube(args.cube)
    mc = ckpt.config
    with _stage("pca"):
        pca = _pca_from_checkpoint(ckpt, cube)
        reduced = data.apply_pca(cube, pca)
    with _stage("predict"):
        predicted = np.zeros((cube.height, cube.width), dtype=np.int64)
        coords: list[tuple[int, int]] = []
        windows: list[np.ndarray] = []

        def flush():
            if not windows:
                return
            labels = tr.predict_labels(ckpt.params, mc, np.stack(windows))
            for (r, c), label in zip(coords, labels):
                predicted[r, c] = label
            coords.clear()
            windows.clear()

        for row, col, window in data.iter_windows(reduced, mc.patch_size):
            coords.append((row, col))
            windows.append(np.asarray(window, dtype=np.float64))
            if len(windows) >= 256:
                flush()
        flush()
    with _stage("artifacts"):
        rgb = plots.render_class_map(predicted, mc.n_classes)
        plots.write_ppm(args.out, rgb)
    print(f"wrote {args.out}: {cube.width}x{cube.height} map, {mc.n_classes} classes")
    return 0


_SWEEP_AXES = {
    "patch": "patch_size",
    "layers": "n_layers",
    "heads": "n_heads",
    "attention": "attention_kind",
    "train_frac": "train_frac",
}


def _parse_sweep_values(axis: str, text: str) -> list:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise UsageError("--values must list at least one value")
    if axis == "attention":
        for item in items:
            if item not in model.ATTENTION_KINDS:
                raise UsageError(
                    f"invalid attention kind {item!r}; choose from "
                    f"{', '.join(model.ATTENTION_KINDS)}"
                )
        return items
    if axis == "train_frac":
        try:
            return [float(item) for item in items]
        except ValueError as exc:
            raise UsageError(f"axis train_frac needs numeric values, got {text!r}") from exc
    try:
        return [int(item) for item in items]
    except ValueError as exc:
        raise UsageError(f"axis {axis} needs integer values, got {text!r}") from exc


def _sweep_variant(rc: RunConfig, axis: str, value) -> RunConfig:
    if axis == "train_frac":
        # Growing train eats into test; val stays put.
        return replace(rc, train_frac=value, test_frac=1.0 - value - rc.val_frac)
    return replace(rc, **{_SWEEP_AXES[axis]: value})


def cmd_sweep(args) -> int:
    rc = load_run_config(args.config, _overrides(args))
    _require(rc, "cube", "out_dir")
    values = _parse_sweep_values(args.axis, args.values)
    out_dir = Path(rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    for value in values:
        run_dir = out_dir / "runs" / f"{args.axis}-{value}"
        row = {
            "axis": args.axis,
            "value": value,
            "n_patches": "",
            "oa": "",
            "aa": "",
            "kappa": "",
            "seconds": "",
            "error": "",
        }
        start = time.perf_counter()
        try:
            variant = _sweep_variant(rc, args.axis, value)
            row["n_patches"] = (variant.patch_size // variant.token_spatial) ** 2
            outcome = run_training_pipeline(
                variant, run_dir, log=lambda msg: print(f"[{args.axis}={value}] {msg}")
            )
            report = outcome["report"]
            row.update(oa=report.oa, aa=report.aa, kappa=report.kappa)
            row["seconds"] = time.perf_counter() - start if rc.timing else 0.0
        except (
            ConfigError,
            DataError,
            FormatError,
            GraphError,
            NumericError,
            ShapeError,
            UndefinedMetricError,
        ) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            print(f"[{args.axis}={value}] failed: {row['error']}", file=sys.stderr)
        rows.append(row)

    buffer = io.StringIO()
    writer = csv.DictWriter(
        buffer, fieldnames=["axis", "value", "n_patches", "oa", "aa", "kappa", "seconds", "error"]
    )
    writer.writeheader()
    writer.writerows(rows)
    (out_dir / "sweep.csv").write_text(buffer.getvalue(), encoding="utf-8")
    plots.save_sweep_figure(rows, args.axis, out_dir / "sweep.png")
    print(f"sweep results in {out_dir / 'sweep.csv'}")
    return 0


def cmd_selftest(args) -> int:
    results = selftest_mod.run_all(args.inject_fault)
    for r in results:
        line = f"{r.name:22s} max error {r.max_error:.3e}  {'PASS' if r.passed else 'FAIL'}"
        if not r.passed and r.detail:
            line += f"  ({r.detail})"
        print(line)
    if all(r.passed for r in results):
        print("selftest passed")
        return 0
    print("selftest FAILED", file=sys.stderr)
    return 3


# ---------------------------------------------------------------------------
# Parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration file")
    g = p.add_argument_group("configuration overrides")
    g.add_argument("--cube", help="input cube path")
    g.add_argument("--out-dir", dest="out_dir", help="artifact directory")
    for flag, dest in (
        ("--patch-size", "patch_size"),
        ("--pca-bands", "pca_bands"),
        ("--token-spatial", "token_spatial"),
        ("--d-embed", "d_embed"),
        ("--n-layers", "n_layers"),
        ("--n-heads", "n_heads"),
        ("--d-ff", "d_ff"),
        ("--epochs", "epochs"),
        ("--batch-size", "batch_size"),
        ("--seed", "seed"),
    ):
        g.add_argument(flag, dest=dest, type=int)
    for flag, dest in (
        ("--dropout-rate", "dropout_rate"),
        ("--ln-eps", "ln_eps"),
        ("--l2-head", "l2_head"),
        ("--lr", "lr"),
        ("--decay", "decay"),
        ("--train-frac", "train_frac"),
        ("--val-frac", "val_frac"),
        ("--test-frac", "test_frac"),
    ):
        g.add_argument(flag, dest=dest, type=float)
    g.add_argument("--attention-kind", dest="attention_kind", choices=model.ATTENTION_KINDS)
    g.add_argument("--dtype", choices=("f64", "f32"))
    g.add_argument("--shuffle", dest="shuffle", action=argparse.BooleanOptionalAction)
    g.add_argument("--timing", dest="timing", action=argparse.BooleanOptionalAction)


def build_parser() -> _Parser:
    parser = _Parser(prog="hsidiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic labeled cube")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--bands", type=int, default=20)
    p.add_argument("--sigma", type=float, default=0.1, help="Gaussian noise level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output cube path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a classifier and write artifacts")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cube")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--subset", choices=_SUBSETS, default="all")
    p.add_argument("--config", help="run configuration (needed for --subset)")
    p.add_argument("--out-dir", dest="out_dir", help="also write report files here")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--timing", dest="timing", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="classify every pixel into a PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True, help="output PPM path")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("sweep", help="train once per value of one axis")
    p.add_argument("--axis", required=True, choices=sorted(_SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selftest", help="run the built-in diagnostic suites")
    p.add_argument(
        "--inject-fault",
        metavar="OP",
        help="corrupt one op's backward rule to prove the gradient suite catches it",
    )
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args) or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, DataError, UndefinedMetricError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
