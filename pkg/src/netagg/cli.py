"""Command-line harness: train, compose, evaluate, forgetting-report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import compose as X
from .aggregation import get_op
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledDataset, load_dataset, save_dataset, synthetic_pair, union
from .errors import ConfigError, DataError, FormatError, NumericsError, ShapeError
from .models import Model, get_preset
from .params import ParamSet
from .reporting import ReportTable, save_report_figure, save_training_curves
from .training import TrainConfig, baseline_train, evaluate, joint_train

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICS = 3

_CONFIG_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} | {"datasets"}


@contextmanager
def _out_dir_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{out_dir}: already in use by another invocation (stale {lock}?)") from None
    try:
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def load_config(path) -> tuple[TrainConfig, list[str]]:
    """Parse a JSON config; unknown keys are rejected to catch typos."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    datasets = raw.pop("datasets", None)
    if not isinstance(datasets, list) or not all(isinstance(d, str) for d in datasets):
        raise ConfigError(f"{path}: 'datasets' must be a list of dataset names")
    try:
        config = TrainConfig(**raw)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None
    if len(datasets) != config.n:
        raise ConfigError(f"{path}: {len(datasets)} datasets listed but n={config.n}")
    return config, datasets


def _load_split(data_root, names: list[str], split: str) -> list[LabeledDataset]:
    out = []
    for name in names:
        base = Path(data_root) / name
        if not base.is_dir():
            raise DataError(f"dataset {name!r} not found under {data_root}")
        out.append(load_dataset(data_root, name, split))
    return out


def _write_metrics_csv(path, history) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "model", "split", "accuracy", "loss_task", "loss_agg", "loss_total"])
        for rec in history:
            for model, splits in rec.accuracy.items():
                for split, acc in splits.items():
                    w.writerow(
                        [
                            rec.epoch,
                            model,
                            split,
                            f"{acc:.6f}",
                            f"{rec.loss_task[model]:.6f}",
                            f"{rec.loss_agg:.6f}",
                            f"{rec.loss_total:.6f}",
                        ]
                    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_synthetic(args) -> int:
    root = Path(args.out)
    train_a, train_b = synthetic_pair(args.seed, args.train_per_class)
    test_a, test_b = synthetic_pair(args.seed + 1, args.test_per_class)
    for ds, split in ((train_a, "train"), (train_b, "train"), (test_a, "test"), (test_b, "test")):
        save_dataset(root, ds.name, split, ds.images[:, 0], ds.labels)
    print(f"wrote synth-a and synth-b under {root}")
    return 0


def cmd_train(args) -> int:
    config, names = load_config(args.config)
    datasets = _load_split(args.data, names, "train")
    out_dir = Path(args.out)
    with _out_dir_lock(out_dir):
        if config.mode == "joint":
            bundle = joint_train(config, datasets)
        else:
            bundle = baseline_train(config, datasets)

        ckpt_dir = out_dir / "checkpoints"
        meta_base = {"run_id": out_dir.name, "preset": config.preset, "op": config.agg_op, "n": config.n}
        if config.mode == "joint":
            for i, ext in enumerate(bundle.extractors):
                save_checkpoint(ckpt_dir / f"N{i + 1}", ext, {**meta_base, "head": "head"})
            save_checkpoint(ckpt_dir / "Nstar", bundle.star, {**meta_base, "head": "head"})
            save_checkpoint(ckpt_dir / "head", bundle.head, meta_base)
        elif config.mode == "baseline-separate":
            for i, (ext, hd) in enumerate(zip(bundle.extractors, bundle.heads)):
                save_checkpoint(ckpt_dir / f"N{i + 1}", ext, {**meta_base, "head": f"head_N{i + 1}"})
                save_checkpoint(ckpt_dir / f"head_N{i + 1}", hd, meta_base)
        else:
            save_checkpoint(ckpt_dir / "Nstar", bundle.star, {**meta_base, "head": "head_Nstar"})
            save_checkpoint(ckpt_dir / "head_Nstar", bundle.star_head, meta_base)

        _write_metrics_csv(out_dir / "metrics.csv", bundle.history)
        echo = dataclasses.asdict(config)
        echo["datasets"] = names
        (out_dir / "config.echo.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
        save_training_curves(bundle.history, out_dir)
    print(f"run complete: {out_dir}")
    return 0


def _load_operands(run_dir: Path, names: list[str]) -> dict[str, tuple[ParamSet, dict]]:
    out = {}
    for name in names:
        path = run_dir / "checkpoints" / name
        if not path.is_dir():
            raise DataError(f"checkpoint {name!r} not found in {run_dir}")
        out[name] = load_checkpoint(path)
    return out


def _compose_paramset(run_dir: Path, expr: str, donor_name: str | None, op_kind: str):
    """Evaluate an expression against a run's checkpoints.

    Returns (extractor ParamSet, manifest meta) where the extractor carries
    the composed aggregable entries plus the donor's normalisation entries.
    """
    node = X.parse_expression(expr)
    names = X.referenced_names(node)
    loaded = _load_operands(run_dir, names)
    op = get_op(op_kind)
    combined, count = X.evaluate_expression(node, {k: v[0] for k, v in loaded.items()}, op)

    if donor_name is None:
        donor_name = "Nstar" if (run_dir / "checkpoints" / "Nstar").is_dir() else names[0]
    donor_ps, donor_manifest = _load_operands(run_dir, [donor_name])[donor_name]

    extractor = ParamSet("composed")
    for name, arr in donor_ps.items():
        if donor_ps.is_aggregable(name):
            extractor.add(name, combined[name], aggregable=True)
        else:
            extractor.add(name, arr.copy(), aggregable=False)
    meta = {
        "expression": X.normalize(node),
        "donor": donor_name,
        "op": op_kind,
        "n_parts": count,
        "preset": donor_manifest.get("preset"),
        "head": donor_manifest.get("head"),
    }
    return extractor, meta


def cmd_compose(args) -> int:
    run_dir = Path(args.run)
    extractor, meta = _compose_paramset(run_dir, args.expr, args.donor, args.op)
    save_checkpoint(Path(args.out), extractor, meta)
    print(f"composed {meta['expression']} (donor {meta['donor']}) -> {args.out}")
    return 0


def _model_for(run_dir: Path, descriptor: str, op_kind: str | None) -> Model:
    """Build an evaluable model from a checkpoint name or an expression."""
    plain = (run_dir / "checkpoints" / descriptor).is_dir()
    if plain:
        extractor, manifest = load_checkpoint(run_dir / "checkpoints" / descriptor)
    else:
        extractor, manifest = _compose_paramset(run_dir, descriptor, None, op_kind or _run_op(run_dir))
    head_name = manifest.get("head")
    if head_name is None:
        raise DataError(f"{descriptor}: checkpoint has no associated head")
    head, _ = load_checkpoint(run_dir / "checkpoints" / head_name)
    return Model(get_preset(manifest["preset"]), extractor, head)


def _run_op(run_dir: Path) -> str:
    echo = run_dir / "config.echo.json"
    if echo.exists():
        return json.loads(echo.read_text()).get("agg_op", "sum")
    return "sum"


def _run_datasets(run_dir: Path, override: list[str] | None) -> list[str]:
    if override:
        return override
    echo = run_dir / "config.echo.json"
    if echo.exists():
        return json.loads(echo.read_text())["datasets"]
    raise ConfigError(f"{run_dir}: no config.echo.json; pass --datasets explicitly")


def _build_report(run_dir: Path, data_root, dataset_names: list[str], descriptors: list[str]) -> ReportTable:
    tests = _load_split(data_root, dataset_names, "test")
    combined = tests[0]
    for t in tests[1:]:
        combined = union(combined, t)
    table = ReportTable(columns=[*dataset_names, "union"])
    for desc in descriptors:
        model = _model_for(run_dir, desc, None)
        accs = [evaluate(model, t) for t in tests]
        accs.append(evaluate(model, combined))
        table.add_row(desc, accs)
    return table


def _write_report(table: ReportTable, out_dir: Path, stem: str, extra_text: str = "") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / f"{stem}.csv")
    text = table.to_text() + extra_text
    (out_dir / f"{stem}.txt").write_text(text)
    save_report_figure(table, out_dir / f"{stem}.png")
    print(text, end="")


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    dataset_names = _run_datasets(run_dir, args.datasets)
    descriptors = args.models or _default_descriptors(run_dir)
    table = _build_report(run_dir, args.data, dataset_names, descriptors)
    _write_report(table, Path(args.out), "report")
    return 0


def _default_descriptors(run_dir: Path) -> list[str]:
    ckpts = run_dir / "checkpoints"
    if not ckpts.is_dir():
        raise DataError(f"{run_dir}: no checkpoints directory")
    names = sorted(p.name for p in ckpts.iterdir() if p.is_dir() and not p.name.startswith("head"))
    if not names:
        raise DataError(f"{run_dir}: no model checkpoints found")
    return names


def cmd_forgetting_report(args) -> int:
    run_dir = Path(args.run)
    for required in ("N1", "N2", "Nstar", "head"):
        if not (run_dir / "checkpoints" / required).is_dir():
            raise DataError(f"{run_dir}: missing checkpoint {required!r}; need a completed joint run")
    dataset_names = _run_datasets(run_dir, args.datasets)
    rows = ["N1+N2", "N2+N1", "N1", "(N1+N2)-N2", "N2", "(N1+N2)-N1"]
    table = _build_report(run_dir, args.data, dataset_names, rows)

    d1, d2 = dataset_names[0], dataset_names[1]
    lines = ["", "retention / forgetting vs reference rows (percentage points):"]
    for removed, kept_ds, gone_ds, ref in (("N2", d1, d2, "N1"), ("N1", d2, d1, "N2")):
        expr = f"(N1+N2)-{removed}"
        d_keep = (table.cell(expr, kept_ds) - table.cell(ref, kept_ds)) * 100
        d_gone = (table.cell(expr, gone_ds) - table.cell("N1+N2", gone_ds)) * 100
        lines.append(f"  {expr}: retained {kept_ds} {d_keep:+.2f} vs {ref}; forgotten {gone_ds} {d_gone:+.2f} vs N1+N2")
    _write_report(table, Path(args.out), "forgetting", extra_text="\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netagg", description="Test-time network aggregation harness")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", help="materialise the synthetic dataset pair as IDX files")
    s.add_argument("--out", required=True, help="dataset root directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-per-class", type=int, default=500)
    s.add_argument("--test-per-class", type=int, default=100)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("train", help="run a training experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("compose", help="evaluate a +/- expression over checkpoints")
    s.add_argument("expr")
    s.add_argument("--run", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--donor", default=None, help="checkpoint donating normalisation parameters")
    s.add_argument("--op", default="sum", choices=["sum", "mean"])
    s.set_defaults(func=cmd_compose)

    s = sub.add_parser("evaluate", help="accuracy report for checkpoints and expressions")
    s.add_argument("--run", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--datasets", nargs="*", default=None)
    s.add_argument("--models", nargs="*", default=None, help="checkpoint names or expressions")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("forgetting-report", help="merge-order and selective-forgetting table")
    s.add_argument("--run", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--datasets", nargs="*", default=None)
    s.set_defaults(func=cmd_forgetting_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, ShapeError, FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
