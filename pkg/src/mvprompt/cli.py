"""Command-line harness.

Subcommands: ``train``, ``eval``, ``ablate``, ``visualize-prompts``, and
``make-synthetic``. Flags mirror the TrainConfig fields and override values
from ``--config`` files (key = value format). Exit codes: 0 success,
1 validation error, 2 runtime error.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import TrainConfig, load_config
from .data import make_synthetic
from .errors import ValidationError
from .geometry import PointCloud
from . import training as harness


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as exc:
            click.echo(f"validation error: {exc}", err=True)
            sys.exit(1)
        except click.exceptions.Exit:
            raise
        except Exception as exc:
            click.echo(f"runtime error: {exc}", err=True)
            sys.exit(2)

    return wrapper


def _config_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="Config file (key = value lines)."),
        click.option("--dataset", type=str, default=None),
        click.option("--data-root", type=str, default=None),
        click.option("--n-points", type=int, default=None),
        click.option("--synthetic-classes", type=int, default=None),
        click.option("--synthetic-per-class", type=int, default=None),
        click.option("--shots", type=int, default=None),
        click.option("--n-views", type=int, default=None),
        click.option("--mode", type=str, default=None),
        click.option("--backbone", type=str, default=None),
        click.option("--weights-path", type=str, default=None),
        click.option("--image-size", type=int, default=None),
        click.option("--c1", type=int, default=None),
        click.option("--c2", type=int, default=None),
        click.option("--k-neighbors", type=int, default=None),
        click.option("--token-stride", type=int, default=None),
        click.option("--lr", type=float, default=None),
        click.option("--weight-decay", type=float, default=None),
        click.option("--epochs", type=int, default=None),
        click.option("--batch-size", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--augment/--no-augment", default=None),
        click.option("--tta-votes", type=int, default=None),
        click.option("--out-dir", type=str, default=None),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _build_config(config_path, **overrides) -> TrainConfig:
    return load_config(config_path, overrides)


@click.group()
def main():
    """Few-shot point-cloud classification with multi-view vision prompts."""


@main.command("train")
@_config_options
@_exit_codes
def train_cmd(config_path, **overrides):
    """Train a model and persist the best checkpoint plus metrics."""
    config = _build_config(config_path, **overrides)

    def log(row):
        msg = (
            f"epoch {row['epoch']:4d}  lr {row['lr']:.6f}  "
            f"loss {row['train_loss']:.4f}  train oAcc {row['train_oacc']:.4f}"
        )
        if "val_oacc" in row:
            msg += f"  val oAcc {row['val_oacc']:.4f}"
        click.echo(msg)

    ckpt = harness.train(config, log=log)
    click.echo(f"checkpoint written to {Path(config.out_dir) / 'checkpoint.pt'}")
    click.echo(f"best epoch: {ckpt.epoch}")


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--tta-votes", type=int, default=None)
@click.option("--data-root", type=str, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--report", "report_path", type=click.Path(), default=None,
              help="Optional JSON report output path.")
@_exit_codes
def eval_cmd(checkpoint_path, tta_votes, data_root, seed, report_path):
    """Evaluate a checkpoint on its test split with TTA voting."""
    ckpt = harness.load_checkpoint(checkpoint_path)
    report = harness.evaluate(ckpt, tta_votes=tta_votes, data_root=data_root, seed=seed)
    click.echo(f"oAcc: {report['oacc']:.4f}  (n={report['n_test']}, votes={report['tta_votes']})")
    for name, acc in report["per_class"].items():
        click.echo(f"  {name:<16s} {acc:.4f}")
    if report_path:
        Path(report_path).write_text(json.dumps(report) + "\n")
        click.echo(f"report written to {report_path}")


@main.command("ablate")
@_config_options
@click.option("--cells", type=str, default="baseline:1,full:4",
              help="Comma-separated mode:views cells, e.g. 'baseline:1,full:4'.")
@click.option("--seeds", type=str, default=None,
              help="Comma-separated seeds; each cell reports mean over them.")
@_exit_codes
def ablate_cmd(config_path, cells, seeds, **overrides):
    """Run an ablation grid over (mode, views) cells and print the table."""
    base = _build_config(config_path, **overrides)
    configs = []
    for cell in cells.split(","):
        cell = cell.strip()
        if not cell:
            continue
        try:
            mode, views = cell.split(":")
            configs.append(base.replace(mode=mode.strip(), n_views=int(views)))
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"bad cell {cell!r}; expected mode:views") from exc
    seed_list = [int(s) for s in seeds.split(",")] if seeds else None
    rows = harness.ablate(configs, seeds=seed_list)
    header = f"{'Attention Fusion':<18s}{'Conv Fusion':<13s}{'#views':<8s}{'oAcc':<8s}{'range'}"
    click.echo(header)
    for row in rows:
        att = "yes" if row["attention_fusion"] else "no"
        conv = "yes" if row["conv_fusion"] else "no"
        click.echo(
            f"{att:<18s}{conv:<13s}{row['views']:<8d}{row['oacc']:<8.4f}"
            f"[{row['oacc_min']:.4f}, {row['oacc_max']:.4f}]"
        )
    out_path = Path(base.out_dir) / "ablation.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    click.echo(f"table written to {out_path}")


@main.command("visualize-prompts")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--index", type=int, default=0, help="Test-split cloud index.")
@click.option("--cloud-file", type=click.Path(), default=None,
              help="Optional .npy or whitespace xyz text file instead of --index.")
@click.option("--out-dir", type=str, required=True)
@_exit_codes
def visualize_cmd(checkpoint_path, index, cloud_file, out_dir):
    """Export per-view prompt images and a scatter render for one cloud."""
    from .data import load_dataset

    ckpt = harness.load_checkpoint(checkpoint_path)
    if cloud_file is not None:
        path = Path(cloud_file)
        coords = np.load(path) if path.suffix == ".npy" else np.loadtxt(path)
        cloud = PointCloud(np.asarray(coords, dtype=np.float64)[:, :3])
    else:
        config = TrainConfig.from_dict(ckpt.config)
        dataset = load_dataset(
            config.dataset, config.data_root, n_points=config.n_points, seed=config.seed,
            synthetic_classes=config.synthetic_classes,
            synthetic_per_class=config.synthetic_per_class,
        )
        test_idx = dataset.indices("test")
        if not 0 <= index < test_idx.size:
            raise ValidationError(f"--index {index} outside [0, {test_idx.size})")
        cloud = dataset.clouds[test_idx[index]]
    paths = harness.visualize_prompts(ckpt, cloud, out_dir)
    for p in paths:
        click.echo(p)


@main.command("make-synthetic")
@click.option("--classes", "n_classes", type=int, default=8)
@click.option("--per-class", type=int, default=40)
@click.option("--n-points", type=int, default=1024)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", type=click.Path(), required=True)
@_exit_codes
def make_synthetic_cmd(n_classes, per_class, n_points, seed, out_path):
    """Materialize a synthetic dataset to an .npz archive."""
    ds = make_synthetic(n_classes, per_class, n_points, seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        out_path,
        coords=np.stack([c.coords for c in ds.clouds]),
        labels=ds.labels,
        split=ds.split,
        class_names=np.array(ds.class_names),
    )
    click.echo(f"{len(ds.clouds)} clouds ({n_classes} classes) written to {out_path}")


if __name__ == "__main__":
    main()
