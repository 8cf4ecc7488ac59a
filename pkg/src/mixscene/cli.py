"""Command-line front end.

Subcommands: make-data, pretrain-encoders, train, generate, separate,
evaluate, report. All artifacts embed the config hash; mixing artifacts
produced under different configurations is rejected.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric failure. The output root can be overridden with MIXSCENE_OUT.
"""

from __future__ import annotations

import csv
import os
import sys

import click

from . import pipeline
from .config import RunConfig, load_config
from .encoders import load_reference_encoders, save_reference_encoders
from .errors import (
    ConfigurationError,
    ContractViolationError,
    DataError,
    EvaluationError,
    FormatError,
    MixsceneError,
    NumericError,
    ShapeMismatchError,
)
from .generation import GenerationConfig, generate_mixed, generate_separated, write_truth_sidecar
from .trainer import load_checkpoint
from .world import load_dataset, read_config_hash, save_dataset, write_png, write_ppm

ENV_OUT = "MIXSCENE_OUT"


def _resolve(path: str) -> str:
    root = os.environ.get(ENV_OUT)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _load(config_path: str | None, **overrides) -> RunConfig:
    return load_config(config_path, overrides)


def _check_hash(expected: str, found: str, what: str) -> None:
    if expected != found:
        raise ConfigurationError(
            f"{what} was produced under config hash {found}, current config is {expected}")


@click.group()
def cli():
    """Mixed-signal scene generation and separation pipeline."""


@cli.command("make-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, help="dataset directory")
@click.option("--per-combo", type=int, default=None, help="tuples per (fg, bg) combination")
@click.option("--full-scale", is_flag=True, help="use 1000 tuples per combination")
def cmd_make_data(config_path, out, per_combo, full_scale):
    """Build the training-tuple dataset and write manifest.csv."""
    if full_scale and per_combo is None:
        per_combo = 1000
    cfg = _load(config_path, per_combo=per_combo)
    out = _resolve(out)
    splits = pipeline.make_data(cfg)
    manifest = save_dataset(splits, pipeline.build_roster(cfg), out, cfg.config_hash())
    total = sum(len(v) for v in splits.values())
    click.echo(f"wrote {total} tuples to {manifest}")


@cli.command("pretrain-encoders")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, help="encoder directory")
def cmd_pretrain_encoders(config_path, out):
    """Pretrain and freeze the reference audio/image encoders."""
    cfg = _load(config_path)
    out = _resolve(out)
    enc = pipeline.pretrain(cfg)
    if not enc.gate_passed():
        raise NumericError(
            f"pretraining gate failed: holdout R@1 {enc.holdout_r1:.3f} < 0.95")
    save_reference_encoders(enc, out, cfg.config_hash())
    click.echo(f"holdout R@1 {enc.holdout_r1:.3f}; encoders written to {out}")


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", required=True, help="dataset directory from make-data")
@click.option("--encoders", "enc_dir", required=True, help="directory from pretrain-encoders")
@click.option("--out", required=True, help="run directory")
@click.option("--mode", type=click.Choice(pipeline.MODES), default="A2A")
@click.option("--seed", type=int, default=0)
def cmd_train(config_path, data, enc_dir, out, mode, seed):
    """Train a separator (or the single-head baseline) on a dataset."""
    cfg = _load(config_path)
    data, enc_dir, out = _resolve(data), _resolve(enc_dir), _resolve(out)
    if not os.path.exists(os.path.join(data, "manifest.csv")):
        raise ConfigurationError(f"missing dataset manifest in {data}; run make-data first")
    if not os.path.exists(os.path.join(enc_dir, "f_audio.ckpt")):
        raise ConfigurationError(f"missing encoders in {enc_dir}; run pretrain-encoders first")
    splits, data_hash = load_dataset(data)
    _check_hash(cfg.config_hash(), data_hash, "dataset")
    enc, enc_hash = load_reference_encoders(enc_dir)
    _check_hash(cfg.config_hash(), enc_hash, "encoders")
    result = pipeline.train_run(cfg, mode, seed, splits, enc, out_dir=out)
    click.echo(f"best epoch {result.best_epoch}, "
               f"val loss {result.val_losses[result.best_epoch - 1]:.6f}; "
               f"checkpoints in {out}")


def _load_generation_inputs(cfg, data, enc_dir, checkpoint):
    splits, data_hash = load_dataset(_resolve(data))
    _check_hash(cfg.config_hash(), data_hash, "dataset")
    enc, enc_hash = load_reference_encoders(_resolve(enc_dir))
    _check_hash(cfg.config_hash(), enc_hash, "encoders")
    model = load_checkpoint(_resolve(checkpoint))
    table = pipeline.make_prototypes(cfg, enc)
    return splits, enc, model, table


def _write_image(image, base, want_png):
    write_ppm(image, base + ".ppm")
    if want_png:
        write_png(image, base + ".png")


@cli.command("generate")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", required=True)
@click.option("--encoders", "enc_dir", required=True)
@click.option("--checkpoint", required=True)
@click.option("--out", required=True)
@click.option("--tuple-index", type=int, default=0, help="test-split tuple to mix from")
@click.option("--lam", type=float, default=None)
@click.option("--png", is_flag=True, help="also write PNG")
def cmd_generate(config_path, data, enc_dir, checkpoint, out, tuple_index, lam, png):
    """Task 1: render one composite scene from a mixed signal."""
    cfg = _load(config_path, lam=lam)
    out = _resolve(out)
    splits, enc, model, table = _load_generation_inputs(cfg, data, enc_dir, checkpoint)
    if not 0 <= tuple_index < len(splits["test"]):
        raise ConfigurationError(f"tuple-index {tuple_index} outside test split")
    t = splits["test"][tuple_index]
    split = pipeline.split_for(model, enc, t.a_mix)
    image = generate_mixed(split, table, GenerationConfig(cfg.lam, cfg.tau, cfg.noise_seed))
    os.makedirs(out, exist_ok=True)
    base = os.path.join(out, f"mixed_{tuple_index:04d}")
    _write_image(image, base, png)
    write_truth_sidecar(base + ".truth.txt", image,
                        {"lambda": cfg.lam, "config_hash": cfg.config_hash(),
                         "source_fg": t.fg_class, "source_bg": t.bg_class})
    click.echo(f"wrote {base}.ppm")


@cli.command("separate")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", required=True)
@click.option("--encoders", "enc_dir", required=True)
@click.option("--checkpoint", required=True)
@click.option("--out", required=True)
@click.option("--tuple-index", type=int, default=0)
@click.option("--png", is_flag=True)
def cmd_separate(config_path, data, enc_dir, checkpoint, out, tuple_index, png):
    """Task 2: render one single-class scene per separated half."""
    cfg = _load(config_path)
    out = _resolve(out)
    splits, enc, model, table = _load_generation_inputs(cfg, data, enc_dir, checkpoint)
    if not 0 <= tuple_index < len(splits["test"]):
        raise ConfigurationError(f"tuple-index {tuple_index} outside test split")
    t = splits["test"][tuple_index]
    split = pipeline.split_for(model, enc, t.a_mix)
    img_fg, img_bg = generate_separated(
        split, table, GenerationConfig(cfg.lam, cfg.tau, cfg.noise_seed))
    os.makedirs(out, exist_ok=True)
    for tag, image, source in (("fg", img_fg, t.fg_class), ("bg", img_bg, t.bg_class)):
        base = os.path.join(out, f"separated_{tuple_index:04d}_{tag}")
        _write_image(image, base, png)
        write_truth_sidecar(base + ".truth.txt", image,
                            {"config_hash": cfg.config_hash(), "source_class": source})
    click.echo(f"wrote 2 images to {out}")


@cli.command("evaluate")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", required=True)
@click.option("--encoders", "enc_dir", required=True)
@click.option("--runs", "runs_dir", required=True,
              help="directory holding <mode>/seed_<s>/best.ckpt runs")
@click.option("--out", required=True)
def cmd_evaluate(config_path, data, enc_dir, runs_dir, out):
    """Score every trained (mode, seed) run and write results + table CSVs."""
    cfg = _load(config_path)
    data, enc_dir, runs_dir, out = (_resolve(p) for p in (data, enc_dir, runs_dir, out))
    splits, data_hash = load_dataset(data)
    _check_hash(cfg.config_hash(), data_hash, "dataset")
    enc, enc_hash = load_reference_encoders(enc_dir)
    _check_hash(cfg.config_hash(), enc_hash, "encoders")
    missing = [os.path.join(runs_dir, mode, f"seed_{s}", "best.ckpt")
               for mode in pipeline.MODES for s in cfg.seed_list()
               if not os.path.exists(os.path.join(runs_dir, mode, f"seed_{s}", "best.ckpt"))]
    if missing:
        raise ConfigurationError("missing trained runs:\n  " + "\n  ".join(missing))
    table = pipeline.make_prototypes(cfg, enc)
    report = pipeline.run_ablation(cfg, splits, enc, table, runs_dir=runs_dir)
    pipeline.write_tables(report, out)
    click.echo(f"wrote results.csv and table1/2/3.csv to {out}")


@cli.command("report")
@click.option("--results", "results_dir", required=True, help="evaluate output directory")
@click.option("--runs", "runs_dir", default=None, help="optional runs directory for loss curves")
@click.option("--out", required=True)
def cmd_report(results_dir, runs_dir, out):
    """Summarize results.csv as text plus static plots."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results_dir, out = _resolve(results_dir), _resolve(out)
    results_path = os.path.join(results_dir, "results.csv")
    if not os.path.exists(results_path):
        raise ConfigurationError(f"missing {results_path}; run evaluate first")
    with open(results_path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    os.makedirs(out, exist_ok=True)

    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(f"config_hash={read_config_hash(results_path)}\n")
        for row in rows:
            fh.write(f"{row['method']:>8} {row['mode']:<13} {row['metric']:<13} "
                     f"{float(row['mean']):.3f} +/- {float(row['std']):.3f} "
                     f"(n={row['n_seeds']})\n")

    crs_rows = [r for r in rows if r["metric"] == "mixed_crs"]
    if crs_rows:
        fig, ax = plt.subplots(figsize=(5, 3))
        labels = [r["mode"] for r in crs_rows]
        ax.bar(labels, [float(r["mean"]) for r in crs_rows],
               yerr=[float(r["std"]) for r in crs_rows], color="#4878a8")
        ax.set_ylabel("mixed-scene CRS")
        ax.set_ylim(0, 1.05)
        fig.tight_layout()
        fig.savefig(os.path.join(out, "crs_bars.png"), dpi=120)
        plt.close(fig)

    if runs_dir:
        runs_dir = _resolve(runs_dir)
        fig, ax = plt.subplots(figsize=(6, 4))
        for mode in sorted(os.listdir(runs_dir)):
            log = os.path.join(runs_dir, mode, "seed_0", "training_log.csv")
            if not os.path.exists(log):
                continue
            with open(log) as fh:
                content = [ln for ln in fh if not ln.startswith("#")]
            data = list(csv.DictReader(content))
            ax.plot([int(r["epoch"]) for r in data],
                    [float(r["val_loss"]) for r in data], label=f"{mode} val")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(out, "loss_curves.png"), dpi=120)
        plt.close(fig)
    click.echo(f"wrote summary to {out}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except (ConfigurationError, ContractViolationError, ShapeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FormatError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except MixsceneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
