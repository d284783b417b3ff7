"""Operator surface: train, score, eval, synth and inspect subcommands.

Exit codes are fixed so harnesses can assert failure modes: 0 success,
2 configuration error, 3 data or format error, 4 numeric divergence,
5 checkpoint or layout mismatch. All randomness flows from --seed
(absent means 0, never wall-clock). LFOD_LOG sets the log level.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import os
import sys
import time
from pathlib import Path

import click

from .checkpoint import (
    FINAL_CKPT_NAME,
    INITIAL_CKPT_NAME,
    CKPT_MAGIC,
    file_sha256,
    load_checkpoint,
)
from .config import VALID_HEADS, load_run_config
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    FormatError,
    LfodError,
    StructuralError,
    TrainingDivergedError,
    ValidationError,
)
from .features import MAGIC as FEATURE_MAGIC
from .features import read_feature_file, write_feature_file
from .metrics import synth_benchmark
from .report import eval_report, write_eval_report
from .scoring import read_score_csv, score_records, scored_set, write_score_csv
from .training import train

log = logging.getLogger("lfod.cli")

LOSS_HISTORY_NAME = "loss_history.csv"

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_MISMATCH = 5


def _exit_code(exc: LfodError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(exc, CheckpointMismatchError):
        return EXIT_MISMATCH
    if isinstance(exc, (ValidationError, StructuralError, FormatError)):
        return EXIT_DATA
    return EXIT_DATA


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Translate library errors into the fixed exit-code taxonomy."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except LfodError as exc:
            _fail(str(exc), _exit_code(exc))
        except FileNotFoundError as exc:
            name = exc.filename if exc.filename else exc
            _fail(f"file not found: {name}", EXIT_DATA)

    return wrapper


def _merged_config(config_path, **flags):
    return load_run_config(config_path).override(**flags)


_common = [
    click.option("--config", "config_path", type=click.Path(), default=None,
                 metavar="TOML", help="Run configuration file."),
    click.option("--seed", type=int, default=None,
                 help="Root seed for every random draw (default 0)."),
    click.option("--threads", type=int, default=None,
                 help="Worker threads; results are identical for any value."),
]


def _options(*opts):
    def apply(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn

    return apply


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main() -> None:
    """Feature-space diffusion reconstruction for OOD detection."""
    level_name = os.environ.get("LFOD_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("train")
@_options(*_common)
@click.option("--features", type=click.Path(), default=None,
              help="Feature file holding the ID training set.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Directory for checkpoints and loss history (default '.').")
@_guard
def cmd_train(config_path, features, out_dir, seed, threads) -> None:
    """Train the denoiser; writes both checkpoints and a loss CSV."""
    cfg = _merged_config(config_path, features=features, out=out_dir,
                         seed=seed, threads=threads)
    if cfg.features is None:
        raise ConfigError("a feature file is required (--features or [paths].features)")
    fset = read_feature_file(cfg.features)
    out = Path(cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)

    started = time.time()
    ckpt_initial, ckpt_final, losses = train(
        fset, cfg.train_config(), cfg.lfdn_config(fset.layout.total_dim),
        out_dir=out,
    )
    elapsed = time.time() - started

    loss_path = out / LOSS_HISTORY_NAME
    with open(loss_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(losses, start=1):
            w.writerow([epoch, f"{loss:.9g}"])

    click.echo(f"{INITIAL_CKPT_NAME} {ckpt_initial.content_hash()}")
    click.echo(f"{FINAL_CKPT_NAME} {ckpt_final.content_hash()}")
    click.echo(f"trained {cfg.epochs} epochs on {len(fset)} records "
               f"in {elapsed:.1f}s; loss history in {loss_path}")


@main.command("score")
@_options(*_common)
@click.option("--features", type=click.Path(), default=None,
              help="Feature file to score.")
@click.option("--ckpt", type=click.Path(), default=None,
              help="Final (trained) checkpoint.")
@click.option("--ckpt-initial", type=click.Path(), default=None,
              help="Epoch-1 checkpoint; required by the lr head.")
@click.option("--out", type=click.Path(), default=None,
              help="Score CSV path (default scores.csv).")
@click.option("--head", type=click.Choice(VALID_HEADS), default=None,
              help="Score head to compute (default all).")
@click.option("--t", "t_start", type=int, default=None,
              help="Noise level the reconstruction starts from.")
@click.option("--eta", type=float, default=None,
              help="DDIM stochasticity (default 0, deterministic).")
@click.option("--stride", type=str, default=None, metavar="random|fixed:<s>",
              help="Skip-step stride policy.")
@click.option("--repeats", type=int, default=None,
              help="Average each head over this many noise draws.")
@_guard
def cmd_score(config_path, features, ckpt, ckpt_initial, out, head,
              t_start, eta, stride, seed, threads, repeats) -> None:
    """Score records against a trained checkpoint; writes the score CSV."""
    cfg = _merged_config(config_path, features=features, ckpt=ckpt,
                         ckpt_initial=ckpt_initial, out=out, head=head,
                         t_start=t_start, eta=eta, stride=stride, seed=seed,
                         threads=threads, repeats=repeats)
    if cfg.features is None:
        raise ConfigError("a feature file is required (--features or [paths].features)")
    if cfg.ckpt is None:
        raise ConfigError("a trained checkpoint is required (--ckpt or [paths].ckpt)")

    fset = read_feature_file(cfg.features)
    ckpt_final = load_checkpoint(cfg.ckpt)
    initial = load_checkpoint(cfg.ckpt_initial) if cfg.ckpt_initial else None

    started = time.time()
    reports = score_records(
        fset, ckpt_final, cfg.heads(), ckpt_initial=initial,
        cfg=cfg.denoise_config(), run_seed=cfg.seed,
        threads=cfg.threads, repeats=cfg.repeats,
    )
    elapsed = time.time() - started

    out_path = Path(cfg.out or "scores.csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_score_csv(reports, out_path, fset.layout.num_layers)
    rate = len(reports) / elapsed if elapsed > 0 else float("inf")
    click.echo(f"scored {len(reports)} records ({rate:.0f} rec/s) -> {out_path}")


@main.command("eval")
@click.option("--scores", "scores_path", type=click.Path(), required=True,
              help="Score CSV produced by the score subcommand.")
@click.option("--head", type=click.Choice(("mse", "lr", "mfsim")), default=None,
              help="Head to evaluate; defaults to the only populated one.")
@click.option("--out", type=click.Path(), default=None,
              help="JSON report path; ROC and histogram figures render beside it.")
@click.option("--figures/--no-figures", default=True,
              help="Render figures next to the JSON report (default on).")
@_guard
def cmd_eval(scores_path, head, out, figures) -> None:
    """Compute AUROC/FPR95 over a labeled score CSV; emits a JSON report."""
    reports = read_score_csv(scores_path)
    if head is None:
        populated = [h for h in ("mse", "lr", "mfsim")
                     if any(getattr(r, h) is not None for r in reports)]
        if len(populated) != 1:
            raise ConfigError(
                f"{len(populated)} heads populated in {scores_path}; pick one "
                "with --head"
            )
        head = populated[0]

    sset = scored_set(reports, head)
    if out is not None:
        report = write_eval_report(out, sset, head, figures=figures)
    else:
        report = eval_report(sset, head)
    click.echo(json.dumps(report, indent=2, sort_keys=True))


@main.command("synth")
@click.option("--c", "c", type=int, default=32, help="Feature width.")
@click.option("--n-id", type=int, default=2048, help="ID training samples.")
@click.option("--n-ood", type=int, default=512,
              help="OOD samples (the ID test set matches this size).")
@click.option("--shift", type=float, default=6.0,
              help="OOD mean shift in per-dimension standard deviations.")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(), default=".",
              help="Directory for the three feature files.")
@_guard
def cmd_synth(c, n_id, n_ood, shift, seed, out_dir) -> None:
    """Generate the synthetic benchmark: ID train/test and OOD test files."""
    sets = synth_benchmark(c, n_id, n_ood, shift, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, fset in zip(("id_train", "id_test", "ood_test"), sets):
        path = out / f"{name}.lfod"
        write_feature_file(fset, path)
        click.echo(f"{path} {file_sha256(path)}")


def _inspect_checkpoint(path: Path) -> None:
    ckpt = load_checkpoint(path)
    cfg = ckpt.config
    click.echo(f"checkpoint {path}")
    click.echo(f"  file sha256    {file_sha256(path)}")
    click.echo(f"  payload sha256 {ckpt.content_hash()}")
    click.echo(f"  epoch          {ckpt.epoch}")
    click.echo(f"  train seed     {ckpt.train_seed}")
    click.echo(f"  network        input_dim={cfg.input_dim} "
               f"hidden_dim={cfg.hidden_dim} num_blocks={cfg.num_blocks} "
               f"time_embed_dim={cfg.time_embed_dim}")
    click.echo(f"  schedule       T={ckpt.schedule.T} "
               f"beta=[{ckpt.schedule.betas[0]:g}, {ckpt.schedule.betas[-1]:g}]")
    if ckpt.layout is not None:
        click.echo(f"  layout         {list(ckpt.layout.layer_channel_counts)} "
                   f"({ckpt.layout.encoder_tag})")
    click.echo("  tensors")
    for name, tensor in ckpt.params.tensors.items():
        click.echo(f"    {name:<28} {list(tensor.shape)}")


def _inspect_features(path: Path) -> None:
    fset = read_feature_file(path)
    click.echo(f"feature file {path}")
    click.echo(f"  file sha256  {file_sha256(path)}")
    click.echo(f"  encoder tag  {fset.layout.encoder_tag}")
    click.echo(f"  layers       {list(fset.layout.layer_channel_counts)} "
               f"(total_dim {fset.layout.total_dim})")
    click.echo(f"  records      {len(fset)}")
    click.echo(f"  set label    {fset.label.name}")


@main.command("inspect")
@click.argument("artifact", type=click.Path())
@_guard
def cmd_inspect(artifact) -> None:
    """Print manifest, layout and hashes for a checkpoint or feature file."""
    path = Path(artifact)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == CKPT_MAGIC:
        _inspect_checkpoint(path)
    elif magic == FEATURE_MAGIC:
        _inspect_features(path)
    else:
        raise FormatError(f"unrecognized artifact magic {magic!r} in {path}", offset=0)


if __name__ == "__main__":
    main()
