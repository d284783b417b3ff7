"""Command-line entry point: one `extract` command."""
from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

import click

from lfod import SetLabel

from .encoders import ENCODERS
from .extract import ExtractionError, ExtractorConfig, run_extraction

EXIT_CONFIG = 2
EXIT_DATA = 3


def _parse_stages(_ctx, _param, value: str | None) -> tuple[int, ...]:
    if value is None:
        return ()
    try:
        return tuple(int(s) for s in value.split(",") if s.strip())
    except ValueError:
        raise click.BadParameter(f"stages must be comma-separated integers, got {value!r}")


@click.command(name="extract")
@click.option("--encoder", type=click.Choice(sorted(ENCODERS)), required=True)
@click.option("--dataset", required=True,
              help="Image directory, or a name like cifar10[:train|test|all].")
@click.option("--stages", callback=_parse_stages, default=None,
              help="Comma-separated stage indices; default is the encoder's canonical set.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path),
              required=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--label", type=click.Choice(["id", "ood", "unlabeled"]),
              default="unlabeled", show_default=True,
              help="Set label stamped on every record.")
@click.option("--data-root", type=click.Path(file_okay=False, path_type=Path),
              default=None, help="Root directory for named torchvision datasets.")
@click.option("--random-init", is_flag=True, hidden=True,
              help="Skip pretrained weights (dimension audits only).")
def main(encoder, dataset, stages, out_path, batch_size, device, label,
         data_root, random_init) -> None:
    """Extract per-stage pooled features and write one lfod feature file."""
    if os.environ.get("LFOD_LOG"):
        logging.basicConfig(level=os.environ["LFOD_LOG"].upper())
    kwargs = {}
    if data_root is not None:
        kwargs["data_root"] = data_root
    try:
        cfg = ExtractorConfig(
            encoder=encoder, dataset=dataset, out_path=out_path, stages=stages,
            batch_size=batch_size, device=device,
            label=SetLabel[label.upper()], pretrained=not random_init, **kwargs)
    except ExtractionError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        report = run_extraction(cfg)
    except ExtractionError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    click.echo(f"{report.out_path} records={report.num_records} "
               f"skipped={report.num_skipped} "
               f"layers={list(report.layer_channel_counts)} c={report.total_dim}")


if __name__ == "__main__":
    main()
