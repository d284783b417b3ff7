"""Dataset traversal and feature-file emission.

The output is the lfod binary feature format plus its JSON sidecar; after
the primary-side writer runs, the sidecar gains an ``extraction`` section
recording the encoder, the exact stage taps, and the preprocessing
constants, so downstream results stay attributable to this configuration.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from lfod import FeatureRecord, FeatureSet, LayerLayout, SetLabel, write_feature_file

from .encoders import (
    ENCODERS,
    IMAGENET_MEAN,
    IMAGENET_STD,
    EncoderSpec,
    TappedEncoder,
)

log = logging.getLogger("lfod_extractor")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


class ExtractionError(Exception):
    """Unrecoverable extraction failure (bad config, no usable inputs)."""


@dataclass
class ExtractorConfig:
    encoder: str
    dataset: str
    out_path: Path
    stages: tuple[int, ...] = ()  # empty means the encoder's default
    batch_size: int = 32
    device: str = "cpu"
    label: SetLabel = SetLabel.UNLABELED
    pretrained: bool = True
    data_root: Path = field(default_factory=lambda: Path.home() / ".cache" / "lfod-extractor")

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ExtractionError(
                f"unknown encoder {self.encoder!r}, choose from {sorted(ENCODERS)}")
        if not self.stages:
            self.stages = ENCODERS[self.encoder].default_stages
        if self.batch_size < 1:
            raise ExtractionError(f"batch_size must be >= 1, got {self.batch_size}")
        self.out_path = Path(self.out_path)
        self.data_root = Path(self.data_root)

    @property
    def spec(self) -> EncoderSpec:
        return ENCODERS[self.encoder]


@dataclass
class ExtractionReport:
    out_path: Path
    num_records: int
    num_skipped: int
    layer_channel_counts: tuple[int, ...]

    @property
    def total_dim(self) -> int:
        return sum(self.layer_channel_counts)


def _iter_directory(root: Path):
    files = sorted(p for p in root.rglob("*")
                   if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ExtractionError(f"no image files under {root}")
    for p in files:
        try:
            with Image.open(p) as img:
                yield str(p.relative_to(root)), img.convert("RGB")
        except Exception as exc:  # PIL raises a zoo of decode errors
            log.warning("skipping unreadable image %s: %s", p, exc)
            yield str(p.relative_to(root)), None


def _iter_named_dataset(name: str, split: str, root: Path):
    from torchvision import datasets

    download = False  # offline by default; pre-seed root to use named datasets
    if name == "cifar10":
        splits = ["train", "test"] if split == "all" else [split]
        ds_list = [datasets.CIFAR10(root, train=(s == "train"), download=download)
                   for s in splits]
    elif name == "cifar100":
        splits = ["train", "test"] if split == "all" else [split]
        ds_list = [datasets.CIFAR100(root, train=(s == "train"), download=download)
                   for s in splits]
    elif name == "svhn":
        splits = ["train", "test"] if split == "all" else [split]
        ds_list = [datasets.SVHN(root, split=s, download=download) for s in splits]
    else:
        raise ExtractionError(f"unknown dataset name {name!r}")
    for split_name, ds in zip(splits, ds_list):
        for i in range(len(ds)):
            img, _ = ds[i]
            yield f"{name}:{split_name}:{i:06d}", img.convert("RGB")


def _iter_dataset(cfg: ExtractorConfig):
    """Yield (sample_id, PIL image or None) pairs in a stable order."""
    path = Path(cfg.dataset)
    if path.is_dir():
        yield from _iter_directory(path)
        return
    name, _, split = cfg.dataset.partition(":")
    try:
        yield from _iter_named_dataset(name.lower(), split or "test", cfg.data_root)
    except RuntimeError as exc:  # torchvision signals missing data this way
        raise ExtractionError(
            f"dataset {cfg.dataset!r} not found under {cfg.data_root}: {exc}"
        ) from exc


def run_extraction(cfg: ExtractorConfig) -> ExtractionReport:
    """Extract pooled multi-stage features for every image in the dataset.

    Images are processed in batches but written strictly in dataset order.
    Unreadable images are skipped and counted; if nothing survives, the
    whole extraction fails.
    """
    spec = cfg.spec
    device = torch.device(cfg.device)
    encoder = TappedEncoder(spec, cfg.stages, pretrained=cfg.pretrained).to(device)
    taps = encoder.taps
    counts = tuple(t.channels for t in taps)
    preprocess = spec.preprocess()

    records: list[FeatureRecord] = []
    skipped = 0
    batch_ids: list[str] = []
    batch_tensors: list[torch.Tensor] = []

    def flush():
        if not batch_ids:
            return
        stacked = torch.stack(batch_tensors).to(device)
        pooled = encoder(stacked)  # list of (B, c_m)
        arrays = [p.cpu().numpy().astype(np.float32) for p in pooled]
        for j, sid in enumerate(batch_ids):
            records.append(FeatureRecord(
                raw_layers=[a[j] for a in arrays], sample_id=sid))
        batch_ids.clear()
        batch_tensors.clear()

    for sample_id, img in _iter_dataset(cfg):
        if img is None:
            skipped += 1
            continue
        batch_ids.append(sample_id)
        batch_tensors.append(preprocess(img))
        if len(batch_ids) == cfg.batch_size:
            flush()
    flush()

    if not records:
        raise ExtractionError(
            f"no usable images in {cfg.dataset!r} ({skipped} skipped)")

    layout = LayerLayout(layer_channel_counts=counts, encoder_tag=spec.name)
    fset = FeatureSet(layout=layout, records=records, label=cfg.label)
    cfg.out_path.parent.mkdir(parents=True, exist_ok=True)
    write_feature_file(fset, cfg.out_path)
    _annotate_sidecar(cfg, taps)
    return ExtractionReport(out_path=cfg.out_path, num_records=len(records),
                            num_skipped=skipped, layer_channel_counts=counts)


def _annotate_sidecar(cfg: ExtractorConfig, taps) -> None:
    # the primary writer owns the sidecar; extend it without touching
    # the keys read_feature_file validates
    spec = cfg.spec
    sidecar = cfg.out_path.with_name(cfg.out_path.name + ".meta.json")
    with open(sidecar, encoding="utf-8") as f:
        meta = json.load(f)
    meta["extraction"] = {
        "encoder": spec.name,
        "weights": "imagenet" if cfg.pretrained else "random-init",
        "dataset": str(cfg.dataset),
        "stages": [
            {"stage": t.stage, "module": t.module,
             "channels": t.channels, "downsampling": t.scale}
            for t in taps
        ],
        "preprocess": {
            "resize": spec.resize,
            "center_crop": spec.crop,
            "interpolation": spec.interpolation.value,
            "normalize_mean": list(IMAGENET_MEAN),
            "normalize_std": list(IMAGENET_STD),
        },
    }
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
