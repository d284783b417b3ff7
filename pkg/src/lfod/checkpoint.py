"""Checkpoint container and its manifest+blob file format.

Layout: magic ``LFCK``, little-endian u32 manifest length, UTF-8 manifest
JSON, then every tensor as a little-endian float32 blob at the offset the
manifest declares. The manifest records the network config, the noise
schedule, the epoch, the training seed, the feature layout the model was
trained on, and a sha256 over the payload bytes.

Tensors are quantized to float32 values at Checkpoint construction, so a
saved-and-reloaded checkpoint is bit-identical to the one in memory even
though in-memory math runs in float64.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule
from .errors import CheckpointMismatchError, FormatError
from .features import LayerLayout
from .network import LfdnConfig, LfdnParams

CKPT_MAGIC = b"LFCK"
CKPT_FORMAT = "lfck-v1"

INITIAL_CKPT_NAME = "ckpt_epoch0001.lfdn"
FINAL_CKPT_NAME = "ckpt_final.lfdn"


def _quantize(t: np.ndarray) -> np.ndarray:
    return t.astype(np.float32).astype(np.float64)


@dataclass
class Checkpoint:
    params: LfdnParams
    schedule: NoiseSchedule
    epoch: int
    train_seed: int
    layout: LayerLayout | None = None

    def __post_init__(self):
        self.params = LfdnParams(
            config=self.params.config,
            tensors={k: _quantize(v) for k, v in self.params.tensors.items()},
        )
        self.params.validate()

    @property
    def config(self) -> LfdnConfig:
        return self.params.config

    def payload_bytes(self) -> bytes:
        return b"".join(
            self.params.tensors[name].astype("<f4").tobytes()
            for name in self.params.tensors
        )

    def content_hash(self) -> str:
        return hashlib.sha256(self.payload_bytes()).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    payload = ckpt.payload_bytes()
    tensors = []
    offset = 0
    for name, t in ckpt.params.tensors.items():
        nbytes = t.size * 4
        tensors.append(
            {"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes}
        )
        offset += nbytes
    manifest = {
        "format": CKPT_FORMAT,
        "dtype": "<f4",
        "tensors": tensors,
        "lfdn_config": ckpt.config.to_dict(),
        "schedule": ckpt.schedule.to_dict(),
        "epoch": ckpt.epoch,
        "train_seed": ckpt.train_seed,
        "layout": None if ckpt.layout is None else {
            "layer_channel_counts": list(ckpt.layout.layer_channel_counts),
            "encoder_tag": ckpt.layout.encoder_tag,
        },
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        raw_len = f.read(4)
        if len(raw_len) != 4:
            raise FormatError("truncated manifest length", offset=4)
        mlen = int.from_bytes(raw_len, "little")
        blob = f.read(mlen)
        if len(blob) != mlen:
            raise FormatError("truncated manifest", offset=8)
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}", offset=8) from None
        payload = f.read()

    if manifest.get("format") != CKPT_FORMAT:
        raise FormatError(f"unsupported checkpoint format {manifest.get('format')!r}")
    if manifest.get("dtype") != "<f4":
        raise FormatError(f"unsupported tensor dtype {manifest.get('dtype')!r}")

    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["payload_sha256"]:
        raise CheckpointMismatchError(
            f"payload hash {digest[:12]}... does not match manifest "
            f"{manifest['payload_sha256'][:12]}... (corrupt checkpoint)"
        )

    config = LfdnConfig.from_dict(manifest["lfdn_config"])
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise FormatError(f"tensor {entry['name']} overruns payload")
        flat = np.frombuffer(payload[start:start + nbytes], dtype="<f4")
        tensors[entry["name"]] = flat.astype(np.float64).reshape(entry["shape"])

    layout = None
    if manifest.get("layout"):
        layout = LayerLayout(
            layer_channel_counts=tuple(manifest["layout"]["layer_channel_counts"]),
            encoder_tag=manifest["layout"].get("encoder_tag", "unknown"),
        )

    params = LfdnParams(config=config, tensors=tensors)
    params.validate()
    return Checkpoint(
        params=params,
        schedule=NoiseSchedule.from_dict(manifest["schedule"]),
        epoch=int(manifest["epoch"]),
        train_seed=int(manifest["train_seed"]),
        layout=layout,
    )


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
