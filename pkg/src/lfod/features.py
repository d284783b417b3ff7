"""Pooled multi-layer feature records: normalization, assembly, and file I/O.

A feature file stores raw (pre-normalization) pooled feature vectors for N
samples, laid out layer by layer. Normalization happens at load/assembly
time so the stored payload is always the encoder's raw output.

Binary format (little-endian):

    magic   4 bytes  b"LFOD"
    version u16      1
    M       u16      number of layers
    c_m     M x u32  per-layer channel counts
    flags   u32      bit0: records carry a label byte
    N       u64      record count
    records N x (u16 id_len, id utf-8 bytes, [u8 label], c x f32 raw values)

A JSON sidecar ``<file>.meta.json`` duplicates the layout and encoder tag
for human inspection; when present, it must agree with the binary header.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, StructuralError, ValidationError

MAGIC = b"LFOD"
FORMAT_VERSION = 1
DEFAULT_DELTA = 1e-5

_FLAG_HAS_LABELS = 0x1


class SetLabel(enum.Enum):
    ID = 0
    OOD = 1
    UNLABELED = 2


@dataclass(frozen=True)
class LayerLayout:
    """Shape metadata for the concatenated multi-layer feature vector."""

    layer_channel_counts: tuple[int, ...]
    encoder_tag: str = "unknown"

    def __post_init__(self):
        counts = tuple(int(c) for c in self.layer_channel_counts)
        object.__setattr__(self, "layer_channel_counts", counts)
        if len(counts) < 1:
            raise ValidationError("layout needs at least one layer")
        if any(c < 1 for c in counts):
            raise ValidationError(f"layer channel counts must be >= 1, got {counts}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_channel_counts)

    @property
    def total_dim(self) -> int:
        return sum(self.layer_channel_counts)

    def slices(self) -> list[slice]:
        """Per-layer slices into the concatenated vector, in layer order."""
        out, start = [], 0
        for c in self.layer_channel_counts:
            out.append(slice(start, start + c))
            start += c
        return out


@dataclass
class FeatureRecord:
    """One sample's raw pooled feature vectors, one per encoder layer."""

    raw_layers: list[np.ndarray]
    sample_id: str

    def __post_init__(self):
        self.raw_layers = [np.asarray(v, dtype=np.float32).reshape(-1) for v in self.raw_layers]

    def validate(self, layout: LayerLayout) -> None:
        if len(self.raw_layers) != layout.num_layers:
            raise StructuralError(
                f"record {self.sample_id!r} has {len(self.raw_layers)} layers, "
                f"layout expects {layout.num_layers}"
            )
        for m, (vec, c) in enumerate(zip(self.raw_layers, layout.layer_channel_counts)):
            if vec.shape != (c,):
                raise StructuralError(
                    f"record {self.sample_id!r} layer {m} has length {vec.shape[0]}, "
                    f"layout expects {c}"
                )
        for m, vec in enumerate(self.raw_layers):
            if not np.all(np.isfinite(vec)):
                raise ValidationError(
                    f"non-finite value in layer {m}", sample_id=self.sample_id
                )


@dataclass
class FeatureSet:
    """An ordered collection of records sharing one layout and one label."""

    layout: LayerLayout
    records: list[FeatureRecord] = field(default_factory=list)
    label: SetLabel = SetLabel.UNLABELED

    def validate(self) -> None:
        for rec in self.records:
            rec.validate(self.layout)

    def __len__(self) -> int:
        return len(self.records)


def zscore_normalize(raw_layer: np.ndarray, delta: float = DEFAULT_DELTA,
                     sample_id: str | None = None) -> np.ndarray:
    """Standardize one layer vector to mean 0, variance ~1 over its channels.

    Uses the population variance (divide by the channel count) plus the
    stabilizer ``delta`` under the square root, so constant vectors map to
    zeros instead of dividing by zero.
    """
    if delta <= 0:
        raise ValidationError(f"delta must be positive, got {delta}")
    x = np.asarray(raw_layer, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValidationError("empty layer vector", sample_id=sample_id)
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite value in layer vector", sample_id=sample_id)
    mu = x.mean()
    var = np.mean((x - mu) ** 2)
    return (x - mu) / np.sqrt(var + delta)


def assemble_z0(record: FeatureRecord, layout: LayerLayout,
                delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Normalize each layer of ``record`` and concatenate them in layer order."""
    record.validate(layout)
    parts = [
        zscore_normalize(vec, delta, sample_id=record.sample_id)
        for vec in record.raw_layers
    ]
    return np.concatenate(parts)


def slice_layers(z: np.ndarray, layout: LayerLayout) -> list[np.ndarray]:
    """Split a concatenated vector back into its per-layer views."""
    z = np.asarray(z).reshape(-1)
    if z.shape[0] != layout.total_dim:
        raise StructuralError(
            f"vector length {z.shape[0]} does not match layout total_dim {layout.total_dim}"
        )
    return [z[s] for s in layout.slices()]


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def write_feature_file(fset: FeatureSet, path: str | Path) -> None:
    """Serialize a FeatureSet and its JSON sidecar; raw floats stored as f32."""
    path = Path(path)
    fset.validate()
    layout = fset.layout
    labeled = fset.label is not SetLabel.UNLABELED
    flags = _FLAG_HAS_LABELS if labeled else 0

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HH", FORMAT_VERSION, layout.num_layers))
        f.write(struct.pack(f"<{layout.num_layers}I", *layout.layer_channel_counts))
        f.write(struct.pack("<IQ", flags, len(fset.records)))
        for rec in fset.records:
            id_bytes = rec.sample_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise ValidationError("sample_id too long", sample_id=rec.sample_id)
            f.write(struct.pack("<H", len(id_bytes)))
            f.write(id_bytes)
            if labeled:
                f.write(struct.pack("<B", fset.label.value))
            payload = np.concatenate(rec.raw_layers).astype("<f4", copy=False)
            f.write(payload.tobytes())

    meta = {
        "format_version": FORMAT_VERSION,
        "num_layers": layout.num_layers,
        "layer_channel_counts": list(layout.layer_channel_counts),
        "total_dim": layout.total_dim,
        "encoder_tag": layout.encoder_tag,
        "label": fset.label.name,
        "num_records": len(fset.records),
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_exact(f, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}", offset=offset)
    return buf


def read_feature_file(path: str | Path) -> FeatureSet:
    """Parse a feature file, validating header, sidecar, and payload shape."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        version, num_layers = struct.unpack("<HH", _read_exact(f, 4, "version/M"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        if num_layers < 1:
            raise FormatError("layer count must be >= 1", offset=6)
        counts = struct.unpack(
            f"<{num_layers}I", _read_exact(f, 4 * num_layers, "layer counts")
        )
        if any(c < 1 for c in counts):
            raise FormatError(f"invalid layer channel counts {counts}", offset=8)
        flags, n_records = struct.unpack("<IQ", _read_exact(f, 12, "flags/N"))
        labeled = bool(flags & _FLAG_HAS_LABELS)
        total_dim = sum(counts)

        records: list[FeatureRecord] = []
        seen_labels: set[int] = set()
        for _ in range(n_records):
            (id_len,) = struct.unpack("<H", _read_exact(f, 2, "id length"))
            sample_id = _read_exact(f, id_len, "sample id").decode("utf-8")
            if labeled:
                (raw_label,) = struct.unpack("<B", _read_exact(f, 1, "label"))
                if raw_label not in (SetLabel.ID.value, SetLabel.OOD.value):
                    raise FormatError(
                        f"unknown label byte {raw_label} for record {sample_id!r}",
                        offset=f.tell() - 1,
                    )
                seen_labels.add(raw_label)
            payload = np.frombuffer(
                _read_exact(f, 4 * total_dim, f"payload of {sample_id!r}"), dtype="<f4"
            )
            layers, start = [], 0
            for c in counts:
                layers.append(payload[start:start + c].copy())
                start += c
            records.append(FeatureRecord(raw_layers=layers, sample_id=sample_id))

        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after final record", offset=f.tell() - 1)

    if labeled and len(seen_labels) > 1:
        raise FormatError(f"mixed label bytes {sorted(seen_labels)} in one file")
    if labeled and seen_labels:
        label = SetLabel(seen_labels.pop())
    elif labeled:
        label = SetLabel.ID  # labeled flag on an empty file; nothing to contradict
    else:
        label = SetLabel.UNLABELED

    encoder_tag = "unknown"
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        with open(sidecar, encoding="utf-8") as f:
            meta = json.load(f)
        if meta.get("layer_channel_counts") is not None and \
                tuple(meta["layer_channel_counts"]) != tuple(counts):
            raise FormatError(
                f"sidecar layer counts {meta['layer_channel_counts']} disagree "
                f"with binary header {list(counts)}"
            )
        if meta.get("total_dim") is not None and int(meta["total_dim"]) != total_dim:
            raise FormatError(
                f"sidecar total_dim {meta['total_dim']} != sum of layer counts {total_dim}"
            )
        encoder_tag = str(meta.get("encoder_tag", encoder_tag))

    layout = LayerLayout(layer_channel_counts=tuple(counts), encoder_tag=encoder_tag)
    fset = FeatureSet(layout=layout, records=records, label=label)
    fset.validate()
    return fset
