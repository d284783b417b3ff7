"""OOD scoring heads over reconstructed features, plus score CSV I/O.

Every head noises the assembled feature vector at level t, runs the
denoise loop, and compares reconstruction against original:

    mse    mean squared element difference (higher = more OOD)
    mfsim  minus the mean per-layer cosine similarity (higher = more OOD)
    lr     mse under the epoch-1 model minus mse under the final model
           (higher = more ID: training improves ID reconstruction most)

The regret head replays the identical noise and stride draws for both
checkpoints so the difference isolates model change. Per-record seeds are
derived from (run seed, record index, repeat index), which makes scoring
order- and thread-count-independent.
"""

from __future__ import annotations

import csv
import enum
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .diffusion import DenoiseConfig, denoise, ennoise
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    FormatError,
    StructuralError,
    ValidationError,
)
from .features import FeatureRecord, FeatureSet, LayerLayout, SetLabel, assemble_z0
from .network import lfdn_forward

ALL_HEADS = ("mse", "lr", "mfsim")


class ScorePolarity(enum.Enum):
    HIGHER_IS_OOD = "higher_is_ood"
    HIGHER_IS_ID = "higher_is_id"


HEAD_POLARITY = {
    "mse": ScorePolarity.HIGHER_IS_OOD,
    "mfsim": ScorePolarity.HIGHER_IS_OOD,
    "lr": ScorePolarity.HIGHER_IS_ID,
}


@dataclass
class ScoreReport:
    sample_id: str
    label: SetLabel = SetLabel.UNLABELED
    mse: float | None = None
    lr: float | None = None
    mfsim: float | None = None
    sims: tuple[float, ...] | None = None
    decision: SetLabel | None = None


def _record_layout(ckpt: Checkpoint, record: FeatureRecord) -> LayerLayout:
    implied = LayerLayout(tuple(v.shape[0] for v in record.raw_layers))
    layout = ckpt.layout if ckpt.layout is not None else implied
    if layout.layer_channel_counts != implied.layer_channel_counts:
        raise CheckpointMismatchError(
            f"record {record.sample_id!r} layers {implied.layer_channel_counts} "
            f"do not match checkpoint layout {layout.layer_channel_counts}"
        )
    if layout.total_dim != ckpt.config.input_dim:
        raise CheckpointMismatchError(
            f"feature width {layout.total_dim} does not match network input_dim "
            f"{ckpt.config.input_dim}"
        )
    return layout


def _reconstruct(ckpt: Checkpoint, record: FeatureRecord, t: int,
                 cfg: DenoiseConfig, seed,
                 time_cache: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    layout = _record_layout(ckpt, record)
    z0 = assemble_z0(record, layout)
    rng = np.random.default_rng(seed)
    zt, _ = ennoise(z0, t, ckpt.schedule, rng)
    model = lambda z, step: lfdn_forward(  # noqa: E731
        ckpt.params, z, step, time_cache=time_cache)
    recon = denoise(model, zt, t, cfg, ckpt.schedule, rng)
    return z0, recon


def _mse(z0: np.ndarray, recon: np.ndarray) -> float:
    diff = z0 - recon
    return float(np.mean(diff * diff))


def score_mse(ckpt: Checkpoint, record: FeatureRecord, t: int,
              cfg: DenoiseConfig, seed=None,
              time_cache: dict | None = None) -> float:
    """Mean squared reconstruction error over the c vector elements."""
    z0, recon = _reconstruct(ckpt, record, t, cfg,
                             cfg.rng_seed if seed is None else seed,
                             time_cache)
    return _mse(z0, recon)


def per_layer_cosine(z0: np.ndarray, z0_recon: np.ndarray,
                     layout: LayerLayout) -> np.ndarray:
    """Cosine similarity per layer slice; zero-norm slices score 0."""
    z0 = np.asarray(z0, dtype=np.float64).reshape(-1)
    z0_recon = np.asarray(z0_recon, dtype=np.float64).reshape(-1)
    if z0.shape[0] != layout.total_dim or z0_recon.shape[0] != layout.total_dim:
        raise StructuralError(
            f"vectors of length {z0.shape[0]}/{z0_recon.shape[0]} do not match "
            f"layout total_dim {layout.total_dim}"
        )
    sims = np.empty(layout.num_layers, dtype=np.float64)
    for m, sl in enumerate(layout.slices()):
        a, b = z0[sl], z0_recon[sl]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            warnings.warn(
                f"zero-norm slice in layer {m}; cosine similarity set to 0",
                stacklevel=2,
            )
            sims[m] = 0.0
        else:
            sims[m] = np.clip(float(a @ b) / (na * nb), -1.0, 1.0)
    return sims


def score_mfsim(ckpt: Checkpoint, record: FeatureRecord, t: int,
                cfg: DenoiseConfig, seed=None,
                time_cache: dict | None = None) -> float:
    """Minus the mean per-layer cosine; -1 means perfect alignment."""
    z0, recon = _reconstruct(ckpt, record, t, cfg,
                             cfg.rng_seed if seed is None else seed,
                             time_cache)
    layout = _record_layout(ckpt, record)
    sims = per_layer_cosine(z0, recon, layout)
    return float(-np.mean(sims))


def check_checkpoint_pair(ckpt_initial: Checkpoint, ckpt_final: Checkpoint) -> None:
    if ckpt_initial.config != ckpt_final.config:
        raise CheckpointMismatchError(
            "initial and final checkpoints disagree on network config"
        )
    if not np.array_equal(ckpt_initial.schedule.betas, ckpt_final.schedule.betas):
        raise CheckpointMismatchError(
            "initial and final checkpoints disagree on the noise schedule"
        )
    if ckpt_initial.layout is not None and ckpt_final.layout is not None \
            and ckpt_initial.layout != ckpt_final.layout:
        raise CheckpointMismatchError(
            "initial and final checkpoints disagree on the feature layout"
        )


def score_lr(ckpt_initial: Checkpoint, ckpt_final: Checkpoint,
             record: FeatureRecord, t: int, cfg: DenoiseConfig,
             seed=None, time_cache_initial: dict | None = None,
             time_cache_final: dict | None = None) -> float:
    """Reconstruction-regret head: mse(initial model) - mse(final model).

    Both evaluations replay the same seed, so noise and stride draws are
    shared and the score reflects only the parameter change.
    """
    check_checkpoint_pair(ckpt_initial, ckpt_final)
    seed = cfg.rng_seed if seed is None else seed
    return score_mse(ckpt_initial, record, t, cfg, seed, time_cache_initial) - \
        score_mse(ckpt_final, record, t, cfg, seed, time_cache_final)


def classify(score: float, lam: float,
             polarity: ScorePolarity = ScorePolarity.HIGHER_IS_OOD) -> SetLabel:
    """Threshold rule: scores at or below lambda are ID (boundary is ID)."""
    if polarity is ScorePolarity.HIGHER_IS_ID:
        score = -score
    return SetLabel.ID if score <= lam else SetLabel.OOD


def score_records(fset: FeatureSet, ckpt_final: Checkpoint,
                  heads=ALL_HEADS, *, ckpt_initial: Checkpoint | None = None,
                  t: int | None = None, cfg: DenoiseConfig | None = None,
                  run_seed: int = 0, threads: int = 1,
                  repeats: int = 1) -> list[ScoreReport]:
    """Score every record; result is independent of thread count.

    ``repeats`` averages each head over that many independent noise
    draws (default 1, a single draw per record).
    """
    heads = tuple(heads)
    for h in heads:
        if h not in ALL_HEADS:
            raise ConfigError(f"unknown score head {h!r}")
    if not heads:
        raise ConfigError("at least one score head required")
    if len(fset.records) == 0:
        raise StructuralError("cannot score an empty feature set")
    if repeats < 1 or threads < 1:
        raise ConfigError("repeats and threads must be >= 1")
    if cfg is None:
        cfg = DenoiseConfig()
    t = cfg.t_start if t is None else int(t)
    if "lr" in heads:
        if ckpt_initial is None:
            raise CheckpointMismatchError(
                "the lr head needs the epoch-1 checkpoint alongside the final one"
            )
        check_checkpoint_pair(ckpt_initial, ckpt_final)

    want_recon = "mse" in heads or "mfsim" in heads or "lr" in heads
    # parameters are frozen for the whole call, so the time-conditioning
    # rows are shared across records; a racy duplicate insert recomputes
    # the same pure values, so thread count still cannot change bytes
    cache_final: dict = {}
    cache_initial: dict = {}

    def one(idx: int) -> ScoreReport:
        rec = fset.records[idx]
        layout = _record_layout(ckpt_final, rec)
        mse_acc, lr_acc = 0.0, 0.0
        sims_acc = np.zeros(layout.num_layers)
        for rep in range(repeats):
            ss = np.random.SeedSequence(entropy=run_seed, spawn_key=(idx, rep))
            if want_recon:
                z0, recon = _reconstruct(ckpt_final, rec, t, cfg, ss,
                                         cache_final)
                mse_final = _mse(z0, recon)
                mse_acc += mse_final
                if "mfsim" in heads:
                    sims_acc += per_layer_cosine(z0, recon, layout)
                if "lr" in heads:
                    z0i, recon_i = _reconstruct(ckpt_initial, rec, t, cfg, ss,
                                                cache_initial)
                    lr_acc += _mse(z0i, recon_i) - mse_final
        report = ScoreReport(sample_id=rec.sample_id, label=fset.label)
        if "mse" in heads:
            report.mse = mse_acc / repeats
        if "lr" in heads:
            report.lr = lr_acc / repeats
        if "mfsim" in heads:
            sims = sims_acc / repeats
            report.sims = tuple(float(s) for s in sims)
            report.mfsim = float(-np.mean(sims))
        return report

    indices = range(len(fset.records))
    if threads == 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, indices))


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.9g}"


def write_score_csv(reports: list[ScoreReport], path: str | Path,
                    num_layers: int) -> None:
    """Emit the delimited score table; absent heads stay empty."""
    path = Path(path)
    header = ["sample_id", "label", "mse", "lr", "mfsim"] + [
        f"sim_{m}" for m in range(1, num_layers + 1)
    ]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in reports:
            sims = r.sims if r.sims is not None else (None,) * num_layers
            if len(sims) != num_layers:
                raise StructuralError(
                    f"record {r.sample_id!r} has {len(sims)} sims, expected {num_layers}"
                )
            label = "" if r.label is SetLabel.UNLABELED else r.label.name
            w.writerow([r.sample_id, label, _fmt(r.mse), _fmt(r.lr),
                        _fmt(r.mfsim)] + [_fmt(s) for s in sims])


def read_score_csv(path: str | Path) -> list[ScoreReport]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"empty score file {path}")
    header = rows[0]
    fixed = ["sample_id", "label", "mse", "lr", "mfsim"]
    if header[: len(fixed)] != fixed:
        raise FormatError(f"unexpected score header {header[:5]} in {path}")
    sim_cols = header[len(fixed):]
    if sim_cols != [f"sim_{m}" for m in range(1, len(sim_cols) + 1)]:
        raise FormatError(f"malformed sim columns {sim_cols} in {path}")

    out: list[ScoreReport] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"row {lineno} has {len(row)} fields, "
                              f"expected {len(header)} in {path}")
        def opt(s: str) -> float | None:
            return None if s == "" else float(s)
        try:
            label = SetLabel[row[1]] if row[1] else SetLabel.UNLABELED
            sims_raw = [opt(v) for v in row[len(fixed):]]
            out.append(ScoreReport(
                sample_id=row[0],
                label=label,
                mse=opt(row[2]),
                lr=opt(row[3]),
                mfsim=opt(row[4]),
                sims=None if all(s is None for s in sims_raw)
                else tuple(0.0 if s is None else s for s in sims_raw),
            ))
        except (ValueError, KeyError) as exc:
            raise FormatError(f"row {lineno}: {exc} in {path}") from None
    return out


def scored_set(reports: list[ScoreReport], head: str) -> "ScoredSet":
    """Collect one head across reports, flipped so higher always means OOD.

    Every report must carry the head's value and an ID/OOD label;
    unlabeled rows cannot enter a labeled evaluation.
    """
    from .metrics import ScoredSet

    if head not in ALL_HEADS:
        raise ConfigError(f"unknown score head {head!r}")
    values, is_ood = [], []
    for r in reports:
        v = getattr(r, head)
        if v is None:
            raise ValidationError(f"no {head} score", sample_id=r.sample_id)
        if r.label is SetLabel.UNLABELED:
            raise ValidationError("unlabeled record in a labeled evaluation",
                                  sample_id=r.sample_id)
        values.append(v)
        is_ood.append(r.label is SetLabel.OOD)
    scores = np.asarray(values, dtype=np.float64)
    if HEAD_POLARITY[head] is ScorePolarity.HIGHER_IS_ID:
        scores = -scores
    return ScoredSet(scores=scores, is_ood=np.asarray(is_ood, dtype=bool))
