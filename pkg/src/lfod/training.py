"""Training loop: sample noise levels, noise the batch, descend the
reconstruction loss with AdamW, checkpoint after the first and last epochs.

The regret score compares the epoch-1 model against the final one, so
``train`` always materializes both checkpoints even for a 1-epoch run
(then they coincide).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import (
    FINAL_CKPT_NAME,
    INITIAL_CKPT_NAME,
    Checkpoint,
    save_checkpoint,
)
from .diffusion import (
    DEFAULT_BETA_MAX,
    DEFAULT_BETA_MIN,
    NoiseSchedule,
    build_schedule,
)
from .errors import ConfigError, StructuralError, TrainingDivergedError, ValidationError
from .features import FeatureSet, SetLabel, assemble_z0
from .network import LfdnConfig, LfdnParams, init_params, lfdn_backward
from .optim import AdamWState, adamw_update

log = logging.getLogger("lfod.training")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 128
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    T: int = 100
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX
    shared_batch_t: bool = False  # one t for the whole batch instead of per sample

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.T < 1:
            raise ConfigError("epochs, batch_size and T must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")


def training_step(params: LfdnParams, opt_state: AdamWState, batch_z0: np.ndarray,
                  schedule: NoiseSchedule, rng: np.random.Generator, *,
                  learning_rate: float = 1e-4, weight_decay: float = 1e-4,
                  shared_batch_t: bool = False) -> float:
    """Noise one batch, take one AdamW step, return the pre-update loss."""
    z0 = np.asarray(batch_z0, dtype=np.float64)
    if z0.ndim != 2 or z0.shape[0] == 0:
        raise StructuralError(f"batch must be (B, c) with B >= 1, got {z0.shape}")
    B = z0.shape[0]
    if shared_batch_t:
        t = np.full(B, int(rng.integers(1, schedule.T + 1)), dtype=np.int64)
    else:
        t = rng.integers(1, schedule.T + 1, size=B).astype(np.int64)
    eps = rng.standard_normal(size=z0.shape)
    abar = schedule.alpha_bars[t][:, None]
    zt = np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps

    loss, grads = lfdn_backward(params, zt, t, z0)
    if not np.isfinite(loss):
        raise TrainingDivergedError("non-finite loss", loss=loss)
    adamw_update(params, grads, opt_state, learning_rate, weight_decay)
    return loss


def train(dataset: FeatureSet, cfg: TrainConfig,
          lfdn_config: LfdnConfig | None = None,
          out_dir: str | Path | None = None):
    """Run the full loop; returns (ckpt_initial, ckpt_final, loss_history).

    ``loss_history`` holds one sample-weighted mean loss per epoch. When
    ``out_dir`` is given the two checkpoints are also written there under
    their conventional names.
    """
    if len(dataset.records) == 0:
        raise StructuralError("cannot train on an empty feature set")
    if dataset.label is SetLabel.OOD:
        raise ValidationError("training set is labeled OOD; training must only see ID data")
    layout = dataset.layout
    if lfdn_config is None:
        lfdn_config = LfdnConfig(input_dim=layout.total_dim)
    elif lfdn_config.input_dim != layout.total_dim:
        raise ConfigError(
            f"network input_dim {lfdn_config.input_dim} != feature total_dim "
            f"{layout.total_dim}"
        )

    schedule = build_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    X = np.stack([assemble_z0(rec, layout) for rec in dataset.records])
    n = X.shape[0]

    rng = np.random.default_rng(cfg.seed)
    params = init_params(lfdn_config, seed=cfg.seed)
    opt_state = AdamWState.init(params)

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(params=params.copy(), schedule=schedule, epoch=epoch,
                          train_seed=cfg.seed, layout=layout)

    ckpt_initial: Checkpoint | None = None
    loss_history: list[float] = []
    t0 = time.monotonic()
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        total, step = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            step += 1
            try:
                loss = training_step(
                    params, opt_state, X[idx], schedule, rng,
                    learning_rate=cfg.learning_rate,
                    weight_decay=cfg.weight_decay,
                    shared_batch_t=cfg.shared_batch_t,
                )
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    "training diverged", epoch=epoch, step=step, loss=exc.loss
                ) from exc
            total += loss * len(idx)
        loss_history.append(total / n)
        if epoch == 1:
            ckpt_initial = snapshot(1)
        log.debug("epoch %d/%d loss %.6g", epoch, cfg.epochs, loss_history[-1])

    ckpt_final = snapshot(cfg.epochs)
    log.info(
        "trained %d epochs on %d samples (c=%d) in %.1fs, loss %.6g -> %.6g",
        cfg.epochs, n, layout.total_dim, time.monotonic() - t0,
        loss_history[0], loss_history[-1],
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt_initial, out_dir / INITIAL_CKPT_NAME)
        save_checkpoint(ckpt_final, out_dir / FINAL_CKPT_NAME)

    return ckpt_initial, ckpt_final, loss_history
