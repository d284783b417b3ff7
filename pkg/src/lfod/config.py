"""Run configuration: one TOML file describing a whole train/score/eval run.

CLI flags override file values; everything has a default, so an empty file
(or none at all) is a valid configuration.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on older interpreters
    import tomli as tomllib

from .diffusion import (
    DEFAULT_BETA_MAX,
    DEFAULT_BETA_MIN,
    DEFAULT_T,
    DEFAULT_T_START,
    DenoiseConfig,
    StridePolicy,
)
from .errors import ConfigError
from .network import LfdnConfig
from .training import TrainConfig

VALID_HEADS = ("mse", "lr", "mfsim", "all")


@dataclass
class RunConfig:
    """Merged view of training, network, noise and scoring settings plus paths."""

    # training
    epochs: int = 150
    batch_size: int = 128
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    shared_batch_t: bool = False
    # schedule
    T: int = DEFAULT_T
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX
    # network (input_dim always comes from the feature file)
    hidden_dim: int | None = None
    num_blocks: int = 16
    groupnorm_groups: int = 1
    time_embed_dim: int = 128
    # reconstruction
    t_start: int = DEFAULT_T_START
    eta: float = 0.0
    stride: str = "random"
    noise_exponent: int = 2
    # run
    head: str = "all"
    seed: int = 0
    threads: int = 1
    repeats: int = 1
    # paths
    features: str | None = None
    ckpt: str | None = None
    ckpt_initial: str | None = None
    out: str | None = None

    def __post_init__(self):
        if self.head not in VALID_HEADS:
            raise ConfigError(
                f"head must be one of {', '.join(VALID_HEADS)}, got {self.head!r}"
            )
        if self.threads < 1 or self.repeats < 1:
            raise ConfigError("threads and repeats must be >= 1")
        if not 1 <= self.t_start <= self.T:
            raise ConfigError(
                f"t_start must lie in [1, T={self.T}], got {self.t_start}"
            )
        StridePolicy.parse(self.stride)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            seed=self.seed,
            T=self.T,
            beta_min=self.beta_min,
            beta_max=self.beta_max,
            shared_batch_t=self.shared_batch_t,
        )

    def lfdn_config(self, input_dim: int) -> LfdnConfig:
        return LfdnConfig(
            input_dim=input_dim,
            hidden_dim=self.hidden_dim,
            num_blocks=self.num_blocks,
            groupnorm_groups=self.groupnorm_groups,
            time_embed_dim=self.time_embed_dim,
        )

    def denoise_config(self) -> DenoiseConfig:
        return DenoiseConfig(
            t_start=self.t_start,
            stride_policy=StridePolicy.parse(self.stride),
            eta=self.eta,
            rng_seed=self.seed,
            noise_exponent=self.noise_exponent,
        )

    def heads(self) -> tuple[str, ...]:
        return ("mse", "lr", "mfsim") if self.head == "all" else (self.head,)

    def override(self, **kwargs) -> "RunConfig":
        """Copy with the given non-None fields replaced (CLI flag semantics)."""
        updates = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **updates) if updates else self


# TOML section -> RunConfig field prefix mapping; flat keys are allowed too.
_SECTIONS = ("train", "network", "denoise", "paths", "run")

_FIELD_SECTION = {
    "epochs": "train", "batch_size": "train", "learning_rate": "train",
    "weight_decay": "train", "shared_batch_t": "train", "T": "train",
    "beta_min": "train", "beta_max": "train",
    "hidden_dim": "network", "num_blocks": "network",
    "groupnorm_groups": "network", "time_embed_dim": "network",
    "t_start": "denoise", "eta": "denoise", "stride": "denoise",
    "noise_exponent": "denoise",
    "head": "run", "seed": "run", "threads": "run", "repeats": "run",
    "features": "paths", "ckpt": "paths", "ckpt_initial": "paths",
    "out": "paths",
}


def load_run_config(path: str | Path | None) -> RunConfig:
    """Parse a TOML run configuration; ``None`` yields all defaults.

    Keys live in sections ([train], [network], [denoise], [run], [paths])
    matching the field grouping above. Unknown keys are errors, not noise:
    a typo must not silently fall back to a default.
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc

    known = {f.name for f in fields(RunConfig)}
    flat: dict[str, object] = {}

    def take(key: str, value: object, where: str) -> None:
        if key not in known:
            raise ConfigError(f"unknown config key {where!r} in {path}")
        if key in flat:
            raise ConfigError(f"config key {key!r} given twice in {path}")
        flat[key] = value

    for key, value in data.items():
        if isinstance(value, dict):
            if key not in _SECTIONS:
                raise ConfigError(f"unknown config section [{key}] in {path}")
            for sub, subval in value.items():
                expected = _FIELD_SECTION.get(sub)
                if expected != key:
                    raise ConfigError(f"unknown config key {key + '.' + sub!r} in {path}")
                take(sub, subval, f"{key}.{sub}")
        else:
            take(key, value, key)

    try:
        return RunConfig(**flat)  # type: ignore[arg-type]
    except TypeError as exc:
        raise ConfigError(f"bad config value in {path}: {exc}") from exc
