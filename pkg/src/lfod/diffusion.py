"""Noise schedule, forward noising, noise correction, and DDIM denoising.

The forward process follows

    z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps,   eps ~ N(0, I)

with abar_t the cumulative product of (1 - beta_i) and abar_0 defined as 1
so a jump to t' = 0 is well formed. The reverse update is the skip-step
form: predict z_0, infer the noise-correction vector, then

    z_t' = sqrt(abar_t') * z0_pred
         + sqrt(1 - abar_t' - sigma_t^2) * eps_tilde
         + sigma_t^k * fresh_noise

where sigma_t = eta * sqrt((1-abar_t')/(1-abar_t)) * sqrt(1 - abar_t/abar_t').
The default eta=0 keeps scoring deterministic; the noise exponent k is
configurable (default 2, matching the printed update).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StructuralError

DEFAULT_T = 100
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02
DEFAULT_T_START = 5


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray       # shape (T,), each in (0, 1)
    alpha_bars: np.ndarray  # shape (T+1,), alpha_bars[0] == 1

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        abars = np.asarray(self.alpha_bars, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if betas.shape != (self.T,):
            raise ConfigError(f"betas must have shape ({self.T},), got {betas.shape}")
        if abars.shape != (self.T + 1,):
            raise ConfigError(
                f"alpha_bars must have shape ({self.T + 1},), got {abars.shape}"
            )
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("betas must lie in (0, 1)")
        if abars[0] != 1.0:
            raise ConfigError(f"alpha_bars[0] must be 1, got {abars[0]}")
        if np.any(abars <= 0) or np.any(abars > 1):
            raise ConfigError("alpha_bars must lie in (0, 1]")
        if np.any(np.diff(abars) >= 0):
            raise ConfigError("alpha_bars must be strictly decreasing")

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": [float(b) for b in self.betas]}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        betas = np.asarray(d["betas"], dtype=np.float64)
        abars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(T=int(d["T"]), betas=betas, alpha_bars=abars)


def build_schedule(T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN,
                   beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    """Linear beta schedule; alpha_bars gains a leading 1 for t=0."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class StridePolicy:
    """Skip-step stride: drawn uniformly from {1..t} or pinned to a constant."""

    kind: str = "random"  # "random" | "fixed"
    s: int | None = None

    def __post_init__(self):
        if self.kind not in ("random", "fixed"):
            raise ConfigError(f"unknown stride policy {self.kind!r}")
        if self.kind == "fixed":
            if self.s is None or self.s < 1:
                raise ConfigError(f"fixed stride must be >= 1, got {self.s}")
        elif self.s is not None:
            raise ConfigError("random stride policy takes no fixed value")

    @classmethod
    def random_uniform(cls) -> "StridePolicy":
        return cls(kind="random")

    @classmethod
    def fixed(cls, s: int) -> "StridePolicy":
        return cls(kind="fixed", s=int(s))

    @classmethod
    def parse(cls, text: str) -> "StridePolicy":
        """Accepts 'random' or 'fixed:<s>' (CLI spelling)."""
        text = text.strip().lower()
        if text == "random":
            return cls.random_uniform()
        if text.startswith("fixed:"):
            try:
                return cls.fixed(int(text.split(":", 1)[1]))
            except ValueError:
                raise ConfigError(f"cannot parse stride value in {text!r}") from None
        raise ConfigError(f"stride must be 'random' or 'fixed:<s>', got {text!r}")

    def draw(self, t: int, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return int(self.s)
        return int(rng.integers(1, t + 1))

    def describe(self) -> str:
        return "random" if self.kind == "random" else f"fixed:{self.s}"


@dataclass(frozen=True)
class DenoiseConfig:
    t_start: int = DEFAULT_T_START
    stride_policy: StridePolicy = field(default_factory=StridePolicy.random_uniform)
    eta: float = 0.0
    rng_seed: int = 0
    noise_exponent: int = 2

    def __post_init__(self):
        if self.t_start < 1:
            raise ConfigError(f"t_start must be >= 1, got {self.t_start}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if self.stride_policy.kind == "fixed" and self.stride_policy.s > self.t_start:
            raise ConfigError(
                f"fixed stride {self.stride_policy.s} exceeds t_start {self.t_start}"
            )


def _check_t(t: int, schedule: NoiseSchedule, *, low: int) -> int:
    t = int(t)
    if not (low <= t <= schedule.T):
        raise StructuralError(f"t={t} outside [{low}, {schedule.T}]")
    return t


def ennoise(z0: np.ndarray, t: int, schedule: NoiseSchedule,
            rng: np.random.Generator):
    """Sample z_t from z_0; returns (z_t, eps) so tests can replay the draw.

    t=0 is a degenerate identity kept for tests; training and scoring
    always use t >= 1.
    """
    t = _check_t(t, schedule, low=0)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(rng.standard_normal(size=z0.shape), dtype=np.float64)
    abar = schedule.alpha_bars[t]
    zt = np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps
    return zt, eps


def noise_correction(zt: np.ndarray, zt_pred: np.ndarray, t: int,
                     schedule: NoiseSchedule) -> np.ndarray:
    """Invert the noising identity around a predicted clean vector."""
    t = _check_t(t, schedule, low=1)
    zt = np.asarray(zt, dtype=np.float64)
    zt_pred = np.asarray(zt_pred, dtype=np.float64)
    abar = schedule.alpha_bars[t]
    return (zt - np.sqrt(abar) * zt_pred) / np.sqrt(1.0 - abar)


def ddim_sigma(t: int, t_prime: int, eta: float, schedule: NoiseSchedule) -> float:
    abar_t = schedule.alpha_bars[t]
    abar_p = schedule.alpha_bars[t_prime]
    return float(
        eta
        * np.sqrt((1.0 - abar_p) / (1.0 - abar_t))
        * np.sqrt(1.0 - abar_t / abar_p)
    )


def ddim_step(zt: np.ndarray, zt_pred: np.ndarray, t: int, t_prime: int,
              eta: float, schedule: NoiseSchedule,
              rng: np.random.Generator | None = None, *,
              noise_exponent: int = 2) -> np.ndarray:
    """One skip-step update from level t to level t_prime < t.

    With eta=0 no randomness is consumed. The fresh-noise term is
    sigma^noise_exponent * eps.
    """
    t = _check_t(t, schedule, low=1)
    t_prime = int(t_prime)
    if not (0 <= t_prime < t):
        raise StructuralError(f"need 0 <= t'={t_prime} < t={t}")
    zt = np.asarray(zt, dtype=np.float64)
    zt_pred = np.asarray(zt_pred, dtype=np.float64)

    eps_tilde = noise_correction(zt, zt_pred, t, schedule)
    abar_p = schedule.alpha_bars[t_prime]
    sigma = ddim_sigma(t, t_prime, eta, schedule)
    radicand = 1.0 - abar_p - sigma * sigma
    if radicand < 0.0:
        if radicand < -1e-12:
            raise ConfigError(
                f"eta={eta} overshoots: 1 - abar_t' - sigma^2 = {radicand:.3e} < 0"
            )
        radicand = 0.0

    out = np.sqrt(abar_p) * zt_pred + np.sqrt(radicand) * eps_tilde
    if sigma > 0.0:
        if rng is None:
            raise ConfigError("eta > 0 requires an rng for the fresh-noise draw")
        out = out + (sigma ** noise_exponent) * rng.standard_normal(size=zt.shape)
    return out


def denoise(params, zt: np.ndarray, t: int, cfg: DenoiseConfig,
            schedule: NoiseSchedule,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Full reconstruction loop from noise level t down to 0.

    ``params`` is an LfdnParams instance, or any callable (z, t) -> z0_pred
    standing in for the network. The stride is drawn once per call; the
    result is a deterministic function of (params, zt, t, cfg, rng state).
    When ``rng`` is omitted, one is seeded from cfg.rng_seed.
    """
    t = _check_t(t, schedule, low=1)
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    if callable(params):
        predict = params
    else:
        from .network import lfdn_forward

        predict = lambda z, step: lfdn_forward(params, z, step)  # noqa: E731

    s = cfg.stride_policy.draw(t, rng)
    z = np.asarray(zt, dtype=np.float64)
    cur = t
    while cur > 0:
        z0_pred = predict(z, cur)
        t_prime = max(cur - s, 0)
        z = ddim_step(z, z0_pred, cur, t_prime, cfg.eta, schedule, rng,
                      noise_exponent=cfg.noise_exponent)
        cur = t_prime
    return z
