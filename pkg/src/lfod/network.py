"""Residual MLP denoiser: forward pass, hand-derived gradients, initialization.

Per-block computation, applied to a feature vector x of width ``input_dim``:

    a = groupnorm(x; gamma1, beta1)
    u = silu(a) @ W1 + b1
    tau = silu(e @ Wt1 + bt1) @ Wt2 + bt2      with e = time_embed(t)
    g = groupnorm(u + tau; gamma2, beta2)
    y = silu(g) @ W2 + b2
    x <- x + y

GroupNorm carries one scale and one shift per group. All math runs in
float64; checkpoint serialization owns the float32 storage convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StructuralError, TrainingDivergedError

GN_EPS = 1e-5


@dataclass(frozen=True)
class LfdnConfig:
    input_dim: int
    hidden_dim: int | None = None  # None -> 2 * input_dim
    num_blocks: int = 16
    groupnorm_groups: int = 1
    time_embed_dim: int = 128

    def __post_init__(self):
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", 2 * self.input_dim)
        for name in ("input_dim", "hidden_dim", "num_blocks", "groupnorm_groups",
                     "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim % self.groupnorm_groups != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by "
                f"groupnorm_groups {self.groupnorm_groups}"
            )
        if self.input_dim % self.groupnorm_groups != 0:
            raise ConfigError(
                f"input_dim {self.input_dim} not divisible by "
                f"groupnorm_groups {self.groupnorm_groups}"
            )
        if self.time_embed_dim % 2 != 0:
            raise ConfigError("time_embed_dim must be even")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_blocks": self.num_blocks,
            "groupnorm_groups": self.groupnorm_groups,
            "time_embed_dim": self.time_embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LfdnConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def _block_tensor_shapes(cfg: LfdnConfig) -> dict[str, tuple[int, ...]]:
    c, h, g, e = cfg.input_dim, cfg.hidden_dim, cfg.groupnorm_groups, cfg.time_embed_dim
    return {
        "gn1.gamma": (g,), "gn1.beta": (g,),
        "lin1.weight": (c, h), "lin1.bias": (h,),
        "time.w1": (e, e), "time.b1": (e,),
        "time.w2": (e, h), "time.b2": (h,),
        "gn2.gamma": (g,), "gn2.beta": (g,),
        "lin2.weight": (h, c), "lin2.bias": (c,),
    }


def tensor_shapes(cfg: LfdnConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map for every parameter tensor."""
    shapes: dict[str, tuple[int, ...]] = {}
    per_block = _block_tensor_shapes(cfg)
    for k in range(cfg.num_blocks):
        for name, shape in per_block.items():
            shapes[f"block{k:02d}.{name}"] = shape
    return shapes


@dataclass
class LfdnParams:
    """Full parameter set, addressable by tensor name."""

    config: LfdnConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> None:
        expected = tensor_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise StructuralError(f"tensor names mismatch: missing={missing}, extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise StructuralError(
                    f"tensor {name} has shape {self.tensors[name].shape}, expected {shape}"
                )
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise StructuralError(f"non-finite values in tensor {name}")

    def copy(self) -> "LfdnParams":
        return LfdnParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def zero_gradients(params: LfdnParams) -> dict[str, np.ndarray]:
    """Gradient buffer shaped like the parameter set, zero filled."""
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def init_params(config: LfdnConfig, seed: int = 0) -> LfdnParams:
    """Seeded initialization; each block's output linear starts at zero.

    Zeroing ``lin2`` makes every residual branch emit zero, so a fresh
    network is exactly the identity map. Remaining weights are uniform
    with a 1/sqrt(fan_in) bound; biases start at zero; groupnorm starts
    at gamma=1, beta=0.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}

    def uniform(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float64)

    for name, shape in tensor_shapes(config).items():
        kind = name.split(".", 1)[1]
        if kind == "gn1.gamma" or kind == "gn2.gamma":
            tensors[name] = np.ones(shape, dtype=np.float64)
        elif kind in ("gn1.beta", "gn2.beta", "lin1.bias", "time.b1", "time.b2",
                      "lin2.weight", "lin2.bias"):
            tensors[name] = np.zeros(shape, dtype=np.float64)
        elif kind in ("lin1.weight", "time.w1", "time.w2"):
            tensors[name] = uniform(shape, fan_in=shape[0])
        else:
            raise AssertionError(f"unhandled tensor {name}")
    return LfdnParams(config=config, tensors=tensors)


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal step embedding with interleaved sin/cos channels.

    Channel pair i uses angular frequency 10000**(-i / (dim/2)), so entry
    2i is sin(t * w_i) and entry 2i+1 is cos(t * w_i). Entries stay in
    [-1, 1] and nearby integer steps map to distinct vectors.
    """
    if dim < 2 or dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    scalar = t_arr.ndim == 0
    t_arr = np.atleast_1d(t_arr)
    if np.any(t_arr < 0):
        raise StructuralError("time step must be >= 0")
    half = dim // 2
    freqs = np.power(10000.0, -np.arange(half, dtype=np.float64) / half)
    angles = t_arr[:, None] * freqs[None, :]
    emb = np.empty((t_arr.shape[0], dim), dtype=np.float64)
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles)
    return emb[0] if scalar else emb


def _silu(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def _silu_grad(z: np.ndarray, sig: np.ndarray) -> np.ndarray:
    # d/dz [z * sigmoid(z)] = sigmoid(z) * (1 + z * (1 - sigmoid(z)))
    return sig * (1.0 + z * (1.0 - sig))


def _groupnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                       groups: int):
    b, d = x.shape
    xg = x.reshape(b, groups, d // groups)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)  # population variance
    inv_std = 1.0 / np.sqrt(var + GN_EPS)
    xhat = (xg - mu) * inv_std
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    return out.reshape(b, d), (xhat, inv_std)


def _groupnorm_backward(d_out: np.ndarray, cache, gamma: np.ndarray, groups: int):
    xhat, inv_std = cache
    b, d = d_out.shape
    dg = d_out.reshape(b, groups, d // groups)
    dgamma = np.sum(dg * xhat, axis=(0, 2))
    dbeta = np.sum(dg, axis=(0, 2))
    dxhat = dg * gamma[None, :, None]
    # dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)), per group
    m1 = dxhat.mean(axis=2, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=2, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx.reshape(b, d), dgamma, dbeta


def _as_batch(z: np.ndarray, t, cfg: LfdnConfig):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if zb.ndim != 2 or zb.shape[1] != cfg.input_dim:
        raise StructuralError(
            f"input shape {z.shape} incompatible with input_dim {cfg.input_dim}"
        )
    tb = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (zb.shape[0],))
    return zb, tb, single


def _time_conditioning(params: LfdnParams, tb: np.ndarray):
    """Per-block additive conditioning rows for the given steps.

    Pure in (params, tb): tau_k = silu(emb @ Wt1 + bt1) @ Wt2 + bt2 per
    block, plus the shared embedding. The forward pass only needs these
    rows, so callers with frozen parameters may precompute them per step.
    """
    P = params.tensors
    emb = time_embed(tb, params.config.time_embed_dim)
    taus = []
    for k in range(params.config.num_blocks):
        pre = f"block{k:02d}."
        p = emb @ P[pre + "time.w1"] + P[pre + "time.b1"]
        q, sig_p = _silu(p)
        tau = q @ P[pre + "time.w2"] + P[pre + "time.b2"]
        taus.append((p, sig_p, q, tau))
    return emb, taus


def _forward_internal(params: LfdnParams, zb: np.ndarray, tb: np.ndarray,
                      keep_cache: bool, conditioning=None):
    cfg = params.config
    P = params.tensors
    G = cfg.groupnorm_groups
    emb, taus = _time_conditioning(params, tb) if conditioning is None \
        else conditioning
    x = zb
    caches = []
    for k in range(cfg.num_blocks):
        pre = f"block{k:02d}."
        a, gn1_cache = _groupnorm_forward(x, P[pre + "gn1.gamma"], P[pre + "gn1.beta"], G)
        s, sig_a = _silu(a)
        u = s @ P[pre + "lin1.weight"] + P[pre + "lin1.bias"]
        p, sig_p, q, tau = taus[k]
        v = u + tau
        g, gn2_cache = _groupnorm_forward(v, P[pre + "gn2.gamma"], P[pre + "gn2.beta"], G)
        r, sig_g = _silu(g)
        y = r @ P[pre + "lin2.weight"] + P[pre + "lin2.bias"]
        if keep_cache:
            caches.append((x, a, sig_a, s, p, sig_p, q, g, sig_g, r, gn1_cache, gn2_cache))
        x = x + y
    return x, emb, caches


def lfdn_forward(params: LfdnParams, z: np.ndarray, t,
                 time_cache: dict | None = None) -> np.ndarray:
    """Predict clean features from noised features ``z`` at step ``t``.

    Accepts a single vector or a (batch, input_dim) array; ``t`` may be a
    scalar or one step per batch row. ``time_cache`` (an ordinary dict the
    caller owns) memoizes the time-conditioning rows per distinct scalar
    step; only pass one while the parameters are frozen, and discard it on
    any parameter update. Cached and uncached calls produce identical
    bytes.
    """
    zb, tb, single = _as_batch(z, t, params.config)
    conditioning = None
    if time_cache is not None and zb.shape[0] == 1:
        key = int(tb[0])
        conditioning = time_cache.get(key)
        if conditioning is None:
            conditioning = _time_conditioning(params, tb)
            time_cache[key] = conditioning
    out, _, _ = _forward_internal(params, zb, tb, keep_cache=False,
                                  conditioning=conditioning)
    return out[0] if single else out


def lfdn_backward(params: LfdnParams, z_batch: np.ndarray, t_batch,
                  z0_batch: np.ndarray):
    """Batch loss and analytic parameter gradients.

    Loss is the batch mean of the squared L2 distance between the target
    clean features and the network output. Returns ``(loss, grads)`` with
    one gradient array per parameter tensor.
    """
    cfg = params.config
    P = params.tensors
    G = cfg.groupnorm_groups
    zb, tb, _ = _as_batch(z_batch, t_batch, cfg)
    targets = np.asarray(z0_batch, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[None, :]
    if targets.shape != zb.shape:
        raise StructuralError(
            f"targets shape {targets.shape} does not match inputs {zb.shape}"
        )
    B = zb.shape[0]
    if B == 0:
        raise StructuralError("empty batch")

    out, emb, caches = _forward_internal(params, zb, tb, keep_cache=True)
    if not np.all(np.isfinite(out)):
        raise TrainingDivergedError("non-finite activations in forward pass")

    diff = out - targets
    loss = float(np.mean(np.sum(diff * diff, axis=1)))

    grads = {}
    delta = (2.0 / B) * diff  # d loss / d out
    for k in reversed(range(cfg.num_blocks)):
        pre = f"block{k:02d}."
        x, a, sig_a, s, p, sig_p, q, g, sig_g, r, gn1_cache, gn2_cache = caches[k]

        # y = r @ W2 + b2, added to the residual stream
        d_y = delta
        grads[pre + "lin2.weight"] = r.T @ d_y
        grads[pre + "lin2.bias"] = d_y.sum(axis=0)
        d_r = d_y @ P[pre + "lin2.weight"].T

        d_g = d_r * _silu_grad(g, sig_g)
        d_v, dgamma2, dbeta2 = _groupnorm_backward(d_g, gn2_cache, P[pre + "gn2.gamma"], G)
        grads[pre + "gn2.gamma"] = dgamma2
        grads[pre + "gn2.beta"] = dbeta2

        # v = u + tau: gradient splits into the feature path and the time path
        d_u = d_v
        grads[pre + "time.w2"] = q.T @ d_v
        grads[pre + "time.b2"] = d_v.sum(axis=0)
        d_q = d_v @ P[pre + "time.w2"].T
        d_p = d_q * _silu_grad(p, sig_p)
        grads[pre + "time.w1"] = emb.T @ d_p
        grads[pre + "time.b1"] = d_p.sum(axis=0)

        grads[pre + "lin1.weight"] = s.T @ d_u
        grads[pre + "lin1.bias"] = d_u.sum(axis=0)
        d_s = d_u @ P[pre + "lin1.weight"].T

        d_a = d_s * _silu_grad(a, sig_a)
        d_x, dgamma1, dbeta1 = _groupnorm_backward(d_a, gn1_cache, P[pre + "gn1.gamma"], G)
        grads[pre + "gn1.gamma"] = dgamma1
        grads[pre + "gn1.beta"] = dbeta1

        # residual connection: upstream delta passes through unchanged
        delta = d_x + delta

    return loss, grads
