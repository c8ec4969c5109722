"""Hybrid forecaster: multi-scale causal convolutions feeding a dynamic gating
cell, pooled by time-aware attention, decoded per horizon.

The encoder is strictly causal end to end: each convolution branch left-pads,
the cell walks time forward, and attention at the final position only sees
earlier hidden states. Horizons are decoded either directly (one head pass
per horizon embedding) or recursively (chained one-step predictions fed back
as pseudo-observations).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import N_FEATURES, TARGET_COL, WindowSample

__all__ = [
    "ModelError",
    "MsTcnConfig",
    "AttentionConfig",
    "ModelConfig",
    "HybridForecaster",
    "init_params",
    "glorot",
    "ms_tcn_forward",
    "cell_step",
    "attention_weights",
    "forward_windows",
    "encode_states",
    "forecast",
    "forecast_batch",
]


class ModelError(ValueError):
    """Model configuration or invocation violated a contract."""


@dataclass(frozen=True)
class MsTcnConfig:
    kernel_widths: tuple[int, ...] = (1, 2, 3)
    branch_channels: int = 8
    activation: str = "tanh"
    projection_width: int = 16

    def __post_init__(self):
        widths = tuple(self.kernel_widths)
        if len(set(widths)) != len(widths) or any(w < 1 for w in widths):
            raise ModelError(f"kernel widths must be distinct and >= 1, got {widths}")
        if self.activation not in ad.ELEMENTWISE_KINDS:
            raise ModelError(f"unknown activation '{self.activation}'")


@dataclass(frozen=True)
class AttentionConfig:
    variant: str = "multiplicative"
    d_k: int = 16

    def __post_init__(self):
        if self.variant not in ("multiplicative", "additive"):
            raise ModelError(f"unknown attention variant '{self.variant}'")
        if self.d_k < 1:
            raise ModelError("d_k must be positive")


@dataclass(frozen=True)
class ModelConfig:
    n_features: int = N_FEATURES
    lookback: int = 28
    horizons: tuple[int, ...] = (1, 7, 14)
    mstcn: MsTcnConfig = field(default_factory=MsTcnConfig)
    hidden_width: int = 32
    phi: str = "tanh"
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    horizon_embed_width: int = 4
    head_width: int = 16
    decode: str = "direct"
    # (mean, std) of the scaled target feature; inverse-transforms predictions
    target_transform: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(sorted(set(int(h) for h in self.horizons))))
        if self.decode not in ("direct", "recursive"):
            raise ModelError(f"unknown decode strategy '{self.decode}'")
        if self.decode == "recursive" and 1 not in self.horizons:
            raise ModelError("recursive decoding chains one-step predictions; horizon 1 required")
        if self.phi not in ad.ELEMENTWISE_KINDS:
            raise ModelError(f"unknown phi '{self.phi}'")
        if min(self.lookback, self.hidden_width, self.horizon_embed_width, self.head_width) < 1:
            raise ModelError("lookback, hidden, embed, and head widths must be positive")

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "lookback": self.lookback,
            "horizons": list(self.horizons),
            "mstcn": {
                "kernel_widths": list(self.mstcn.kernel_widths),
                "branch_channels": self.mstcn.branch_channels,
                "activation": self.mstcn.activation,
                "projection_width": self.mstcn.projection_width,
            },
            "hidden_width": self.hidden_width,
            "phi": self.phi,
            "attention": {"variant": self.attention.variant, "d_k": self.attention.d_k},
            "horizon_embed_width": self.horizon_embed_width,
            "head_width": self.head_width,
            "decode": self.decode,
            "target_transform": list(self.target_transform),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            n_features=d["n_features"],
            lookback=d["lookback"],
            horizons=tuple(d["horizons"]),
            mstcn=MsTcnConfig(
                kernel_widths=tuple(d["mstcn"]["kernel_widths"]),
                branch_channels=d["mstcn"]["branch_channels"],
                activation=d["mstcn"]["activation"],
                projection_width=d["mstcn"]["projection_width"],
            ),
            hidden_width=d["hidden_width"],
            phi=d["phi"],
            attention=AttentionConfig(
                variant=d["attention"]["variant"], d_k=d["attention"]["d_k"]
            ),
            horizon_embed_width=d["horizon_embed_width"],
            head_width=d["head_width"],
            decode=d["decode"],
            target_transform=tuple(d["target_transform"]),
        )


class HybridForecaster:
    """Configured, immutable-by-convention parameter set for the forecaster."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    def to_units(self, scaled_preds: np.ndarray) -> np.ndarray:
        mu, sd = self.config.target_transform
        return np.maximum(0.0, np.expm1(mu + sd * scaled_preds))

    def param_constraints(self) -> dict[str, tuple[float | None, float | None]]:
        """Boxes that keep the time kernel positive under training updates."""
        if self.config.attention.variant == "multiplicative":
            return {"attn.tau": (0.5, None), "attn.beta_week": (0.0, None)}
        return {}

    def copy(self) -> "HybridForecaster":
        return HybridForecaster(self.config, {k: v.copy() for k, v in self.params.items()})


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    fan_out = shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init) list; the order fixes the init RNG stream."""
    F = config.n_features
    cb = config.mstcn.branch_channels
    C = config.mstcn.projection_width
    Dh = config.hidden_width
    dk = config.attention.d_k
    De = config.horizon_embed_width
    specs: list[tuple[str, tuple[int, ...], str]] = []
    for w in config.mstcn.kernel_widths:
        specs.append((f"conv.w{w}", (w, F, cb), "glorot"))
        specs.append((f"conv.b{w}", (cb,), "zeros"))
    total = cb * len(config.mstcn.kernel_widths)
    specs.append(("proj.w", (1, total, C), "glorot"))
    specs.append(("proj.b", (C,), "zeros"))
    for gate in ("g", "c", "o"):
        specs.append((f"cell.w{gate}", (C, Dh), "glorot"))
        specs.append((f"cell.u{gate}", (Dh, Dh), "glorot"))
        specs.append((f"cell.b{gate}", (1, Dh), "zeros"))
    specs.append(("attn.wq", (Dh, dk), "glorot"))
    specs.append(("attn.wk", (Dh, dk), "glorot"))
    specs.append(("attn.wv", (Dh, Dh), "glorot"))
    if config.attention.variant == "multiplicative":
        specs.append(("attn.tau", (1, 1), "const:7.0"))
        specs.append(("attn.beta_week", (1, 1), "const:0.5"))
    else:
        specs.append(("attn.gamma", (config.lookback, 1), "zeros"))
    specs.append(("attn.c0", (1, Dh), "glorot"))
    specs.append(("embed.e", (len(config.horizons), De), "glorot"))
    specs.append(("head.w1", (Dh + De, config.head_width), "glorot"))
    specs.append(("head.b1", (1, config.head_width), "zeros"))
    specs.append(("head.w2", (config.head_width, 1), "glorot"))
    specs.append(("head.b2", (1, 1), "zeros"))
    return specs


def init_params(config: ModelConfig, seed: int) -> HybridForecaster:
    """Glorot-uniform weights, zero biases, tau=7 / beta_week=0.5 kernel start."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x11211]))
    params: dict[str, np.ndarray] = {}
    for name, shape, kind in param_specs(config):
        if kind == "glorot":
            params[name] = glorot(rng, shape)
        elif kind == "zeros":
            params[name] = np.zeros(shape)
        elif kind.startswith("const:"):
            params[name] = np.full(shape, float(kind.split(":")[1]))
        else:
            raise ModelError(f"unknown init kind '{kind}'")
    return HybridForecaster(config, params)


def lift_params(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: tape.leaf(value) for name, value in params.items()}


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def ms_tcn_forward(x: Tensor, p: dict[str, Tensor], cfg: MsTcnConfig) -> Tensor:
    """Parallel causal conv branches, channel concat, activation, width-1 projection."""
    branches = [ad.conv1d_causal(x, p[f"conv.w{w}"], p[f"conv.b{w}"]) for w in cfg.kernel_widths]
    z = ad.concat(branches, axis=-1)
    z = ad.elementwise(z, cfg.activation)
    return ad.conv1d_causal(z, p["proj.w"], p["proj.b"])


def cell_step(x_t: Tensor, h_prev: Tensor, p: dict[str, Tensor], phi: str = "tanh"):
    """One dynamic-gating step; returns (h_t, c_t).

    The gate multiplies the candidate before the phi nonlinearity, and a
    sigmoid output gate (own weights) shapes the emitted hidden state.
    """
    g = ad.sigmoid(x_t @ p["cell.wg"] + h_prev @ p["cell.ug"] + p["cell.bg"])
    cand = ad.tanh(x_t @ p["cell.wc"] + h_prev @ p["cell.uc"] + p["cell.bc"])
    c = ad.elementwise(g * cand, phi)
    o = ad.sigmoid(x_t @ p["cell.wo"] + h_prev @ p["cell.uo"] + p["cell.bo"])
    return o * ad.tanh(c), c


def attention_weights(
    q: Tensor,
    keys: Tensor,
    variant: str,
    *,
    d_k: int,
    tau: Tensor | None = None,
    beta_week: Tensor | None = None,
    gamma: Tensor | None = None,
    gamma_size: int | None = None,
) -> Tensor:
    """Causal attention weights over keys ordered oldest first.

    Multiplicative: exp(score) * w(dt) normalized over the keys, with
    w(dt) = exp(-dt / tau) + beta_week * [dt % 7 == 0] and dt counted from 1
    at the most recent key. A non-finite tau means w == 1 exactly. Additive:
    softmax(score + gamma[dt]) with the learned bias table clamped at its
    last entry for dt beyond its size. Rejected when there are no keys.
    """
    single = q.data.ndim == 1
    if single:
        q = ad.reshape(q, (1,) + q.data.shape)
        keys = ad.reshape(keys, (1,) + keys.data.shape)
    if keys.data.ndim != 3 or keys.data.shape[1] < 1:
        raise ModelError("attention needs at least one key (query position t >= 2)")
    tape = q.tape
    B, n, dk = keys.data.shape
    if dk != d_k or q.data.shape != (B, d_k):
        raise ModelError(f"query/key width mismatch: q {q.data.shape}, keys {keys.data.shape}")
    scores = ad.reduce_sum(ad.reshape(q, (B, 1, dk)) * keys, axis=2) * (1.0 / math.sqrt(d_k))
    delta = np.arange(n, 0, -1, dtype=np.float64)  # oldest key first
    if variant == "multiplicative":
        shift = tape.leaf(scores.data.max(axis=1, keepdims=True))
        e = ad.exp(scores - shift)
        if tau is not None and np.isfinite(tau.data).all():
            decay = ad.exp(ad.neg(ad.div(tape.leaf(delta[None, :]), tau)))
        else:
            decay = tape.leaf(np.ones((1, n)))
        weekly = (delta % 7 == 0).astype(np.float64)
        if beta_week is not None and weekly.any():
            kernel = decay + beta_week * tape.leaf(weekly[None, :])
        else:
            kernel = decay
        num = e * kernel
        out = ad.div(num, ad.reduce_sum(num, axis=1, keepdims=True))
    elif variant == "additive":
        if gamma is None:
            raise ModelError("additive attention needs the gamma bias table")
        size = gamma_size or gamma.data.shape[0]
        sel = np.zeros((n, size))
        for j, d in enumerate(delta):
            sel[j, min(int(d), size) - 1] = 1.0
        bias = ad.reshape(ad.matmul(tape.leaf(sel), gamma), (1, n))
        out = ad.softmax_lastdim(scores + bias)
    else:
        raise ModelError(f"unknown attention variant '{variant}'")
    return ad.reshape(out, (n,)) if single else out


@dataclass
class ForwardOut:
    preds: Tensor        # (B, len(horizons)) in scaled target space
    context: Tensor      # (B, hidden_width)
    path: Tensor         # (B, k) prediction path for the smoothness penalty
    states: list[Tensor]


def _encode(tape: Tape, p: dict[str, Tensor], cfg: ModelConfig, x: Tensor):
    B, L, _F = x.data.shape
    z = ms_tcn_forward(x, p, cfg.mstcn)
    h = tape.leaf(np.zeros((B, cfg.hidden_width)))
    states: list[Tensor] = []
    for t in range(L):
        h, _c = cell_step(ad.index_axis(z, t, axis=1), h, p, cfg.phi)
        states.append(h)
    if L >= 2:
        hist = ad.stack(states[:-1], axis=1)
        flat = ad.reshape(hist, (B * (L - 1), cfg.hidden_width))
        keys = ad.reshape(flat @ p["attn.wk"], (B, L - 1, cfg.attention.d_k))
        values = ad.reshape(flat @ p["attn.wv"], (B, L - 1, cfg.hidden_width))
        alpha = attention_weights(
            states[-1] @ p["attn.wq"],
            keys,
            cfg.attention.variant,
            d_k=cfg.attention.d_k,
            tau=p.get("attn.tau"),
            beta_week=p.get("attn.beta_week"),
            gamma=p.get("attn.gamma"),
            gamma_size=cfg.lookback,
        )
        pool = ad.reduce_sum(ad.reshape(alpha, (B, L - 1, 1)) * values, axis=1)
    else:
        # single-step window: learned initial context stands in for the pool
        pool = ad.matmul(tape.leaf(np.ones((B, 1))), p["attn.c0"])
    return pool + states[-1], states


def _head(tape: Tape, p: dict[str, Tensor], cfg: ModelConfig, context: Tensor, h_index: int) -> Tensor:
    # nonlinear readout: the horizon embedding must be able to modulate the
    # context, not just shift the output by a constant
    B = context.data.shape[0]
    e_row = ad.reshape(ad.index_axis(p["embed.e"], h_index, axis=0), (1, cfg.horizon_embed_width))
    tiled = ad.matmul(tape.leaf(np.ones((B, 1))), e_row)
    hidden = ad.tanh(ad.concat([context, tiled], axis=1) @ p["head.w1"] + p["head.b1"])
    return hidden @ p["head.w2"] + p["head.b2"]


def forward_windows(
    tape: Tape,
    p: dict[str, Tensor],
    cfg: ModelConfig,
    x: Tensor,
    future: Tensor | None = None,
) -> ForwardOut:
    """Batched forward pass over stacked windows (B, lookback, n_features)."""
    if x.data.ndim != 3 or x.data.shape[2] != cfg.n_features:
        raise ModelError(f"window batch shape {x.data.shape} does not match n_features {cfg.n_features}")
    if cfg.decode == "direct":
        context, states = _encode(tape, p, cfg, x)
        cols = [_head(tape, p, cfg, context, i) for i in range(len(cfg.horizons))]
        preds = ad.concat(cols, axis=1)
        return ForwardOut(preds=preds, context=context, path=preds, states=states)
    return _forward_recursive(tape, p, cfg, x, future)


def _forward_recursive(tape, p, cfg, x, future):
    if future is None:
        raise ModelError("recursive decoding needs the window's future feature rows")
    B, L, F = x.data.shape
    max_h = cfg.horizons[-1]
    if future.data.shape[1] < max_h:
        raise ModelError(f"future rows cover {future.data.shape[1]} days, need {max_h}")
    mu, sd = cfg.target_transform
    z0 = tape.leaf(np.full((1, 1), (0.0 - mu) / sd))
    keep = np.ones((1, F))
    keep[0, TARGET_COL] = 0.0
    keep_mask = tape.leaf(keep)
    put = np.zeros((1, F))
    put[0, TARGET_COL] = 1.0
    put_row = tape.leaf(put)

    one_step = cfg.horizons.index(1)
    current = x
    context = None
    states: list[Tensor] = []
    steps: list[Tensor] = []
    for s in range(max_h):
        context, states = _encode(tape, p, cfg, current)
        y = _head(tape, p, cfg, context, one_step)
        steps.append(y)
        # feed the prediction back through the target transform (clamped at 0 units)
        pseudo = ad.relu(y - z0) + z0
        row = ad.index_axis(future, s, axis=1) * keep_mask + ad.matmul(pseudo, put_row)
        current = ad.concat(
            [ad.slice_axis(current, 1, L, axis=1), ad.reshape(row, (B, 1, F))], axis=1
        )
    path = ad.concat(steps, axis=1)
    preds = ad.concat([ad.slice_axis(path, h - 1, h, axis=1) for h in cfg.horizons], axis=1)
    return ForwardOut(preds=preds, context=context, path=path, states=states)


def encode_states(model: HybridForecaster, x: np.ndarray) -> np.ndarray:
    """Hidden-state sequence (B, L, hidden) for causality checks."""
    tape = Tape()
    p = lift_params(tape, model.params)
    _, states = _encode(tape, p, model.config, tape.leaf(x))
    return np.stack([s.data for s in states], axis=1)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def forecast(model: HybridForecaster, window: WindowSample) -> np.ndarray:
    """Predictions in original units, aligned with window.horizons."""
    for h in window.horizons:
        if h not in model.config.horizons:
            raise ModelError(f"horizon {h} not in the model's trained set {model.config.horizons}")
    if window.features.shape != (model.config.lookback, model.config.n_features):
        raise ModelError(
            f"window features {window.features.shape} do not match model "
            f"({model.config.lookback}, {model.config.n_features})"
        )
    scaled = forecast_batch(model, [window])[0]
    cols = [model.config.horizons.index(h) for h in window.horizons]
    return model.to_units(scaled[cols])


def forecast_batch(
    model: HybridForecaster, windows: list[WindowSample], batch_size: int = 256
) -> np.ndarray:
    """Scaled-space predictions (N, len(model horizons)) for a window list."""
    cfg = model.config
    out = np.empty((len(windows), len(cfg.horizons)))
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo : lo + batch_size]
        tape = Tape()
        p = lift_params(tape, model.params)
        x = tape.leaf(np.stack([w.features for w in chunk]))
        future = None
        if cfg.decode == "recursive":
            future = tape.leaf(np.stack([w.future_features for w in chunk]))
        out[lo : lo + len(chunk)] = forward_windows(tape, p, cfg, x, future).preds.data
    return out
