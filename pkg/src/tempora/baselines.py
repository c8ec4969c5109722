"""Lightweight comparison models sharing the WindowSample/ForecastSet surfaces.

All baselines consume exactly the windows the hybrid model trains on, so the
leakage and split guarantees are inherited, and their ForecastSets are
directly comparable under the DM machinery. Heavier external models plug in
through the ForecastSet CSV instead of being vendored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import SeriesPanel, SplitWindows
from .evaluation import ForecastSet
from .model import glorot
from .training import OptimizerState, TrainConfig, adam_step, batch_indices, clip_gradients

__all__ = [
    "BaselineError",
    "BaselineSpec",
    "fit_predict",
    "gru_cell_step",
]

_KINDS = ("naive_last", "seasonal_naive", "ridge_ar", "vanilla_gru")


class BaselineError(ValueError):
    """Baseline specification or fitting failed."""


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    season: int = 7
    lag_order: int = 7
    ridge: float = 1e-4
    hidden_width: int = 16
    iterations: int = 300
    batch_size: int = 64
    learning_rate: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise BaselineError(f"unknown baseline kind '{self.kind}'")
        if self.kind == "seasonal_naive" and self.season < 1:
            raise BaselineError("season must be >= 1")
        if self.kind == "ridge_ar" and (self.lag_order < 1 or self.ridge < 0):
            raise BaselineError("ridge_ar needs lag_order >= 1 and ridge >= 0")
        if self.kind == "vanilla_gru" and self.hidden_width < 1:
            raise BaselineError("vanilla_gru needs hidden_width >= 1")


def fit_predict(spec: BaselineSpec, panel: SeriesPanel, windows: SplitWindows) -> ForecastSet:
    """Fit on the training windows, forecast the test windows."""
    if spec.kind == "naive_last":
        fn = _predict_naive_last(panel, windows)
    elif spec.kind == "seasonal_naive":
        fn = _predict_seasonal_naive(panel, windows, spec.season)
    elif spec.kind == "ridge_ar":
        fn = _predict_ridge_ar(spec, panel, windows)
    else:
        fn = _predict_vanilla_gru(spec, windows)
    records = []
    target = panel.target_matrix(windows.target_mode)
    sku_index = {s: i for i, s in enumerate(panel.sku_ids)}
    for k, w in enumerate(windows.test):
        i = sku_index[w.sku_id]
        for j, h in enumerate(windows.horizons):
            records.append(
                (w.sku_id, panel.date_of(w.origin), h, fn[k, j], target[i, w.origin + h])
            )
    return ForecastSet.from_records(spec.kind, windows.target_mode, records)


def _predict_naive_last(panel, windows) -> np.ndarray:
    target = panel.target_matrix(windows.target_mode)
    sku_index = {s: i for i, s in enumerate(panel.sku_ids)}
    out = np.empty((len(windows.test), len(windows.horizons)))
    for k, w in enumerate(windows.test):
        out[k, :] = target[sku_index[w.sku_id], w.origin]
    return out


def _predict_seasonal_naive(panel, windows, season: int) -> np.ndarray:
    target = panel.target_matrix(windows.target_mode)
    sku_index = {s: i for i, s in enumerate(panel.sku_ids)}
    out = np.empty((len(windows.test), len(windows.horizons)))
    for k, w in enumerate(windows.test):
        i = sku_index[w.sku_id]
        for j, h in enumerate(windows.horizons):
            lag = season * math.ceil(h / season)
            out[k, j] = target[i, w.origin + h - lag]
    return out


def _ar_design(panel, windows, split, lag_order: int):
    """Raw-lag design matrix [1, y_{t-p+1..t}] per window, plus raw targets."""
    target = panel.target_matrix(windows.target_mode)
    sku_index = {s: i for i, s in enumerate(panel.sku_ids)}
    rows = np.empty((len(split), lag_order + 1))
    ys = np.empty((len(split), len(windows.horizons)))
    for k, w in enumerate(split):
        i = sku_index[w.sku_id]
        rows[k, 0] = 1.0
        rows[k, 1:] = target[i, w.origin - lag_order + 1 : w.origin + 1]
        ys[k, :] = target[i, [w.origin + h for h in windows.horizons]]
    return rows, ys


def _predict_ridge_ar(spec, panel, windows) -> np.ndarray:
    if spec.lag_order > windows.lookback:
        raise BaselineError(
            f"lag_order {spec.lag_order} exceeds the window lookback {windows.lookback}"
        )
    X, Y = _ar_design(panel, windows, windows.train, spec.lag_order)
    Xt, _ = _ar_design(panel, windows, windows.test, spec.lag_order)
    gram = X.T @ X
    penalty = np.eye(spec.lag_order + 1) * spec.ridge
    penalty[0, 0] = 0.0  # intercept unpenalized
    system = gram + penalty
    out = np.empty((len(windows.test), len(windows.horizons)))
    for j in range(len(windows.horizons)):
        try:
            beta = np.linalg.solve(system, X.T @ Y[:, j])
        except np.linalg.LinAlgError:
            raise BaselineError(
                "singular normal equations (collinear lags); use ridge > 0"
            ) from None
        if not np.isfinite(beta).all() or (spec.ridge == 0 and np.linalg.cond(system) > 1e12):
            raise BaselineError("singular normal equations (collinear lags); use ridge > 0")
        out[:, j] = Xt @ beta
    return np.maximum(0.0, out)


def ridge_objective(panel, windows, spec, beta: np.ndarray, horizon_col: int) -> float:
    """Penalized squared error of one per-horizon fit (for optimality checks)."""
    X, Y = _ar_design(panel, windows, windows.train, spec.lag_order)
    resid = Y[:, horizon_col] - X @ beta
    return float(resid @ resid + spec.ridge * (beta[1:] @ beta[1:]))


def ridge_coefficients(spec, panel, windows) -> np.ndarray:
    """Fitted [intercept, lags...] per horizon, shape (n_horizons, p+1)."""
    X, Y = _ar_design(panel, windows, windows.train, spec.lag_order)
    gram = X.T @ X
    penalty = np.eye(spec.lag_order + 1) * spec.ridge
    penalty[0, 0] = 0.0
    out = np.empty((len(windows.horizons), spec.lag_order + 1))
    for j in range(len(windows.horizons)):
        out[j] = np.linalg.solve(gram + penalty, X.T @ Y[:, j])
    return out


# ---------------------------------------------------------------------------
# vanilla GRU
# ---------------------------------------------------------------------------


def gru_cell_step(x_t: Tensor, h_prev: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Classical update/reset-gate recurrence.

    z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br),
    h_cand = tanh(Wh x + Uh (r * h) + bh), h = (1 - z) * h + z * h_cand.
    """
    z = ad.sigmoid(x_t @ p["gru.wz"] + h_prev @ p["gru.uz"] + p["gru.bz"])
    r = ad.sigmoid(x_t @ p["gru.wr"] + h_prev @ p["gru.ur"] + p["gru.br"])
    cand = ad.tanh(x_t @ p["gru.wh"] + (r * h_prev) @ p["gru.uh"] + p["gru.bh"])
    one = x_t.tape.leaf(1.0)
    return (one - z) * h_prev + z * cand


def gru_init(n_features: int, hidden: int, n_out: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6272]))
    params: dict[str, np.ndarray] = {}
    for gate in ("z", "r", "h"):
        params[f"gru.w{gate}"] = glorot(rng, (n_features, hidden))
        params[f"gru.u{gate}"] = glorot(rng, (hidden, hidden))
        params[f"gru.b{gate}"] = np.zeros((1, hidden))
    params["gru.head_w"] = glorot(rng, (hidden, n_out))
    params["gru.head_b"] = np.zeros((1, n_out))
    return params


def _gru_forward(tape: Tape, p: dict[str, Tensor], x: Tensor) -> Tensor:
    B, L, _F = x.data.shape
    hidden = p["gru.uz"].data.shape[0]
    h = tape.leaf(np.zeros((B, hidden)))
    for t in range(L):
        h = gru_cell_step(ad.index_axis(x, t, axis=1), h, p)
    return h @ p["gru.head_w"] + p["gru.head_b"]


def _predict_vanilla_gru(spec, windows) -> np.ndarray:
    mu, sd = windows.scaling.target_mean, windows.scaling.target_std
    n_out = len(windows.horizons)
    params = gru_init(windows.train[0].features.shape[1], spec.hidden_width, n_out, spec.seed)
    opt = OptimizerState.zeros_like(params)
    cfg = TrainConfig(
        learning_rate=spec.learning_rate,
        max_iterations=spec.iterations,
        batch_size=spec.batch_size,
        seed=spec.seed,
    )
    X = np.stack([w.features for w in windows.train])
    Y = (np.log1p(np.stack([w.targets for w in windows.train])) - mu) / sd
    for i in range(cfg.max_iterations):
        idx = batch_indices(cfg.seed, i, len(X), cfg.batch_size)
        tape = Tape()
        p = {k: tape.leaf(v) for k, v in params.items()}
        preds = _gru_forward(tape, p, tape.leaf(X[idx]))
        loss = ad.mean_all(ad.square(preds - tape.leaf(Y[idx])))
        g = tape.backward(loss)
        grads, _ = clip_gradients({k: g.wrt(p[k]) for k in params}, cfg.clip_norm)
        adam_step(params, grads, opt, cfg)

    out = np.empty((len(windows.test), n_out))
    for lo in range(0, len(windows.test), 256):
        chunk = windows.test[lo : lo + 256]
        tape = Tape()
        p = {k: tape.leaf(v) for k, v in params.items()}
        scaled = _gru_forward(tape, p, tape.leaf(np.stack([w.features for w in chunk]))).data
        out[lo : lo + len(chunk)] = np.maximum(0.0, np.expm1(mu + sd * scaled))
    return out
