"""Composite training objective: regression loss with regularizers, a
policy-gradient auxiliary with an entropy term, and their weighted total.

The policy head samples one multiplicative forecast adjustment per window;
its reward is the negated sMAPE of the adjusted forecast (newsvendor profit
is available behind the reward flag). Advantages are treated as constants
during differentiation, REINFORCE-with-baseline style.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "RlConfig",
    "LossConfig",
    "PolicyHead",
    "action_grid",
    "sample_actions",
    "action_rewards",
    "policy_entropy_value",
    "input_gradient_penalty",
    "primary_loss",
    "rl_policy_loss",
    "entropy_bonus",
    "total_loss",
]


@dataclass(frozen=True)
class RlConfig:
    n_actions: int = 11
    grid_low: float = 0.8
    grid_high: float = 1.25
    baseline_decay: float = 0.99
    reward: str = "neg_smape"  # or "cpoi"
    cpoi_price: float = 1.0
    cpoi_cost: float = 0.5

    def __post_init__(self):
        if self.n_actions < 2:
            raise ValueError("action grid needs K >= 2")
        if not (0 < self.grid_low < self.grid_high):
            raise ValueError(f"bad action grid bounds [{self.grid_low}, {self.grid_high}]")
        if self.reward not in ("neg_smape", "cpoi"):
            raise ValueError(f"unknown reward kind '{self.reward}'")

    def to_dict(self) -> dict:
        return {
            "n_actions": self.n_actions,
            "grid_low": self.grid_low,
            "grid_high": self.grid_high,
            "baseline_decay": self.baseline_decay,
            "reward": self.reward,
            "cpoi_price": self.cpoi_price,
            "cpoi_cost": self.cpoi_cost,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RlConfig":
        return cls(**d)


@dataclass(frozen=True)
class LossConfig:
    """Coefficients of the total objective; all must be finite, fd_eps > 0.

    entropy_weight is applied exactly as the total adds it, so a negative
    value rewards exploration; the default does.
    """

    l2: float = 1e-4
    input_grad: float = 1e-3
    smooth: float = 1e-3
    rl_weight: float = 0.1
    entropy_weight: float = -0.01
    grad_flatness: float = 0.0
    fd_eps: float = 1e-3
    rl: RlConfig = field(default_factory=RlConfig)

    def __post_init__(self):
        for name in ("l2", "input_grad", "smooth", "rl_weight", "fd_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.grad_flatness < 0:
            raise ValueError("grad_flatness must be >= 0")
        if self.fd_eps <= 0:
            raise ValueError("fd_eps must be > 0")


def action_grid(cfg: RlConfig) -> np.ndarray:
    """K multiplicative adjustments, log-uniform; the entry nearest 1 is snapped to 1."""
    grid = np.exp(np.linspace(math.log(cfg.grid_low), math.log(cfg.grid_high), cfg.n_actions))
    grid[int(np.argmin(np.abs(np.log(grid))))] = 1.0
    return grid


class PolicyHead:
    """Linear context-to-action-logits head with an EMA reward baseline."""

    def __init__(self, context_width: int, cfg: RlConfig, seed: int):
        from .model import glorot

        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x90110]))
        self.cfg = cfg
        self.grid = action_grid(cfg)
        self.params: dict[str, np.ndarray] = {
            "policy.w": glorot(rng, (context_width, cfg.n_actions)),
            "policy.b": np.zeros((1, cfg.n_actions)),
        }
        self.r_hat = 0.0

    def logits(self, context: Tensor, p: dict[str, Tensor]) -> Tensor:
        return context @ p["policy.w"] + p["policy.b"]

    def update_baseline(self, rewards: np.ndarray) -> None:
        d = self.cfg.baseline_decay
        self.r_hat = d * self.r_hat + (1.0 - d) * float(np.mean(rewards))


def sample_actions(logit_values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row from softmax(logits)."""
    shifted = logit_values - logit_values.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(len(probs))
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), probs.shape[1] - 1)


def action_rewards(
    pred_units: np.ndarray,
    target_units: np.ndarray,
    actions: np.ndarray,
    grid: np.ndarray,
    cfg: RlConfig,
) -> np.ndarray:
    """Reward per window for the sampled adjustment applied to the forecast."""
    adjusted = pred_units * grid[actions][:, None]
    if cfg.reward == "neg_smape":
        denom = np.abs(adjusted) + np.abs(target_units)
        with np.errstate(invalid="ignore"):
            terms = np.where(denom > 0, np.abs(adjusted - target_units) / np.where(denom > 0, denom, 1.0), 0.0)
        return -200.0 * terms.mean(axis=1)
    q = np.maximum(0.0, np.rint(adjusted))
    profit = cfg.cpoi_price * np.minimum(q, target_units) - cfg.cpoi_cost * q
    return profit.sum(axis=1)


def policy_entropy_value(probs: np.ndarray) -> float:
    """Mean entropy of probability rows, with 0*log(0) read as 0."""
    probs = np.atleast_2d(probs)
    terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return float(np.mean(-terms.sum(axis=1)))


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def input_gradient_penalty(
    f,
    x: Tensor,
    eps: float,
    direction: np.ndarray | None = None,
    seed: int | None = None,
    f_x: Tensor | None = None,
) -> Tensor:
    """First-order input-sensitivity estimate ((f(x + eps*u) - f(x)) / eps)^2.

    u is a unit-norm direction (seeded draw unless given); the result is
    differentiable with respect to anything f closes over, through both
    evaluations. Pass f_x to reuse an already computed baseline output.
    """
    if eps <= 0:
        raise ValueError("input_gradient_penalty needs eps > 0")
    if direction is None:
        rng = np.random.default_rng(seed)
        direction = rng.normal(size=x.data.shape)
    norm = float(np.linalg.norm(direction))
    if norm == 0:
        raise ValueError("zero perturbation direction")
    direction = direction / norm
    base = f_x if f_x is not None else f(x)
    perturbed = f(x + x.tape.leaf(eps * direction))
    return ad.mean_all(ad.square((perturbed - base) * (1.0 / eps)))


def primary_loss(
    preds: Tensor,
    targets: np.ndarray,
    params: dict[str, Tensor],
    cfg: LossConfig,
    smooth_path: Tensor | None = None,
    path_positions: tuple[int, ...] | None = None,
    input_penalty: Tensor | None = None,
) -> Tensor:
    """MSE + l2 * sum(theta^2) + input-gradient penalty + temporal smoothness.

    The smoothness term sums squared forward-difference quotients along each
    window's prediction path (per-window mean over the batch); when the path
    samples are not one day apart, each difference is divided by its gap.
    """
    if preds.data.size == 0:
        raise ValueError("primary_loss on an empty batch")
    tape = preds.tape
    t = tape.leaf(np.asarray(targets, dtype=np.float64))
    if t.data.shape != preds.data.shape:
        raise ValueError(f"preds {preds.data.shape} vs targets {t.data.shape}")
    loss = ad.mean_all(ad.square(preds - t))
    if cfg.l2 > 0 and params:
        reg = None
        for name in sorted(params):
            term = ad.reduce_sum(ad.square(params[name]))
            reg = term if reg is None else reg + term
        loss = loss + cfg.l2 * reg
    if input_penalty is not None and cfg.input_grad > 0:
        loss = loss + cfg.input_grad * input_penalty
    if smooth_path is not None and cfg.smooth > 0 and smooth_path.data.shape[-1] >= 2:
        k = smooth_path.data.shape[-1]
        if path_positions is None:
            gaps = np.ones((1, k - 1))
        else:
            if len(path_positions) != k:
                raise ValueError(f"path positions {path_positions} vs path width {k}")
            gaps = np.diff(np.asarray(path_positions, dtype=np.float64))[None, :]
        diffs = ad.slice_axis(smooth_path, 1, k, axis=1) - ad.slice_axis(smooth_path, 0, k - 1, axis=1)
        quotients = ad.div(diffs, tape.leaf(gaps))
        loss = loss + cfg.smooth * (ad.reduce_sum(ad.square(quotients)) * (1.0 / smooth_path.data.shape[0]))
    return loss


def rl_policy_loss(
    context: Tensor,
    actions: np.ndarray,
    rewards: np.ndarray,
    head: PolicyHead,
    p: dict[str, Tensor],
) -> Tensor:
    """-mean(log pi(a|s) * (R - baseline)); the advantage is held constant."""
    logits = head.logits(context, p)
    logp = ad.log_softmax_lastdim(logits)
    onehot = np.zeros(logits.data.shape)
    onehot[np.arange(len(actions)), actions] = 1.0
    tape = context.tape
    logp_a = ad.reduce_sum(logp * tape.leaf(onehot), axis=1)
    advantage = tape.leaf(np.asarray(rewards, dtype=np.float64) - head.r_hat)
    return ad.neg(ad.mean_all(logp_a * advantage))


def entropy_bonus(context: Tensor, head: PolicyHead, p: dict[str, Tensor]) -> Tensor:
    """Mean policy entropy over the batch's contexts, in [0, ln K]."""
    logits = head.logits(context, p)
    logp = ad.log_softmax_lastdim(logits)
    probs = ad.exp(logp)
    return ad.mean_all(ad.neg(ad.reduce_sum(probs * logp, axis=1)))


def total_loss(
    primary: Tensor,
    cfg: LossConfig,
    rl: Tensor | None = None,
    entropy: Tensor | None = None,
    flatness: Tensor | None = None,
) -> Tensor:
    out = primary
    if rl is not None and cfg.rl_weight != 0:
        out = out + cfg.rl_weight * rl
    if entropy is not None and cfg.entropy_weight != 0:
        out = out + cfg.entropy_weight * entropy
    if flatness is not None and cfg.grad_flatness != 0:
        out = out + cfg.grad_flatness * flatness
    return out
