"""Deterministic mini-batch training: Adam with global-norm clipping, seeded
batch assembly, early stopping on validation loss, and checkpointing.

Batch order, action sampling, and penalty directions are all derived from
(seed, iteration) alone, never from mutable RNG state, so a run resumed from
a checkpoint retraces exactly the iterations an uninterrupted run would.
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tape, Tensor
from .model import HybridForecaster, ModelConfig, forward_windows, lift_params
from .objectives import (
    LossConfig,
    PolicyHead,
    action_rewards,
    entropy_bonus,
    input_gradient_penalty,
    primary_loss,
    rl_policy_loss,
    sample_actions,
    total_loss,
)

__all__ = [
    "TrainingAbort",
    "CheckpointError",
    "TrainConfig",
    "OptimizerState",
    "TrainState",
    "TrainResult",
    "HistoryRow",
    "adam_step",
    "clip_gradients",
    "batch_indices",
    "batch_loss",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "save_history",
]


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss or gradient and refused to continue."""


class CheckpointError(ValueError):
    """Checkpoint file is unreadable, truncated, or of an unsupported version."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    max_iterations: int = 1200
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    patience: int = 50
    val_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def clip_gradients(
    grads: dict[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Scale the gradient set so its global norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}, total
    return grads, total


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    cfg: TrainConfig,
) -> None:
    """Bias-corrected Adam update, in place. NaN gradients abort, naming the parameter."""
    for name in params:
        if not np.isfinite(grads[name]).all():
            raise TrainingAbort(f"non-finite gradient in parameter '{name}'")
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / (1.0 - b1**t)
        v_hat = state.v[name] / (1.0 - b2**t)
        p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> np.ndarray:
    """Indices for one iteration: a fresh per-epoch shuffle cut into batches.

    Stateless in iteration, so resumed runs reproduce the same order.
    """
    per_epoch = max(1, math.ceil(n / batch_size))
    epoch, slot = divmod(iteration, per_epoch)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7, int(epoch)]))
    perm = rng.permutation(n)
    return perm[slot * batch_size : (slot + 1) * batch_size]


# ---------------------------------------------------------------------------
# batch objective
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    x: np.ndarray                    # (B, L, F)
    future: np.ndarray | None        # (B, maxH, F) for recursive decoding
    targets_scaled: np.ndarray       # (B, nH)
    targets_units: np.ndarray        # (B, nH)


@dataclass
class Draws:
    """Per-iteration randomness, fixed up front so the loss is a pure function
    of the parameters (finite-difference checks rely on this)."""

    direction: np.ndarray | None = None
    actions: np.ndarray | None = None
    rewards: np.ndarray | None = None
    action_rng: np.random.Generator | None = None


@dataclass
class StepInfo:
    total: float
    primary: float
    rl: float | None
    entropy: float | None
    actions: np.ndarray | None
    rewards: np.ndarray | None


def batch_loss(
    tape: Tape,
    lifted: dict[str, Tensor],
    cfg: ModelConfig,
    loss_cfg: LossConfig,
    head: PolicyHead | None,
    batch: Batch,
    draws: Draws,
) -> tuple[Tensor, StepInfo]:
    """Assemble the full objective for one batch on the given tape."""
    x = tape.leaf(batch.x)
    future = tape.leaf(batch.future) if batch.future is not None else None
    out = forward_windows(tape, lifted, cfg, x, future)

    penalty = None
    if loss_cfg.input_grad > 0 and draws.direction is not None:
        penalty = input_gradient_penalty(
            lambda xt: forward_windows(tape, lifted, cfg, xt, future).preds,
            x,
            loss_cfg.fd_eps,
            direction=draws.direction,
            f_x=out.preds,
        )
    positions = (
        cfg.horizons if cfg.decode == "direct" else tuple(range(1, cfg.horizons[-1] + 1))
    )
    prim = primary_loss(
        out.preds, batch.targets_scaled, lifted, loss_cfg,
        smooth_path=out.path, path_positions=positions, input_penalty=penalty,
    )

    rl = entropy = None
    actions = rewards = None
    if head is not None and (loss_cfg.rl_weight != 0 or loss_cfg.entropy_weight != 0):
        logits = head.logits(out.context, lifted)
        actions = draws.actions
        if actions is None:
            actions = sample_actions(logits.data, draws.action_rng)
        rewards = draws.rewards
        if rewards is None:
            mu, sd = cfg.target_transform
            with np.errstate(over="ignore"):
                pred_units = np.maximum(0.0, np.expm1(mu + sd * out.preds.data))
            rewards = action_rewards(pred_units, batch.targets_units, actions, head.grid, loss_cfg.rl)
        rl = rl_policy_loss(out.context, actions, rewards, head, lifted)
        entropy = entropy_bonus(out.context, head, lifted)

    total = total_loss(prim, loss_cfg, rl=rl, entropy=entropy)
    info = StepInfo(
        total=total.item(),
        primary=prim.item(),
        rl=rl.item() if rl is not None else None,
        entropy=entropy.item() if entropy is not None else None,
        actions=actions,
        rewards=rewards,
    )
    return total, info


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: dict[str, np.ndarray]         # live parameters (model + policy)
    opt: OptimizerState
    iteration: int = 0
    r_hat: float = 0.0
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    best_val: float = math.inf
    best_iteration: int = 0


@dataclass
class HistoryRow:
    iteration: int
    train_total: float
    train_primary: float
    val_primary: float | None
    entropy: float | None
    wall_ms: float


@dataclass
class TrainResult:
    model: HybridForecaster               # best-validation snapshot
    policy_head: PolicyHead | None
    history: list[HistoryRow]
    state: TrainState


def _assemble(windows, transform, recursive: bool) -> Batch:
    mu, sd = transform
    units = np.stack([w.targets for w in windows])
    return Batch(
        x=np.stack([w.features for w in windows]),
        future=np.stack([w.future_features for w in windows]) if recursive else None,
        targets_scaled=(np.log1p(units) - mu) / sd,
        targets_units=units,
    )


def _slice_batch(full: Batch, idx: np.ndarray) -> Batch:
    return Batch(
        x=full.x[idx],
        future=full.future[idx] if full.future is not None else None,
        targets_scaled=full.targets_scaled[idx],
        targets_units=full.targets_units[idx],
    )


def _unit_direction(seed: int, iteration: int, shape) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 13, int(iteration)]))
    u = rng.normal(size=shape)
    return u / np.linalg.norm(u)


def _validation_primary(
    params, cfg: ModelConfig, loss_cfg: LossConfig, val: Batch, batch_size: int, seed: int
) -> float:
    total, count = 0.0, 0
    n = len(val.x)
    for chunk_i, lo in enumerate(range(0, n, batch_size)):
        piece = _slice_batch(val, np.arange(lo, min(lo + batch_size, n)))
        tape = Tape()
        lifted = lift_params(tape, params)
        draws = Draws(
            direction=_unit_direction(seed, 1_000_000 + chunk_i, piece.x.shape)
            if loss_cfg.input_grad > 0
            else None
        )
        _, info = batch_loss(tape, lifted, cfg, loss_cfg, None, piece, draws)
        total += info.primary * len(piece.x)
        count += len(piece.x)
    return total / count


def _flatness_correction(
    params, grads, total_value, cfg, loss_cfg, head, piece, fixed_draws
) -> tuple[float, dict[str, np.ndarray]]:
    """One-step estimate of ||dL/dtheta||^2 along the normalized gradient."""
    eps = loss_cfg.fd_eps
    gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if gnorm == 0:
        return 0.0, {k: np.zeros_like(g) for k, g in grads.items()}
    shifted = {k: p + eps * grads[k] / gnorm for k, p in params.items()}
    tape = Tape()
    lifted = lift_params(tape, shifted)
    total2, _ = batch_loss(tape, lifted, cfg, loss_cfg, head, piece, fixed_draws)
    g2 = tape.backward(total2)
    grads2 = {k: g2.wrt(lifted[k]) for k in shifted}
    flat = (total2.item() - total_value) ** 2 / (eps * eps)
    scale = 2.0 * (total2.item() - total_value) / (eps * eps)
    extra = {k: scale * (grads2[k] - grads[k]) for k in grads}
    return flat, extra


def train(
    model: HybridForecaster,
    train_windows,
    val_windows,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    policy_head: PolicyHead | None = None,
    state: TrainState | None = None,
) -> TrainResult:
    """Run the seeded Adam loop; returns the best-validation snapshot.

    Early stopping fires at a validation check when patience iterations have
    passed without improvement. Pass a loaded TrainState to resume; the
    continuation is bit-identical to an uninterrupted run with the same seed.
    """
    if not train_windows or not val_windows:
        raise ValueError("train() needs non-empty train and validation window sets")
    cfg = model.config
    needs_policy = loss_cfg.rl_weight != 0 or loss_cfg.entropy_weight != 0
    if needs_policy and policy_head is None:
        policy_head = PolicyHead(cfg.hidden_width, loss_cfg.rl, seed=train_cfg.seed)
    head = policy_head if needs_policy else None

    if state is None:
        params = {k: v.copy() for k, v in model.params.items()}
        if head is not None:
            params.update({k: v.copy() for k, v in head.params.items()})
        state = TrainState(
            params=params,
            opt=OptimizerState.zeros_like(params),
            best_params={k: v.copy() for k, v in params.items()},
        )
    if head is not None:
        head.r_hat = state.r_hat

    recursive = cfg.decode == "recursive"
    full_train = _assemble(train_windows, cfg.target_transform, recursive)
    full_val = _assemble(val_windows, cfg.target_transform, recursive)
    constraints = model.param_constraints()
    n = len(train_windows)

    history: list[HistoryRow] = []
    for i in range(state.iteration, train_cfg.max_iterations):
        started = time.perf_counter()
        idx = batch_indices(train_cfg.seed, i, n, train_cfg.batch_size)
        piece = _slice_batch(full_train, idx)
        draws = Draws(
            direction=_unit_direction(train_cfg.seed, i, piece.x.shape)
            if loss_cfg.input_grad > 0
            else None,
            action_rng=np.random.default_rng(
                np.random.SeedSequence([int(train_cfg.seed), 11, int(i)])
            ),
        )
        tape = Tape()
        lifted = lift_params(tape, state.params)
        try:
            total, info = batch_loss(tape, lifted, cfg, loss_cfg, head, piece, draws)
            if not math.isfinite(info.total):
                raise NumericsError("non-finite training loss")
            g = tape.backward(total)
        except NumericsError as err:
            raise TrainingAbort(f"iteration {i}: {err}") from err
        grads = {k: g.wrt(lifted[k]) for k in state.params}

        train_total = info.total
        if loss_cfg.grad_flatness > 0:
            fixed = Draws(direction=draws.direction, actions=info.actions, rewards=info.rewards)
            flat, extra = _flatness_correction(
                state.params, grads, info.total, cfg, loss_cfg, head, piece, fixed
            )
            train_total += loss_cfg.grad_flatness * flat
            grads = {k: grads[k] + loss_cfg.grad_flatness * extra[k] for k in grads}

        grads, _norm = clip_gradients(grads, train_cfg.clip_norm)
        adam_step(state.params, grads, state.opt, train_cfg)
        for name, (lo, hi) in constraints.items():
            if name in state.params:
                np.clip(state.params[name], lo, hi, out=state.params[name])
        if head is not None and info.rewards is not None:
            head.update_baseline(info.rewards)
            state.r_hat = head.r_hat
        state.iteration = i + 1

        row = HistoryRow(
            iteration=i + 1,
            train_total=train_total,
            train_primary=info.primary,
            val_primary=None,
            entropy=info.entropy,
            wall_ms=(time.perf_counter() - started) * 1000.0,
        )
        if (i + 1) % train_cfg.val_every == 0 or i + 1 == train_cfg.max_iterations:
            val_p = _validation_primary(
                state.params, cfg, loss_cfg, full_val, train_cfg.batch_size, train_cfg.seed
            )
            row.val_primary = val_p
            if val_p < state.best_val:
                state.best_val = val_p
                state.best_iteration = i + 1
                state.best_params = {k: v.copy() for k, v in state.params.items()}
            elif (i + 1) - state.best_iteration >= train_cfg.patience:
                history.append(row)
                break
        history.append(row)

    best_model = HybridForecaster(
        cfg, {k: v.copy() for k, v in state.best_params.items() if not k.startswith("policy.")}
    )
    if head is not None:
        head.params = {
            k: v.copy() for k, v in state.best_params.items() if k.startswith("policy.")
        }
    return TrainResult(model=best_model, policy_head=head, history=history, state=state)


def save_history(history: list[HistoryRow], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,train_total,train_primary,val_primary,entropy,wall_ms\n")
        for row in history:
            val = repr(row.val_primary) if row.val_primary is not None else ""
            ent = repr(row.entropy) if row.entropy is not None else ""
            fh.write(
                f"{row.iteration},{row.train_total!r},{row.train_primary!r},{val},{ent},{row.wall_ms!r}\n"
            )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"TEMPORA\x00"
_CKPT_VERSION = 1


def save_checkpoint(
    model: HybridForecaster,
    state: TrainState,
    path: str | os.PathLike,
    policy_head: PolicyHead | None = None,
    extra: dict | None = None,
) -> None:
    """Self-describing container: header JSON + concatenated fp64 LE arrays.

    Holds the best snapshot (deployment), the live parameters and optimizer
    moments (resume), and a config echo. Round-trips bit-exactly.
    """
    arrays: list[tuple[str, np.ndarray]] = []
    for name in sorted(state.params):
        arrays.append((f"live/{name}", state.params[name]))
    for name in sorted(state.best_params):
        arrays.append((f"best/{name}", state.best_params[name]))
    for name in sorted(state.opt.m):
        arrays.append((f"m/{name}", state.opt.m[name]))
    for name in sorted(state.opt.v):
        arrays.append((f"v/{name}", state.opt.v[name]))

    manifest = []
    offset = 0
    for name, arr in arrays:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": _CKPT_VERSION,
        "model_config": model.config.to_dict(),
        "rl_config": policy_head.cfg.to_dict() if policy_head is not None else None,
        "train": {
            "iteration": state.iteration,
            "step": state.opt.step,
            "r_hat": state.r_hat,
            "best_val": state.best_val if math.isfinite(state.best_val) else None,
            "best_iteration": state.best_iteration,
        },
        "arrays": manifest,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike):
    """Returns (model, policy_head | None, state, extra)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic at offset 0)")
    pos = len(_MAGIC)
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if pos + header_len > len(blob):
        raise CheckpointError(f"{path}: truncated header at offset {pos}")
    header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
    payload_start = pos + header_len

    expected = sum(int(np.prod(a["shape"])) * 8 for a in header["arrays"]) if header["arrays"] else 0
    if len(blob) - payload_start != expected:
        raise CheckpointError(
            f"{path}: truncated payload at offset {payload_start}: expected "
            f"{expected} bytes, found {len(blob) - payload_start}"
        )
    store: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start = payload_start + entry["offset"]
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        store[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)

    config = ModelConfig.from_dict(header["model_config"])
    live = {k[len("live/") :]: v for k, v in store.items() if k.startswith("live/")}
    best = {k[len("best/") :]: v for k, v in store.items() if k.startswith("best/")}
    moments_m = {k[len("m/") :]: v for k, v in store.items() if k.startswith("m/")}
    moments_v = {k[len("v/") :]: v for k, v in store.items() if k.startswith("v/")}

    t = header["train"]
    state = TrainState(
        params=live,
        opt=OptimizerState(m=moments_m, v=moments_v, step=t["step"]),
        iteration=t["iteration"],
        r_hat=t["r_hat"],
        best_params=best,
        best_val=t["best_val"] if t["best_val"] is not None else math.inf,
        best_iteration=t["best_iteration"],
    )
    model = HybridForecaster(
        config, {k: v for k, v in best.items() if not k.startswith("policy.")}
    )
    head = None
    if header["rl_config"] is not None:
        from .objectives import RlConfig

        head = PolicyHead(config.hidden_width, RlConfig.from_dict(header["rl_config"]), seed=0)
        head.params = {k: v for k, v in best.items() if k.startswith("policy.")}
        head.r_hat = state.r_hat
    return model, head, state, header.get("extra", {})
