"""Two-stage training: loss computation with condition dropout, a
decoupled-weight-decay adaptive optimizer with warmup/cosine scheduling
and global-norm clipping, plus a finite-difference gradient checker."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapter import ComposedModel
from .autodiff import Tensor
from .denoiser import DitConfig, denoise_t, prepare_text
from .errors import ConfigError, NumericError
from .rng import stream
from .schedule import DiffusionSchedule, forward_noise


@dataclass(frozen=True)
class TrainConfig:
    stage: int
    batch_size: int = 128
    lr: float = 2e-3
    weight_decay: float = 3e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-10
    grad_clip_norm: float = 0.01
    warmup_steps: int = 100
    lr_schedule: str = "cosine"
    p_cfg: float = 0.1
    epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_cfg < 1.0):
            raise ConfigError("need 0 <= p_cfg < 1")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in
                ("stage", "batch_size", "lr", "weight_decay", "beta1",
                 "beta2", "eps_opt", "grad_clip_norm", "warmup_steps",
                 "lr_schedule", "p_cfg", "epochs", "seed")}

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def stage1_desk(**overrides) -> TrainConfig:
    cfg = dict(stage=1, batch_size=128, lr=2.5e-3, weight_decay=3e-2,
               eps_opt=1e-10, grad_clip_norm=0.01, warmup_steps=100,
               lr_schedule="cosine", p_cfg=0.1, epochs=18)
    cfg.update(overrides)
    return TrainConfig(**cfg)


def stage2_desk(**overrides) -> TrainConfig:
    # constant schedule, no warmup: the adapter starts from copied weights
    cfg = dict(stage=2, batch_size=64, lr=2e-3, weight_decay=2e-2,
               eps_opt=1e-8, grad_clip_norm=0.01, warmup_steps=0,
               lr_schedule="constant", p_cfg=0.1, epochs=20)
    cfg.update(overrides)
    return TrainConfig(**cfg)


# -- optimizer ----------------------------------------------------------------

@dataclass
class OptimizerState:
    moments: dict = field(default_factory=dict)  # name -> (m, v)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls(moments={k: (np.zeros_like(t.data), np.zeros_like(t.data))
                            for k, t in params.items() if t.requires_grad})


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    warm = min(step / config.warmup_steps, 1.0) if config.warmup_steps else 1.0
    if config.lr_schedule == "cosine":
        frac = min(step, total_steps) / max(total_steps, 1)
        decay = 0.5 * (1.0 + np.cos(np.pi * frac))
    else:
        decay = 1.0
    return config.lr * warm * decay


def clip_gradients(grads: dict, max_norm: float) -> tuple:
    """Scale gradients so the global l2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def optimizer_step(params: dict, grads: dict, state: OptimizerState,
                   config: TrainConfig, total_steps: int) -> float:
    """One clipped, bias-corrected update with decoupled weight decay.

    Returns the pre-clip gradient norm.  ``state.step`` advances by one.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}; step aborted")
    grads, norm = clip_gradients(grads, config.grad_clip_norm)
    state.step += 1
    t = state.step
    lr_t = learning_rate(config, t, total_steps)
    b1, b2 = config.beta1, config.beta2
    for k, (m, v) in state.moments.items():
        g = grads.get(k)
        if g is None:
            continue
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = params[k].data
        p -= lr_t * m_hat / (np.sqrt(v_hat) + config.eps_opt)
        p -= lr_t * config.weight_decay * p
    return norm


# -- losses -------------------------------------------------------------------

def zero_grads(params: dict) -> None:
    for t in params.values():
        t.grad = None


def collect_grads(params: dict) -> dict:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in params.items() if t.requires_grad}


def _group_loss_stage1(params, cfg, sched, z0, conds, n, eps) -> Tensor:
    zn = forward_noise(sched, z0, n, eps)
    text = mask = None
    if conds is not None:
        embs, mask = prepare_text(conds)
        text = Tensor(embs)
    eps_hat = denoise_t(params, cfg, Tensor(zn), n, text, mask)
    diff = eps_hat - Tensor(eps)
    return (diff * diff).sum()


def stage1_loss(batch: list, params: dict, cfg: DitConfig,
                sched: DiffusionSchedule, rng: np.random.Generator,
                p_cfg: float) -> tuple:
    """Noise-prediction loss with text dropout; returns (loss, grads)."""
    if not batch:
        raise ConfigError("empty batch")
    B = len(batch)
    z0 = np.stack([r.z0 for r in batch])
    n = rng.integers(1, sched.N + 1, size=B)
    eps = rng.standard_normal((B, cfg.d_vl))
    drop = rng.random(B) < p_cfg
    zero_grads(params)
    parts = []
    for dropped in (False, True):
        idx = np.flatnonzero(drop == dropped)
        if idx.size == 0:
            continue
        conds = None if dropped else [batch[i].c_text for i in idx]
        parts.append(_group_loss_stage1(params, cfg, sched, z0[idx],
                                        conds, n[idx], eps[idx]))
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    loss = total * (1.0 / B)
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite stage-1 loss (timesteps {n.tolist()})")
    loss.backward()
    return float(loss.data), collect_grads(params)


def stage2_loss(batch: list, model: ComposedModel, sched: DiffusionSchedule,
                rng: np.random.Generator, p_cfg: float) -> tuple:
    """Adapter fine-tuning loss on triplets; gradients reach only the
    adapter (the backbone must be frozen).

    Dropout is joint: a dropped sample loses the edit text and feeds a
    zero query vector into the control branch.
    """
    if not batch:
        raise ConfigError("empty batch")
    if model.adapter is None:
        raise ConfigError("stage-2 loss needs an attached adapter")
    if any(t.requires_grad for t in model.params.values()):
        raise ConfigError("backbone must be frozen for stage 2")
    B = len(batch)
    cfg = model.cfg
    z_t = np.stack([r.z_target for r in batch])
    zq = np.stack([r.z_ref_delta for r in batch])
    n = rng.integers(1, sched.N + 1, size=B)
    eps = rng.standard_normal((B, cfg.d_vl))
    drop = rng.random(B) < p_cfg
    zero_grads(model.adapter)
    zero_grads(model.params)
    parts = []
    for dropped in (False, True):
        idx = np.flatnonzero(drop == dropped)
        if idx.size == 0:
            continue
        zn = forward_noise(sched, z_t[idx], n[idx], eps[idx])
        text = mask = None
        if not dropped:
            embs, mask = prepare_text([batch[i].c_delta for i in idx])
            text = Tensor(embs)
        query = Tensor(np.zeros_like(zq[idx]) if dropped else zq[idx])
        eps_hat = model.denoise_t(Tensor(zn), n[idx], text, mask, query)
        diff = eps_hat - Tensor(eps[idx])
        parts.append((diff * diff).sum())
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    loss = total * (1.0 / B)
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite stage-2 loss (timesteps {n.tolist()})")
    loss.backward()
    return float(loss.data), collect_grads(model.adapter)


# -- gradient verification ----------------------------------------------------

def grad_check(loss_fn, params: dict, n_directions: int = 20,
               fd_step: float = 1e-5, seed: int = 0,
               group: str | None = None,
               atol: float | None = None) -> float:
    """Central finite differences vs analytic directional derivatives.

    ``loss_fn`` must rebuild the loss Tensor from the current parameter
    values on every call.  ``group`` restricts directions to one tensor.
    Returns the max relative error over directions.  Differences below
    ``atol`` count as zero: the central quotient carries roundoff of
    order eps_machine * |loss| / fd_step, so tinier discrepancies are
    unmeasurable by finite differences (near-dead branches, zero gates).
    """
    names = [group] if group else [k for k, t in params.items()
                                   if t.requires_grad]
    zero_grads(params)
    loss = loss_fn()
    if atol is None:
        atol = 1e3 * np.finfo(float).eps * max(1.0, abs(float(loss.data))) \
            / fd_step
    loss.backward()
    grads = {k: (params[k].grad if params[k].grad is not None
                 else np.zeros_like(params[k].data)) for k in names}
    worst = 0.0
    rng = stream(seed, "gradcheck", group or "all")
    for _ in range(n_directions):
        direction = {k: rng.standard_normal(params[k].data.shape)
                     for k in names}
        scale = np.sqrt(sum(float((d ** 2).sum())
                            for d in direction.values()))
        direction = {k: d / scale for k, d in direction.items()}
        analytic = sum(float((grads[k] * direction[k]).sum()) for k in names)
        with ad.no_grad():
            for k in names:
                params[k].data += fd_step * direction[k]
            plus = float(loss_fn().data)
            for k in names:
                params[k].data -= 2 * fd_step * direction[k]
            minus = float(loss_fn().data)
            for k in names:
                params[k].data += fd_step * direction[k]
        numeric = (plus - minus) / (2 * fd_step)
        diff = abs(analytic - numeric)
        if diff <= atol:
            continue
        denom = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, diff / denom)
    return worst


# -- training loops -----------------------------------------------------------

def _log_line(fh, **fields):
    if fh is not None:
        fh.write(json.dumps(fields) + "\n")
        fh.flush()


def train_stage1(records: list, params: dict, cfg: DitConfig,
                 sched: DiffusionSchedule, tc: TrainConfig,
                 log_path: str | None = None) -> list:
    """Pre-train the prior; returns the per-step loss history."""
    steps_per_epoch = len(records) // tc.batch_size
    if steps_per_epoch == 0:
        raise ConfigError("corpus smaller than one batch")
    total_steps = steps_per_epoch * tc.epochs
    state = OptimizerState.for_params(params)
    losses = []
    t0 = time.monotonic()
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(tc.epochs):
            order = stream(tc.seed, "shuffle", epoch).permutation(len(records))
            for b in range(steps_per_epoch):
                batch = [records[i] for i in
                         order[b * tc.batch_size:(b + 1) * tc.batch_size]]
                step_rng = stream(tc.seed, "step", state.step)
                loss, grads = stage1_loss(batch, params, cfg, sched,
                                          step_rng, tc.p_cfg)
                norm = optimizer_step(params, grads, state, tc, total_steps)
                losses.append(loss)
                _log_line(fh, step=state.step, loss=loss,
                          lr=learning_rate(tc, state.step, total_steps),
                          grad_norm=norm,
                          wall_time=time.monotonic() - t0)
    finally:
        if fh:
            fh.close()
    return losses


def train_stage2(triplets: list, model: ComposedModel,
                 sched: DiffusionSchedule, tc: TrainConfig,
                 log_path: str | None = None) -> list:
    """Fine-tune the adapter with the backbone frozen."""
    steps_per_epoch = len(triplets) // tc.batch_size
    if steps_per_epoch == 0:
        raise ConfigError("triplet set smaller than one batch")
    total_steps = steps_per_epoch * tc.epochs
    state = OptimizerState.for_params(model.adapter)
    losses = []
    t0 = time.monotonic()
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(tc.epochs):
            order = stream(tc.seed, "shuffle2", epoch).permutation(len(triplets))
            for b in range(steps_per_epoch):
                batch = [triplets[i] for i in
                         order[b * tc.batch_size:(b + 1) * tc.batch_size]]
                step_rng = stream(tc.seed, "step2", state.step)
                loss, grads = stage2_loss(batch, model, sched, step_rng,
                                          tc.p_cfg)
                norm = optimizer_step(model.adapter, grads, state, tc,
                                      total_steps)
                losses.append(loss)
                _log_line(fh, step=state.step, loss=loss,
                          lr=learning_rate(tc, state.step, total_steps),
                          grad_norm=norm,
                          wall_time=time.monotonic() - t0)
    finally:
        if fh:
            fh.close()
    return losses
