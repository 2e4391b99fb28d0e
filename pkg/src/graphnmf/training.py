"""Unsupervised training of the learned-init and learned-acceleration models.

The loss is a discounted sum of the NMF objective over the unrolled
trajectory, most recent iterate weighted 1. Parameters are updated with AdamW
at batch size one under a per-epoch cosine schedule whose ceiling decays
geometrically across epochs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tape as tp
from .admm import loss_frob, nndsvd_init
from .factormer import ModelConfig, NFactormerParams
from .models import learned_accel, learned_init
from .tape import Tensor

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "init"
    epochs: int = 15
    lr0: float | None = None
    epoch_decay: float = 0.9
    gamma: float = 0.2
    weight_decay: float = 0.01
    seed: int = 0
    curriculum_period: int = 2
    max_acc_steps: int = 5
    grad_clip: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.model_kind not in ("init", "accel"):
            raise ValueError(f"model_kind must be 'init' or 'accel', got {self.model_kind!r}")
        if self.lr0 is None:
            object.__setattr__(self, "lr0", 1e-4 if self.model_kind == "init" else 1e-5)
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.epoch_decay <= 1:
            raise ValueError("epoch_decay must be in (0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.epochs < 1 or self.curriculum_period < 1 or self.max_acc_steps < 0:
            raise ValueError("epochs and curriculum_period must be >= 1, max_acc_steps >= 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class OptimizerState:
    first: list
    second: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params],
                   0, beta1, beta2, eps)


def discounted_loss(traj, V, gamma):
    """``sum_k gamma**k * loss(W[T-k], H[T-k], V)`` over a trajectory of length T+1.

    Returns a scalar Tensor when the iterates are Tensors, else a float.
    """
    T = len(traj.W) - 1
    if T < 0:
        raise ValueError("empty trajectory")
    if isinstance(traj.W[0], Tensor) or isinstance(traj.W[-1], Tensor):
        V_t = V if isinstance(V, Tensor) else Tensor(V)
        total = None
        for k in range(T + 1):
            W, H = traj.W[T - k], traj.H[T - k]
            W = W if isinstance(W, Tensor) else Tensor(W)
            H = H if isinstance(H, Tensor) else Tensor(H)
            R = tp.subtract(tp.matmul(W, tp.transpose(H)), V_t)
            term = tp.scale(tp.tsum(tp.multiply(R, R)), 0.5 * gamma ** k)
            total = term if total is None else tp.add(total, term)
        return total
    V = np.asarray(V)
    return sum(gamma ** k * loss_frob(traj.W[T - k], traj.H[T - k], V) for k in range(T + 1))


def adamw_step(params, grads, state: OptimizerState, lr, weight_decay):
    """In-place AdamW update with decoupled weight decay.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``
    """
    if len(params) != len(grads) or len(params) != len(state.first):
        raise ValueError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.first, state.second):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value -= lr * (update + weight_decay * p.value)
    return params, state


def lr_schedule(epoch, step_in_epoch, steps_per_epoch, cfg: TrainConfig):
    """Cosine decay from the epoch ceiling ``lr0 * decay**epoch`` to 0 over one epoch."""
    if steps_per_epoch < 1 or not 0 <= step_in_epoch <= steps_per_epoch or epoch < 0:
        raise ValueError("schedule indices out of range")
    ceiling = cfg.lr0 * cfg.epoch_decay ** epoch
    return ceiling * 0.5 * (1.0 + math.cos(math.pi * step_in_epoch / steps_per_epoch))


def curriculum(epoch, cfg: TrainConfig):
    """Number of acceleration steps used during ``epoch``."""
    return min(1 + epoch // cfg.curriculum_period, cfg.max_acc_steps)


def clip_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


@dataclass
class Sample:
    """A training matrix with its cached NNDSVD start."""

    name: str
    V: np.ndarray
    W0: np.ndarray
    H0: np.ndarray


def prepare(dataset, rank):
    """``[(name, V), ...]`` -> list of :class:`Sample` with NNDSVD starts."""
    out = []
    for name, V in dataset:
        W0, H0 = nndsvd_init(V, rank)
        out.append(Sample(name, np.asarray(V, dtype=np.float64), W0, H0))
    return out


def run_model(sample: Sample, params, model_cfg: ModelConfig, kind, nbr_acc=None, differentiable=False):
    if kind == "init":
        return learned_init(sample.W0, sample.H0, sample.V, params, model_cfg, differentiable)
    if nbr_acc is None:
        nbr_acc = model_cfg.outer_iters
    return learned_accel(sample.W0, sample.H0, sample.V, params, model_cfg, nbr_acc, differentiable)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)    # (epoch, step, lr, loss, nbr_acc)
    epochs: list = field(default_factory=list)   # (epoch, mean_train_loss, val_rmse, nbr_acc)


def train(dataset, params: NFactormerParams, cfg: TrainConfig, model_cfg: ModelConfig,
          val=None, on_epoch_end=None):
    """Train ``params`` in place and return ``(params, TrainLog)``.

    ``dataset`` and ``val`` are sequences of ``(name, V)`` or of
    :class:`Sample`. ``on_epoch_end(epoch, params, log)`` is called after each
    epoch (checkpointing hook).
    """
    samples = _as_samples(dataset, model_cfg.rank)
    if not samples:
        raise ValueError("training set is empty")
    val_samples = _as_samples(val, model_cfg.rank) if val else []
    plist = params.parameters()
    opt = OptimizerState.zeros_like(plist, cfg.beta1, cfg.beta2, cfg.eps)
    history = TrainLog()
    n = len(samples)
    for epoch in range(cfg.epochs):
        nbr_acc = curriculum(epoch, cfg) if cfg.model_kind == "accel" else 0
        nbr_acc = min(nbr_acc, model_cfg.outer_iters)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for step, idx in enumerate(order):
            sample = samples[idx]
            lr = lr_schedule(epoch, step, n, cfg)
            try:
                with tp.Tape() as tape:
                    traj = run_model(sample, params, model_cfg, cfg.model_kind, nbr_acc, differentiable=True)
                    loss = discounted_loss(traj, sample.V, cfg.gamma)
                grads = tp.backward(tape, loss)
            except (tp.NonFiniteError, ArithmeticError) as err:
                where = f"matrix {sample.name!r} (epoch {epoch}, step {step})"
                raise TrainingDivergence(f"non-finite values on {where}") from err
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDivergence(f"non-finite loss on matrix {sample.name!r} (epoch {epoch}, step {step})")
            g = [grads.get(p, np.zeros(p.shape)) for p in plist]
            if cfg.grad_clip is not None:
                g, _ = clip_global_norm(g, cfg.grad_clip)
            adamw_step(plist, g, opt, lr, cfg.weight_decay)
            losses.append(value)
            history.steps.append((epoch, step, lr, value, nbr_acc))
        val_rmse = evaluate(val_samples, params, model_cfg, cfg.model_kind, nbr_acc) if val_samples else float("nan")
        history.epochs.append((epoch, float(np.mean(losses)), val_rmse, nbr_acc))
        log.info("epoch %d: mean loss %.6g, val rmse %.6g, nbr_acc %d", epoch, np.mean(losses), val_rmse, nbr_acc)
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, history)
    return params, history


def evaluate(samples, params, model_cfg, kind, nbr_acc=None):
    """Mean RMSE of the final iterate over ``samples``."""
    values = [run_model(s, params, model_cfg, kind, nbr_acc).rmse[-1] for s in samples]
    return float(np.mean(values))


def _as_samples(data, rank):
    if data is None:
        return []
    data = list(data)
    if data and isinstance(data[0], Sample):
        return data
    return prepare(data, rank)
