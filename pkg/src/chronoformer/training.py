"""Optimisation: warm-up schedule, gradient clipping, Adam, training and forecasting loops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import tensor as T
from .blocks import Batch, Transformer
from .errors import ConfigError, ContractError, DimensionError, DivergenceError, NumericError
from .initializers import xavier_init  # noqa: F401  (re-exported)
from .tensor import Tensor

LOG_HEADER = "step,lr,loss,grad_norm,clip_scale"


@dataclass(frozen=True)
class Schedule:
    """``base_lr * min(n / N, sqrt(N / n))``; ``warmup`` of 0 or None keeps the rate constant."""

    base_lr: float = 1e-3
    warmup: int | None = 400

    def __post_init__(self):
        if not self.base_lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.base_lr}")
        if self.warmup is not None and self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")

    def lr(self, n: int) -> float:
        return warmup_lr(n, self)


def warmup_lr(n: int, sched: Schedule) -> float:
    if n < 1:
        raise ContractError(f"schedule steps start at 1, got {n}")
    if not sched.warmup:
        return sched.base_lr
    N = sched.warmup
    return sched.base_lr * min(n / N, math.sqrt(N / n))


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_grad_norm(grads, max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the factor applied (1.0 when nothing was clipped).
    """
    if not max_norm > 0:
        raise ConfigError(f"clip threshold must be positive, got {max_norm}")
    grads = list(grads)
    g = global_norm(grads)
    if g <= max_norm:
        return 1.0
    scale = max_norm / g
    for grad in grads:
        grad *= scale
    return scale


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], opt: OptimState, lr: float) -> None:
    """One bias-corrected Adam update of every parameter, in place."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for {', '.join(missing[:5])}")
    opt.step += 1
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    for name, p in params.items():
        g = p.grad
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.values)
            opt.v[name] = np.zeros_like(p.values)
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


@dataclass(frozen=True)
class LogRow:
    step: int
    lr: float
    loss: float
    grad_norm: float
    clip_scale: float

    def csv(self) -> str:
        return ",".join(
            [str(self.step)] + [format(x, ".17g") for x in (self.lr, self.loss, self.grad_norm, self.clip_scale)]
        )


@dataclass
class TrainState:
    model: Transformer
    schedule: Schedule = field(default_factory=Schedule)
    clip: float | None = 1.0
    seed: int = 0
    opt: OptimState = field(default_factory=OptimState)
    history: list[float] = field(default_factory=list)
    log: list[LogRow] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.opt.step


def compute_loss(model: Transformer, batch: Batch) -> Tensor:
    """Mean squared error for regression, mean cross-entropy for classification."""
    if model.config.head == "classification":
        if batch.labels is None:
            raise ContractError("classification batches need labels")
        logits = model.forward(batch, logits=True)
        labels = np.asarray(batch.labels, dtype=np.intp)
        onehot = np.zeros(logits.shape)
        onehot[np.arange(labels.size), labels] = 1.0
        return T.scale(T.sum(T.mul(T.log_softmax_rows(logits), onehot)), -1.0 / labels.size)
    if batch.targets is None:
        raise ContractError("regression batches need targets")
    pred = model.forward(batch)
    target = batch.targets[:, : pred.shape[1]]
    if target.shape != pred.shape:
        raise DimensionError(f"targets {batch.targets.shape} do not cover predictions {pred.shape}")
    return T.mean(T.mul(T.sub(pred, target), T.sub(pred, target)))


def train_step(state: TrainState, batch: Batch) -> float:
    """Forward, loss, backward, clip, scheduled Adam update.  Returns the loss."""
    model = state.model
    step = state.opt.step + 1
    model.zero_grad()
    try:
        loss = compute_loss(model, batch)
    except NumericError:
        raise DivergenceError(step, float("nan")) from None
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(step, value)
    T.backward(loss)
    grads = [p.grad for p in model.params.values() if p.grad is not None]
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise DivergenceError(step, value)
    scale = clip_grad_norm(grads, state.clip) if state.clip else 1.0
    lr = state.schedule.lr(step)
    adam_step(model.params, state.opt, lr)
    state.history.append(value)
    state.log.append(LogRow(step, lr, value, norm, scale))
    return value


class BatchSampler:
    """Seeded reshuffle-per-epoch index batches."""

    def __init__(self, n: int, batch_size: int, seed: int = 0):
        if n < 1:
            raise ContractError("cannot sample batches from an empty dataset")
        if batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {batch_size}")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.intp)

    def next(self) -> np.ndarray:
        if self._order.size < self.batch_size:
            self._order = self.rng.permutation(self.n)
        idx, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return np.sort(idx)


def train(
    state: TrainState,
    dataset,
    steps: int,
    batch_size: int = 16,
    on_step: Callable[[LogRow], None] | None = None,
) -> TrainState:
    """Run ``steps`` updates on batches drawn from ``dataset`` (anything with ``len`` and ``batch(indices)``)."""
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    sampler = BatchSampler(len(dataset), batch_size, state.seed)
    for _ in range(steps):
        train_step(state, dataset.batch(sampler.next()))
        if on_step is not None:
            on_step(state.log[-1])
    return state


def write_log(fh: TextIO, rows) -> None:
    fh.write(LOG_HEADER + "\n")
    for row in rows:
        fh.write(row.csv() + "\n")


def autoregressive_forecast(model: Transformer, batch: Batch, H: int) -> np.ndarray:
    """Predict ``H`` steps ``(B, H, v_out)``.

    One-shot configs emit every step from one pass; autoregressive configs
    append each prediction to the decoder input and run again.
    """
    if H < 1:
        raise ContractError(f"forecast horizon must be >= 1, got {H}")
    cfg = model.config
    if not cfg.n_decoders or cfg.decoding == "one_shot":
        return model.forward(batch, mode="one_shot", horizon=H).values
    tokens = batch.inputs[:, -1:, : cfg.output_width]
    steps = []
    for _ in range(H):
        nxt = model.forward(batch, tokens=tokens).values[:, -1:]
        steps.append(nxt)
        tokens = np.concatenate([tokens, nxt], axis=1)
    return np.concatenate(steps, axis=1)
