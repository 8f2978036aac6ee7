"""Loss, regularization, Nesterov-momentum SGD, and the epoch loop.

Each frame's reconstruction error is the mean over its pixels of the
squared difference; :func:`mse_loss` reports the batch mean of that.
The training loop descends the batch *sum* of per-frame errors (the
classic SGD estimator of the total training loss), so gradient scale
per update does not shrink with batch size.  On top of that sits a
penalty over the weight matrices (biases excluded): a per-layer group-l2
term (sqrt of the sum of squares, summed over layers) and a global l1
term, each with its own coefficient defaulting to 0.0001.

The optimizer is classical Nesterov momentum: gradients are evaluated at
the lookahead point ``W + mu * v``, then ``v <- mu*v - alpha*g`` and
``W <- W + v``.  With ``mu = 0`` this reduces to plain SGD.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .network import ParamGrads, forward, backward

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    """Penalty coefficients; both default to the 0.0001 working value."""

    l2_coeff: float = 1e-4
    l1_coeff: float = 1e-4

    def __post_init__(self):
        if self.l2_coeff < 0 or self.l1_coeff < 0:
            raise ConfigError("regularization coefficients must be >= 0")


def mse_loss(outputs, targets):
    """Mean over batch and pixels of the squared difference."""
    o = np.asarray(outputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if o.shape != t.shape:
        raise ShapeError(f"outputs shape {o.shape} != targets shape {t.shape}")
    return float(np.mean((o - t) ** 2))


def mse_grad(outputs, targets):
    """Gradient of :func:`mse_loss` with respect to the outputs."""
    o = np.asarray(outputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if o.shape != t.shape:
        raise ShapeError(f"outputs shape {o.shape} != targets shape {t.shape}")
    return 2.0 * (o - t) / o.size


def batch_sum_mse_grad(outputs, targets):
    """Gradient of the summed per-frame pixel-mean errors (training objective)."""
    o = np.asarray(outputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if o.shape != t.shape:
        raise ShapeError(f"outputs shape {o.shape} != targets shape {t.shape}")
    return 2.0 * (o - t) / o[0].size


def regularization_terms(model):
    """Raw (group_l2, l1) penalty terms over the model's weight matrices."""
    group_l2 = 0.0
    l1 = 0.0
    for w in model.weight_arrays():
        group_l2 += float(np.sqrt(np.sum(w * w)))
        l1 += float(np.sum(np.abs(w)))
    return group_l2, l1


def regularization(model, cfg):
    """Weighted penalty: l2_coeff * sum_l ||W_l||_2 + l1_coeff * sum |W|."""
    group_l2, l1 = regularization_terms(model)
    return cfg.l2_coeff * group_l2 + cfg.l1_coeff * l1


def _add_regularization_grads(model, cfg, grads):
    """Accumulate penalty gradients into per-layer weight grads (not biases).

    The l1 subgradient at 0 is taken as 0; a zero layer norm contributes
    no group-l2 gradient.
    """
    if cfg.l2_coeff == 0 and cfg.l1_coeff == 0:
        return
    for p, g in zip(model.params, grads):
        if p is None:
            continue
        w = p.weights
        norm = float(np.sqrt(np.sum(w * w)))
        if cfg.l2_coeff and norm > 0:
            g.weights += (cfg.l2_coeff / norm) * w
        if cfg.l1_coeff:
            g.weights += cfg.l1_coeff * np.sign(w)


@dataclass
class OptimizerState:
    """Learning rate, momentum, and per-parameter velocity buffers."""

    learning_rate: float
    momentum: float
    velocity: list[np.ndarray]

    @classmethod
    def for_model(cls, model, learning_rate, momentum):
        vel = [np.zeros_like(a) for a in model.parameter_arrays()]
        return cls(learning_rate, momentum, vel)


def nesterov_update(params, grads, opt):
    """v <- mu*v - alpha*g; W <- W + v, over flat lists of arrays (in place)."""
    if len(grads) != len(opt.velocity) or len(grads) != len(params):
        raise ShapeError(
            f"gradient count {len(grads)} does not match parameter count {len(params)}"
        )
    for p, g, v in zip(params, grads, opt.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(
                f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}"
            )
        v *= opt.momentum
        v -= opt.learning_rate * g
        p += v


def nesterov_step(model, grads, opt):
    """Apply one momentum update to a model from per-layer gradient blocks.

    ``grads`` must have been evaluated at the lookahead point
    ``W + mu*v`` (the caller's contract); the training loop below does
    that.  Returns the updated model.
    """
    flat = []
    for g in grads:
        if g is not None:
            flat.append(g.weights)
            flat.append(g.bias)
    nesterov_update(model.parameter_arrays(), flat, opt)
    return model


@dataclass
class EarlyStopState:
    """Patience-based stopping that tracks the best validation loss seen."""

    patience: int = 10
    improvement_threshold: float = 0.995
    best_valid_loss: float = float("inf")
    best_epoch: int = 0
    best_params: list = field(default_factory=list)

    def update(self, epoch, valid_loss, model):
        if valid_loss < self.best_valid_loss:
            if valid_loss < self.best_valid_loss * self.improvement_threshold:
                self.patience = max(self.patience, 2 * epoch)
            self.best_valid_loss = valid_loss
            self.best_epoch = epoch
            self.best_params = [a.copy() for a in model.parameter_arrays()]

    def should_stop(self, epoch):
        return epoch >= self.patience

    def restore(self, model):
        for dst, src in zip(model.parameter_arrays(), self.best_params):
            dst[...] = src


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.975
    batch_size: int = 128
    max_epochs: int = 100
    loss: LossConfig = field(default_factory=LossConfig)
    shuffle_seed: int = 1
    validation_fraction: float = 0.1
    patience: int = 10
    improvement_threshold: float = 0.995


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    penalty: float


@dataclass
class TrainResult:
    model: object
    history: list[EpochStats]
    best_epoch: int
    best_valid_loss: float
    stopped_epoch: int


def _eval_mse(model, inputs, targets, batch_size):
    total = 0.0
    n = inputs.shape[0]
    for lo in range(0, n, batch_size):
        xb = inputs[lo : lo + batch_size]
        tb = targets[lo : lo + batch_size]
        out, _ = forward(model, xb)
        total += float(np.sum((out - tb) ** 2))
    return total / targets.size


def train(model, inputs, targets, config=None):
    """Mini-batch training with a seed-fixed validation split and early stop.

    ``inputs`` and ``targets`` are (n, maps, h, w) stacks.  The last 10%
    of the shuffled samples (at least one) become the validation split;
    the shuffle generator is seeded independently of weight init.  The
    returned model carries the parameters of the best validation epoch.
    """
    cfg = config or TrainConfig()
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"inputs shape {x.shape} != targets shape {y.shape}")
    n = x.shape[0]
    if n < 2:
        raise ConfigError("training needs at least 1 training and 1 validation sample")
    if cfg.max_epochs < 1:
        raise ConfigError(f"max_epochs must be >= 1, got {cfg.max_epochs}")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {cfg.batch_size}")
    if not 0 < cfg.validation_fraction < 1:
        raise ConfigError("validation_fraction must be in (0, 1)")

    rng = np.random.default_rng(cfg.shuffle_seed)
    perm = rng.permutation(n)
    n_valid = max(1, int(round(n * cfg.validation_fraction)))
    n_valid = min(n_valid, n - 1)
    train_idx = perm[: n - n_valid]
    valid_x = x[perm[n - n_valid :]]
    valid_y = y[perm[n - n_valid :]]

    opt = OptimizerState.for_model(model, cfg.learning_rate, cfg.momentum)
    stopper = EarlyStopState(
        patience=cfg.patience, improvement_threshold=cfg.improvement_threshold
    )
    params = model.parameter_arrays()
    history = []
    stopped_epoch = cfg.max_epochs
    for epoch in range(1, cfg.max_epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        sq_sum = 0.0
        count = 0
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            xb = x[idx]
            yb = y[idx]
            saved = [p.copy() for p in params]
            for p, v in zip(params, opt.velocity):
                p += cfg.momentum * v
            out, cache = forward(model, xb)
            batch_mse = float(np.mean((out - yb) ** 2))
            if not np.isfinite(batch_mse):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, batch {bi}"
                )
            grads = backward(model, cache, batch_sum_mse_grad(out, yb))
            _add_regularization_grads(model, cfg.loss, grads)
            for p, s in zip(params, saved):
                p[...] = s
            nesterov_step(model, grads, opt)
            sq_sum += batch_mse * yb.size
            count += yb.size
        train_mse = sq_sum / count
        valid_mse = _eval_mse(model, valid_x, valid_y, cfg.batch_size)
        if not np.isfinite(valid_mse):
            raise RuntimeError(f"non-finite validation loss at epoch {epoch}")
        penalty = regularization(model, cfg.loss)
        history.append(EpochStats(epoch, train_mse, valid_mse, penalty))
        log.info(
            "epoch %d: train_loss=%.6g valid_loss=%.6g penalty=%.6g",
            epoch, train_mse, valid_mse, penalty,
        )
        stopper.update(epoch, valid_mse, model)
        if stopper.should_stop(epoch):
            stopped_epoch = epoch
            log.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    stopper.restore(model)
    return TrainResult(
        model=model,
        history=history,
        best_epoch=stopper.best_epoch,
        best_valid_loss=stopper.best_valid_loss,
        stopped_epoch=stopped_epoch,
    )


def write_history_csv(history, path):
    """Loss history as CSV: epoch, train_loss, valid_loss, penalty."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,train_loss,valid_loss,penalty\n")
        for row in history:
            fh.write(
                f"{row.epoch},{float(row.train_loss)!r},"
                f"{float(row.valid_loss)!r},{float(row.penalty)!r}\n"
            )
    os.replace(tmp, path)
