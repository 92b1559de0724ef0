"""Losses, class balancing, Adam, LR plateau schedule, early stopping, epoch loop."""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .evaluation import pr_auc, pr_curve
from .model import ResNetConfig, ResNetModel, build_model

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
LOSS_KINDS = ("bce", "weighted_bce", "focal")


class TrainingError(ValueError):
    pass


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    kind: str = "bce"
    w_pos: float = 1.0
    w_neg: float = 1.0
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise TrainingError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.w_pos <= 0 or self.w_neg <= 0:
            raise TrainingError("class weights must be positive")
        if self.kind == "bce" and (self.w_pos != 1 or self.w_neg != 1):
            raise TrainingError("plain bce takes no class weights; use weighted_bce")
        if not 0 < self.alpha <= 1:
            raise TrainingError(f"focal alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise TrainingError(f"focal gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class EarlyStoppingConfig:
    enabled: bool = True
    monitor: str = "pr_auc"
    patience: int = 8
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.monitor != "pr_auc":
            raise TrainingError("early stopping monitors validation pr_auc only")
        if self.patience < 1:
            raise TrainingError("early stopping patience must be >= 1")


@dataclass(frozen=True)
class PlateauConfig:
    enabled: bool = True
    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-5
    min_delta: float = 1e-4

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise TrainingError(f"plateau factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise TrainingError("plateau patience must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 80
    learning_rate: float = 1e-3
    loss: LossSpec = field(default_factory=LossSpec)
    oversample: bool = True
    class_weighting: bool = True
    early_stopping: EarlyStoppingConfig = field(default_factory=EarlyStoppingConfig)
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainingError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if not 0 < self.validation_fraction < 1:
            raise TrainingError("validation_fraction must be in (0, 1)")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_pr_auc: float
    val_recall: float
    lr: float
    seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def _check_pair(p: Tensor, y) -> np.ndarray:
    y = np.asarray(y, dtype=p.dtype)
    if p.shape != y.shape or p.data.ndim != 1:
        raise TrainingError(f"probabilities {p.shape} and labels {y.shape} must be equal-length vectors")
    if p.size == 0:
        raise TrainingError("empty batch")
    return y


def _sample_weights(y: np.ndarray, w_pos: float, w_neg: float) -> np.ndarray:
    return np.where(y > 0.5, w_pos, w_neg).astype(y.dtype)


def weighted_bce_loss(p: Tensor, y, w_pos: float = 1.0, w_neg: float = 1.0) -> Tensor:
    """Mean of ``-(w_pos y ln p + w_neg (1 - y) ln(1 - p))`` with p clamped to [1e-7, 1 - 1e-7]."""
    if w_pos <= 0 or w_neg <= 0:
        raise TrainingError("class weights must be positive")
    y = _check_pair(p, y)
    n = p.size
    inside = (p.data >= PROB_CLAMP) & (p.data <= 1 - PROB_CLAMP)
    pc = np.clip(p.data, PROB_CLAMP, 1 - PROB_CLAMP)
    per = -(w_pos * y * np.log(pc) + w_neg * (1 - y) * np.log1p(-pc))
    value = np.asarray(per.mean(), dtype=p.dtype)

    def back(g):
        d = -(w_pos * y / pc) + w_neg * (1 - y) / (1 - pc)
        return (g * d * inside / n,)

    return ag.apply(value, (p,), back)


def bce_loss(p: Tensor, y) -> Tensor:
    return weighted_bce_loss(p, y, 1.0, 1.0)


def focal_loss(p: Tensor, y, alpha: float = 0.25, gamma: float = 2.0,
               sample_weights: np.ndarray | None = None) -> Tensor:
    """Mean of ``-alpha (1 - p_t)^gamma ln p_t`` where ``p_t`` is the probability of the true class."""
    if not 0 < alpha <= 1 or gamma < 0:
        raise TrainingError("focal loss needs alpha in (0, 1] and gamma >= 0")
    y = _check_pair(p, y)
    n = p.size
    sw = np.ones_like(y) if sample_weights is None else np.asarray(sample_weights, dtype=p.dtype)
    inside = (p.data >= PROB_CLAMP) & (p.data <= 1 - PROB_CLAMP)
    pc = np.clip(p.data, PROB_CLAMP, 1 - PROB_CLAMP)
    pt = y * pc + (1 - y) * (1 - pc)
    q = 1 - pt
    log_pt = np.log(pt)
    per = -alpha * sw * q**gamma * log_pt
    value = np.asarray(per.mean(), dtype=p.dtype)

    def back(g):
        d_pt = q**gamma / pt
        if gamma != 0:
            d_pt = d_pt - gamma * q ** (gamma - 1) * log_pt
        d = -alpha * sw * d_pt * (2 * y - 1)
        return (g * d * inside / n,)

    return ag.apply(value, (p,), back)


def loss_for(spec: LossSpec, p: Tensor, y, w_pos: float = 1.0, w_neg: float = 1.0) -> Tensor:
    """Loss as configured; ``w_pos``/``w_neg`` are class weights from balancing, if any."""
    if spec.kind == "weighted_bce":
        return weighted_bce_loss(p, y, spec.w_pos * w_pos, spec.w_neg * w_neg)
    if spec.kind == "bce":
        if w_pos == 1 and w_neg == 1:
            return bce_loss(p, y)
        return weighted_bce_loss(p, y, w_pos, w_neg)
    sw = None
    if w_pos != 1 or w_neg != 1:
        sw = _sample_weights(np.asarray(y, dtype=p.dtype), w_pos, w_neg)
    return focal_loss(p, y, spec.alpha, spec.gamma, sw)


# --------------------------------------------------------------------------
# Class balancing
# --------------------------------------------------------------------------


def compute_class_weights(n_pos: int, n_neg: int) -> tuple[float, float]:
    """Inverse-frequency weights ``(n_pos + n_neg) / (2 n_c)`` for (apnea, non-apnea)."""
    if n_pos < 1 or n_neg < 1:
        raise TrainingError(f"both classes need at least one sample, got ({n_pos}, {n_neg})")
    # Naive division leaves w_pos * n_pos and w_neg * n_neg an ulp apart for
    # about one pair in six. Writing w_pos = a c, w_neg = b c with a : b the
    # reduced ratio n_neg : n_pos, and rounding c so both products with a and
    # b are exact doubles, makes the two weighted counts the same real number
    # and hence the same double. The weights stay within 2^-(53 - bits) of
    # the formula.
    g = math.gcd(n_pos, n_neg)
    a, b = n_neg // g, n_pos // g
    bits = 53 - max(a.bit_length(), b.bit_length())
    if bits < 1:
        raise TrainingError(f"class counts too large for exact weights: ({n_pos}, {n_neg})")
    mant, exp = math.frexp((n_pos + n_neg) / (2 * n_pos * a))
    c = math.ldexp(round(math.ldexp(mant, bits)), exp - bits)
    return a * c, b * c


def oversample(labels, rng: np.random.Generator) -> np.ndarray:
    """Every index once, plus minority indices drawn with replacement until
    both classes are equally represented; returned in shuffled order."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise TrainingError("oversampling needs both classes present")
    minority, majority = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    extra = rng.choice(minority, size=len(majority) - len(minority), replace=True)
    return rng.permutation(np.concatenate([np.arange(len(labels)), extra]))


def stratified_split(labels, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(train_idx, val_idx) with ``round(fraction * n_c)`` (at least 1) per class held out."""
    labels = np.asarray(labels)
    train, val = [], []
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        k = max(1, int(round(fraction * len(idx))))
        if len(idx) < 2:
            raise TrainingError(f"class {cls} has {len(idx)} samples; need 2 for a validation split")
        val.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


# --------------------------------------------------------------------------
# Optimisation and schedules
# --------------------------------------------------------------------------


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float):
    """One in-place Adam update with bias correction. Missing grads count as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise TrainingError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise TrainingError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


@dataclass
class PlateauState:
    lr: float
    best: float = -math.inf
    wait: int = 0


def reduce_lr_on_plateau(metric: float, state: PlateauState, factor: float = 0.5,
                         patience: int = 3, min_lr: float = 1e-5, min_delta: float = 1e-4) -> float:
    """Feed one epoch's metric (higher is better); returns the learning rate to use next."""
    if not 0 < factor < 1:
        raise TrainingError("plateau factor must be in (0, 1)")
    if metric > state.best + min_delta:
        state.best = metric
        state.wait = 0
    else:
        state.wait += 1
        if state.wait >= patience:
            state.lr = max(state.lr * factor, min_lr)
            state.wait = 0
    return state.lr


@dataclass
class EarlyStoppingState:
    best: float = -math.inf
    best_epoch: int = 0
    wait: int = 0
    stopped: bool = False


def early_stopping_update(metric: float, epoch: int, state: EarlyStoppingState,
                          patience: int = 8, min_delta: float = 1e-4) -> tuple[str, int]:
    """Returns ``("continue", best_epoch)`` or ``("stop", best_epoch)``; epochs count from 1."""
    if patience < 1:
        raise TrainingError("patience must be >= 1")
    if metric > state.best + min_delta:
        state.best = metric
        state.best_epoch = epoch
        state.wait = 0
    else:
        state.wait += 1
        if state.wait >= patience:
            state.stopped = True
            return "stop", state.best_epoch
    return "continue", state.best_epoch


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ResNetModel
    history: list[EpochLog]
    best_epoch: int
    class_weights: tuple[float, float]
    train_counts: dict[str, int]
    balanced_counts: dict[str, int]
    train_indices: np.ndarray
    val_indices: np.ndarray


def derive_seed(seed: int, name: str) -> int:
    """Stable child seed for a named sub-run."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def recall_at(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    pos = labels == 1
    return float((scores[pos] >= threshold).mean()) if pos.any() else 0.0


def train(x: np.ndarray, y: np.ndarray, config: TrainConfig = TrainConfig(),
          model_config: ResNetConfig = ResNetConfig()) -> TrainResult:
    """Fit a fresh model on spectrograms ``x`` (N, H, W) with binary labels ``y``.

    A stratified validation slice is held out before any balancing and drives
    the plateau schedule and early stopping (validation PR-AUC). Class weights
    are taken from the training slice before oversampling.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise TrainingError("x and y differ in length")
    if len(np.unique(y)) < 2:
        raise TrainingError("training data must contain both classes")

    seeds = np.random.SeedSequence(config.seed).spawn(5)
    split_rng, init_rng, balance_rng, shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in seeds)

    train_idx, val_idx = stratified_split(y, config.validation_fraction, split_rng)
    assert not set(train_idx) & set(val_idx)
    y_tr = y[train_idx]
    n_pos, n_neg = int((y_tr == 1).sum()), int((y_tr == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise TrainingError("training slice lost a class to validation")
    w_pos, w_neg = compute_class_weights(n_pos, n_neg) if config.class_weighting else (1.0, 1.0)

    order = oversample(y_tr, balance_rng) if config.oversample else np.arange(len(train_idx))
    epoch_idx = train_idx[order]
    balanced = {"apnea": int((y[epoch_idx] == 1).sum()), "non_apnea": int((y[epoch_idx] == 0).sum())}
    log.info("training on %d samples %s, validating on %d, class weights (%.4g, %.4g)",
             len(epoch_idx), balanced, len(val_idx), w_pos, w_neg)

    model = build_model(model_config, init_rng)
    names = list(model.params)
    params = [model.params[k].data for k in names]
    adam = AdamState.zeros_like(params)
    plateau = PlateauState(lr=config.learning_rate)
    stopper = EarlyStoppingState()
    best = None
    history: list[EpochLog] = []
    lr = config.learning_rate
    x_val, y_val = x[val_idx], y[val_idx]

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        perm = shuffle_rng.permutation(epoch_idx)
        total = 0.0
        for lo in range(0, len(perm), config.batch_size):
            batch = perm[lo:lo + config.batch_size]
            model.zero_grad()
            with Tape() as tape:
                probs = model.forward(x[batch], "train", dropout_rng)
                loss = loss_for(config.loss, probs, y[batch], w_pos, w_neg)
            tape.backward(loss)
            adam_step(params, [model.params[k].grad for k in names], adam, lr)
            total += loss.item() * len(batch)

        scores = model.predict(x_val)
        val_auc = pr_auc(pr_curve(scores, y_val))
        entry = EpochLog(epoch, total / len(perm), val_auc, recall_at(scores, y_val), lr,
                         time.perf_counter() - started)
        history.append(entry)
        log.info("epoch %d loss %.4f val_pr_auc %.4f val_recall %.3f lr %.2g",
                 epoch, entry.train_loss, val_auc, entry.val_recall, lr)

        if config.early_stopping.enabled:
            decision, best_epoch = early_stopping_update(
                val_auc, epoch, stopper, config.early_stopping.patience, config.early_stopping.min_delta)
            if best_epoch == epoch:
                best = model.snapshot()
            if decision == "stop":
                log.info("early stop at epoch %d, restoring epoch %d", epoch, best_epoch)
                break
        if config.plateau.enabled:
            p = config.plateau
            lr = reduce_lr_on_plateau(val_auc, plateau, p.factor, p.patience, p.min_lr, p.min_delta)

    best_epoch = history[-1].epoch
    if config.early_stopping.enabled and best is not None:
        model.restore(best)
        best_epoch = stopper.best_epoch
    return TrainResult(model, history, best_epoch, (w_pos, w_neg),
                       {"apnea": n_pos, "non_apnea": n_neg}, balanced, train_idx, val_idx)


def without_regularization(config: TrainConfig, model_config: ResNetConfig):
    return (replace(config, early_stopping=replace(config.early_stopping, enabled=False),
                    plateau=replace(config.plateau, enabled=False)),
            replace(model_config, dropout_rate=0.0))
