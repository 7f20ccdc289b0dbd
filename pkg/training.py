"""
Training module for the SLAB transformer toolkit.

Toy-scale training protocol: AdamW with decoupled weight decay, a cosine
learning-rate schedule with linear warmup, droppath on residual branches
(set on the model, applied in its forward), label-smoothed cross entropy, a
PRepBN schedule that advances once per optimizer step, and a final phase that
freezes every learnable parameter and refreshes BatchNorm running statistics.
"""

import math
import logging
from fnmatch import fnmatchcase
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import ConfigError
from tensor_core import Tensor, ShapeMismatch, backward, log_softmax_lastdim, no_grad
from normalization import Mode, recalibrate_stats
from metrics_logger import MetricsLogger

logger = logging.getLogger(__name__)

REFERENCE_LR = 1e-3
REFERENCE_BATCH = 1024


class DivergedLoss(ArithmeticError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message: str, step: int, checkpoint_path: Optional[Path] = None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    """
    Optimization settings.

    ``base_lr`` defaults to 1e-3 scaled linearly from batch 1024 to
    ``batch_size``; ``prepbn_decay_steps`` defaults to the optimizer steps in
    the first 80% of training. ``no_decay`` lists parameter-name patterns
    (shell style, e.g. ``"*.bias"``) excluded from weight decay; every other
    parameter is decayed.
    """
    epochs: int = 30
    batch_size: int = 128
    base_lr: Optional[float] = None
    warmup_epochs: int = 2
    weight_decay: float = 0.05
    no_decay: List[str] = field(default_factory=list)
    droppath_rate: float = 0.0
    prepbn_decay_steps: Optional[int] = None
    recalib_epochs: int = 2
    label_smoothing: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    @property
    def lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return REFERENCE_LR * self.batch_size / REFERENCE_BATCH

    def validate(self) -> None:
        """
        Raises:
            ConfigError: Naming the offending [train] key
        """
        def fail(key: str, message: str):
            raise ConfigError(f"[train] {key}: {message}", "train", key)

        if self.epochs < 0:
            fail("epochs", f"must be non-negative, got {self.epochs}")
        if self.batch_size <= 0:
            fail("batch_size", f"must be positive, got {self.batch_size}")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            fail("warmup_epochs", f"must satisfy 0 <= warmup_epochs < epochs, got {self.warmup_epochs}")
        if self.lr < 0:
            fail("base_lr", f"must be non-negative, got {self.base_lr}")
        if self.weight_decay < 0:
            fail("weight_decay", f"must be non-negative, got {self.weight_decay}")
        if not 0.0 <= self.droppath_rate < 1.0:
            fail("droppath_rate", f"must be in [0, 1), got {self.droppath_rate}")
        if self.prepbn_decay_steps is not None and self.prepbn_decay_steps <= 0:
            fail("prepbn_decay_steps", f"must be positive, got {self.prepbn_decay_steps}")
        if self.recalib_epochs < 0:
            fail("recalib_epochs", f"must be non-negative, got {self.recalib_epochs}")
        if not 0.0 <= self.label_smoothing < 1.0:
            fail("label_smoothing", f"must be in [0, 1), got {self.label_smoothing}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            fail("beta1", "betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            fail("adam_eps", f"must be positive, got {self.adam_eps}")


@dataclass
class AdamWState:
    """Moment estimates and step count of the optimizer."""
    step: int = 0
    exp_avg: List[np.ndarray] = field(default_factory=list)
    exp_avg_sq: List[np.ndarray] = field(default_factory=list)


@dataclass
class TrainedArtifacts:
    """Result of a training run."""
    model: Any
    metrics: MetricsLogger
    gamma_trace: List[Tuple[int, float]] = field(default_factory=list)
    history: List[Dict[str, Any]] = field(default_factory=list)
    total_steps: int = 0
    decay_steps: Optional[int] = None
    test_loss: Optional[float] = None
    test_acc: Optional[float] = None
    recalibration: Optional[Dict[str, Any]] = None


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """
    Learning rate before optimizer step ``step``.

    Linear ramp from 0 to the base rate over the warmup steps, then a
    half-cosine from the base rate to 0 at the final step.
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    base = cfg.lr
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return base * step / warmup
    if total <= warmup:
        return base
    progress = min(1.0, (step - warmup) / (total - warmup))
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def decay_mask(names: Sequence[str], patterns: Sequence[str]) -> List[bool]:
    """True for every name that matches none of ``patterns``."""
    return [not any(fnmatchcase(name, p) for p in patterns) for name in names]


def optimizer_step(params: Sequence[Tensor], grads: Sequence[Optional[Union[Tensor, np.ndarray]]],
                   state: AdamWState, cfg: TrainConfig, lr: Optional[float] = None,
                   decay: Optional[Sequence[bool]] = None) -> None:
    """
    One AdamW update, in place on ``params``.

    Weight decay multiplies a parameter by ``1 - lr * wd`` separately from
    the gradient path. Every parameter is decayed unless ``decay`` marks it
    False. Parameters whose gradient is None are skipped.

    Raises:
        ShapeMismatch: If a gradient, moment or decay flag does not line up with its parameter
    """
    lr = cfg.lr if lr is None else lr
    if len(grads) != len(params):
        raise ShapeMismatch(f"{len(grads)} gradients for {len(params)} parameters")
    decay = [True] * len(params) if decay is None else list(decay)
    if len(decay) != len(params):
        raise ShapeMismatch(f"{len(decay)} decay flags for {len(params)} parameters")
    if not state.exp_avg:
        state.exp_avg = [np.zeros_like(p.data) for p in params]
        state.exp_avg_sq = [np.zeros_like(p.data) for p in params]
    if len(state.exp_avg) != len(params):
        raise ShapeMismatch(f"Optimizer state holds {len(state.exp_avg)} moments for {len(params)} parameters")

    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bias_correction1 = 1 - b1 ** t
    bias_correction2 = 1 - b2 ** t

    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        m, v = state.exp_avg[i], state.exp_avg_sq[i]
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"Parameter {i}: shape {p.shape}, gradient {g.shape}, moment {m.shape}")

        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g

        data = p.data
        if cfg.weight_decay and decay[i]:
            data = data * (1 - lr * cfg.weight_decay)
        update = (lr / bias_correction1) * m / (np.sqrt(v / bias_correction2) + cfg.adam_eps)
        p.data = np.ascontiguousarray((data - update).astype(p.dtype))


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross entropy of (B, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatch(f"labels must have shape ({b},), got {labels.shape}")
    target = np.full((b, k), smoothing / k, dtype=logits.dtype)
    target[np.arange(b), labels] += 1.0 - smoothing
    return -(log_softmax_lastdim(logits) * Tensor(target)).sum(axis=-1).mean()


def accuracy(logits: Union[Tensor, np.ndarray], labels: np.ndarray) -> float:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(np.argmax(data, axis=-1) == np.asarray(labels)))


def evaluate(model: Any, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> Tuple[float, float]:
    """
    Eval-mode mean cross entropy (no smoothing) and accuracy.

    Returns:
        Tuple of (loss, accuracy)
    """
    if len(x) == 0:
        raise ValueError("Cannot evaluate on an empty split")
    total_loss, correct = 0.0, 0.0
    with no_grad():
        for start in range(0, len(x), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            logits = model.forward(xb, mode=Mode.EVAL)
            total_loss += cross_entropy(logits, yb).item() * len(xb)
            correct += accuracy(logits, yb) * len(xb)
    return total_loss / len(x), correct / len(x)


def _reported_gamma(model: Any) -> float:
    """Blend weight for metrics: the PRepBN gamma, else 1 for token norms and 0 for BatchNorm."""
    g = model.gamma
    if g is not None:
        return g
    return 0.0 if model.has_batchnorm() else 1.0


def _snapshot(model: Any) -> Tuple[Dict[str, np.ndarray], Dict[str, Dict[str, Any]]]:
    return model.state_dict(), model.norm_states()


def _restore(model: Any, snapshot: Tuple[Dict[str, np.ndarray], Dict[str, Dict[str, Any]]]) -> None:
    model.load_state_dict(snapshot[0])
    model.restore_norm_states(snapshot[1])


def train(model: Any, data: Any, cfg: TrainConfig, metrics: Optional[MetricsLogger] = None,
          run_dir: Optional[Union[str, Path]] = None) -> TrainedArtifacts:
    """
    Train ``model`` on ``data`` and recalibrate its BatchNorm statistics.

    Every optimizer step logs (step, epoch, lr, gamma, loss); gamma is the
    blend weight used by that step, after which the PRepBN schedule advances.
    Each epoch ends with an evaluation on the test split. When training ends
    and the model holds BatchNorm statistics, ``recalib_epochs`` passes of
    calibrate-mode forwards refresh them with all parameters frozen.

    Args:
        model: SlabModel to train in place
        data: Dataset with ``batches`` and train/test arrays
        cfg: Optimization settings
        metrics: Metrics sink; a memory-only logger is created when None
        run_dir: Directory for the last-good checkpoint on divergence

    Returns:
        TrainedArtifacts with the gamma trace, per-epoch history and final test metrics

    Raises:
        ConfigError: If the settings are inconsistent with the data or model
        DivergedLoss: If the loss becomes non-finite
    """
    cfg.validate()
    metrics = metrics or MetricsLogger()
    artifacts = TrainedArtifacts(model=model, metrics=metrics)
    if cfg.epochs == 0:
        logger.info("epochs = 0: nothing to train")
        return artifacts

    steps_per_epoch = data.steps_per_epoch(cfg.batch_size)
    if steps_per_epoch == 0:
        raise ConfigError(f"[train] batch_size {cfg.batch_size} exceeds the {len(data)} training examples",
                          "train", "batch_size")
    total_steps = cfg.epochs * steps_per_epoch
    decay_steps = cfg.prepbn_decay_steps or max(1, int(0.8 * total_steps))
    if model.prepbn_states():
        if decay_steps > total_steps:
            raise ConfigError(f"[train] prepbn_decay_steps {decay_steps} exceeds the {total_steps} optimizer steps",
                              "train", "prepbn_decay_steps")
        model.set_decay_steps(decay_steps)
        artifacts.decay_steps = decay_steps
    model.set_droppath(cfg.droppath_rate)

    rng = np.random.default_rng(cfg.seed)
    named = model.named_parameters()
    params = list(named.values())
    decay = decay_mask(list(named), cfg.no_decay)
    opt_state = AdamWState()
    last_good = _snapshot(model)
    step = 0
    logger.info(f"Training {cfg.epochs} epochs x {steps_per_epoch} steps, base lr {cfg.lr:.3g}, "
                f"PRepBN decay steps {artifacts.decay_steps}")

    for epoch in range(cfg.epochs):
        losses, accs = [], []
        for xb, yb in data.batches(cfg.batch_size, rng, shuffle=True, drop_last=True):
            model.zero_grad()
            logits = model.forward(xb, mode=Mode.TRAIN, rng=rng)
            loss = cross_entropy(logits, yb, cfg.label_smoothing)
            loss_value = loss.item()

            if not math.isfinite(loss_value):
                _restore(model, last_good)
                saved = None
                if run_dir is not None:
                    from checkpoint import save_checkpoint
                    saved = save_checkpoint(model, Path(run_dir) / "last_good.slab", extra={"diverged_at": step})
                logger.error(f"Loss became {loss_value} at step {step}; restored last good state")
                raise DivergedLoss(f"Non-finite loss {loss_value} at step {step} (epoch {epoch})", step, saved)

            backward(loss)
            lr = lr_at(step, cfg, steps_per_epoch)
            optimizer_step(params, [p.grad for p in params], opt_state, cfg, lr, decay)

            g = _reported_gamma(model)
            metrics.log("step", step=step, epoch=epoch, lr=lr, gamma=g, loss=loss_value)
            artifacts.gamma_trace.append((step, g))
            model.advance_schedule()
            losses.append(loss_value)
            accs.append(accuracy(logits, yb))
            step += 1

        test_loss, test_acc = evaluate(model, data.x_test, data.y_test)
        record = metrics.log("epoch", epoch=epoch, loss=float(np.mean(losses)), train_acc=float(np.mean(accs)),
                             test_loss=test_loss, test_acc=test_acc,
                             gamma=_reported_gamma(model), lr=lr_at(step, cfg, steps_per_epoch))
        artifacts.history.append(record)
        last_good = _snapshot(model)

    artifacts.total_steps = step
    artifacts.test_loss, artifacts.test_acc = evaluate(model, data.x_test, data.y_test)

    if cfg.recalib_epochs > 0 and model.has_batchnorm():
        before = artifacts.test_loss
        recal_rng = np.random.default_rng(cfg.seed + 1)
        batches = recalibrate_stats(
            model, lambda: data.batches(cfg.batch_size, recal_rng, shuffle=True, drop_last=True), cfg.recalib_epochs
        )
        artifacts.test_loss, artifacts.test_acc = evaluate(model, data.x_test, data.y_test)
        artifacts.recalibration = metrics.log("recalibration", passes=cfg.recalib_epochs, batches=batches,
                                              test_loss_before=before, test_loss_after=artifacts.test_loss,
                                              test_acc=artifacts.test_acc)

    metrics.log("summary", total_steps=step, test_loss=artifacts.test_loss, test_acc=artifacts.test_acc,
                final_gamma=_reported_gamma(model))
    logger.info(f"Training finished: test loss {artifacts.test_loss:.4f}, test accuracy {artifacts.test_acc:.4f}")
    return artifacts
