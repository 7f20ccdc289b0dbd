"""
Normalization module for the SLAB transformer toolkit.

Provides LayerNorm and RMSNorm (online, per-token statistics), BatchNorm
(offline, running statistics), RepBN (BatchNorm plus a learnable per-channel
identity weight), the progressive PRepBN blend with its gamma decay
schedules, and the inference-time chain that rewrites a RepBN into a plain
BatchNorm and folds that BatchNorm into the following linear layer.

Running statistics are stored as non-learnable tensors next to the learnable
affine parameters so model state can be serialized uniformly.
"""

import math
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Iterable, Optional, Tuple, Union

import numpy as np

from tensor_core import Tensor, ShapeMismatch, reduce_moments, no_grad

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


class BatchTooSmall(ValueError):
    """Raised when train-mode BatchNorm sees fewer than two values per channel."""
    pass


class EmptyStream(ValueError):
    """Raised when a recalibration pass receives no batches."""
    pass


class NotConverged(ValueError):
    """Raised when an operation needs a fully transitioned PRepBN (gamma == 0)."""

    def __init__(self, message: str, gamma: Optional[float] = None):
        super().__init__(message)
        self.gamma = gamma


class Mode(Enum):
    """Forward-pass mode for normalization layers."""
    TRAIN = "train"
    EVAL = "eval"
    CALIBRATE = "calibrate"  # batch statistics, running-stat updates, no stochastic layers


class Schedule(Enum):
    """Decay schedule for the PRepBN blend weight."""
    LINEAR = "linear"
    COSINE = "cosine"
    STEP = "step"


ModeLike = Union[Mode, str]


def as_mode(mode: ModeLike) -> Mode:
    return mode if isinstance(mode, Mode) else Mode(mode)


def _vector(values: Any, channels: int, fill: float, dtype: Any, learnable: bool) -> Tensor:
    if values is None:
        values = np.full(channels, fill, dtype=dtype)
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=learnable)


@dataclass
class LNParams:
    """Per-token affine for LayerNorm / RMSNorm."""
    scale: Tensor
    shift: Tensor
    eps: float = DEFAULT_EPS

    @classmethod
    def create(cls, channels: int, dtype: Any = np.float32, eps: float = DEFAULT_EPS) -> "LNParams":
        return cls(_vector(None, channels, 1.0, dtype, True), _vector(None, channels, 0.0, dtype, True), eps)

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def validate(self) -> None:
        if self.scale.shape != self.shift.shape or self.scale.ndim != 1:
            raise ShapeMismatch(f"LayerNorm scale {self.scale.shape} and shift {self.shift.shape} must be equal 1-D")
        if self.eps <= 0:
            raise ValueError(f"LayerNorm eps must be positive, got {self.eps}")


@dataclass
class BNParams:
    """
    BatchNorm parameters and running statistics.

    ``alpha``/``beta`` are learnable; ``running_mean``/``running_var`` are
    updated only by train or calibrate mode forwards.
    """
    alpha: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = DEFAULT_MOMENTUM
    eps: float = DEFAULT_EPS

    @classmethod
    def create(cls, channels: int, dtype: Any = np.float32, momentum: float = DEFAULT_MOMENTUM,
               eps: float = DEFAULT_EPS) -> "BNParams":
        return cls(
            alpha=_vector(None, channels, 1.0, dtype, True),
            beta=_vector(None, channels, 0.0, dtype, True),
            running_mean=_vector(None, channels, 0.0, dtype, False),
            running_var=_vector(None, channels, 1.0, dtype, False),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        """sqrt(running_var + eps), the standard deviation used in eval mode."""
        return np.sqrt(self.running_var.data + np.asarray(self.eps, dtype=self.running_var.dtype))

    def validate(self) -> None:
        c = self.channels
        for name in ("alpha", "beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ShapeMismatch(f"BatchNorm {name} must have shape ({c},), got {getattr(self, name).shape}")
        if np.any(self.running_var.data < 0):
            raise ValueError("BatchNorm running_var must be non-negative")
        if not 0 < self.momentum <= 1:
            raise ValueError(f"BatchNorm momentum must be in (0, 1], got {self.momentum}")
        if self.eps < 0:
            raise ValueError(f"BatchNorm eps must be non-negative, got {self.eps}")


@dataclass
class RepBNParams:
    """BatchNorm plus a per-channel identity weight eta."""
    bn: BNParams
    eta: Tensor

    @classmethod
    def create(cls, channels: int, dtype: Any = np.float32, learn_eta: bool = True) -> "RepBNParams":
        return cls(BNParams.create(channels, dtype), _vector(None, channels, 0.0, dtype, learn_eta))


@dataclass
class FusedAffine:
    """Per-channel affine ``y = a * x + b`` equal to an eval-mode BatchNorm."""
    a: np.ndarray
    b: np.ndarray

    @classmethod
    def from_bn(cls, p: BNParams) -> "FusedAffine":
        a = p.alpha.data / p.sigma
        return cls(a=a, b=p.beta.data - a * p.running_mean.data)

    def apply(self, x: Tensor) -> Tensor:
        return x * Tensor(self.a) + Tensor(self.b)


@dataclass
class PRepBNState:
    """
    Progressive LayerNorm -> RepBN blend.

    ``current_step`` counts optimizer steps taken so far; the blend weight
    gamma is derived from it and ``total_steps`` by the configured schedule.
    """
    ln: LNParams
    repbn: RepBNParams
    total_steps: int
    current_step: int = 0
    schedule: Schedule = Schedule.LINEAR
    ln_kind: str = "layernorm"

    def __post_init__(self):
        self.schedule = Schedule(self.schedule)
        if self.total_steps <= 0:
            raise ValueError(f"PRepBN total_steps must be positive, got {self.total_steps}")
        if self.current_step < 0:
            raise ValueError(f"PRepBN current_step must be non-negative, got {self.current_step}")
        if self.ln_kind not in ("layernorm", "rmsnorm"):
            raise ValueError(f"ln_kind must be 'layernorm' or 'rmsnorm', got {self.ln_kind}")

    @property
    def gamma(self) -> float:
        return gamma(self)

    def advance(self, steps: int = 1) -> None:
        self.current_step += steps


def layernorm(x: Tensor, p: LNParams) -> Tensor:
    """
    Normalize every token over its feature axis, then apply scale and shift.

    Raises:
        ShapeMismatch: If the last extent differs from the parameter width
    """
    if x.shape[-1] != p.channels:
        raise ShapeMismatch(f"layernorm expects feature width {p.channels}, got input {x.shape}")
    mean, var = reduce_moments(x, -1, keepdims=True)
    return (x - mean) / (var + p.eps).sqrt() * p.scale + p.shift


def rmsnorm(x: Tensor, p: LNParams) -> Tensor:
    """Root-mean-square variant of layernorm (no mean subtraction)."""
    if x.shape[-1] != p.channels:
        raise ShapeMismatch(f"rmsnorm expects feature width {p.channels}, got input {x.shape}")
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / (ms + p.eps).sqrt() * p.scale + p.shift


def _token_norm(x: Tensor, p: LNParams, ln_kind: str) -> Tensor:
    return rmsnorm(x, p) if ln_kind == "rmsnorm" else layernorm(x, p)


def batchnorm(x: Tensor, p: BNParams, mode: ModeLike = Mode.EVAL) -> Tensor:
    """
    BatchNorm over every axis except the trailing feature axis.

    Train and calibrate modes normalize with batch statistics (population
    variance) and move the running statistics towards them with an
    exponential moving average; eval mode uses the running statistics only.

    Raises:
        ShapeMismatch: If the feature width differs from the parameters
        BatchTooSmall: In train/calibrate mode when fewer than two values per channel
    """
    mode = as_mode(mode)
    if x.shape[-1] != p.channels:
        raise ShapeMismatch(f"batchnorm expects feature width {p.channels}, got input {x.shape}")

    if mode is Mode.EVAL:
        return (x - Tensor(p.running_mean.data)) / Tensor(p.sigma) * p.alpha + p.beta

    axes = tuple(range(x.ndim - 1))
    count = int(np.prod(x.shape[:-1]))
    if count < 2:
        raise BatchTooSmall(f"batchnorm in {mode.value} mode needs at least 2 values per channel, got {count}")

    mean, var = reduce_moments(x, axes, keepdims=False)
    m = np.asarray(p.momentum, dtype=p.running_mean.dtype)
    p.running_mean.data = ((1 - m) * p.running_mean.data + m * mean.data).astype(p.running_mean.dtype)
    p.running_var.data = ((1 - m) * p.running_var.data + m * var.data).astype(p.running_var.dtype)

    return (x - mean) / (var + p.eps).sqrt() * p.alpha + p.beta


def repbn(x: Tensor, p: RepBNParams, mode: ModeLike = Mode.EVAL) -> Tensor:
    """BatchNorm(x) + eta * x."""
    return batchnorm(x, p.bn, mode) + x * p.eta


def reparam_repbn_to_bn(p: RepBNParams) -> BNParams:
    """
    Rewrite an eval-mode RepBN as a single BatchNorm.

    With sigma = sqrt(running_var + eps), the returned parameters are
    alpha' = alpha + eta * sigma and beta' = beta + eta * mu; running
    statistics, momentum and eps are carried over unchanged.
    """
    bn = p.bn
    eta = p.eta.data
    alpha = bn.alpha.data + eta * bn.sigma
    beta = bn.beta.data + eta * bn.running_mean.data
    return BNParams(
        alpha=Tensor(alpha.astype(bn.alpha.dtype), requires_grad=bn.alpha.requires_grad),
        beta=Tensor(beta.astype(bn.beta.dtype), requires_grad=bn.beta.requires_grad),
        running_mean=Tensor(bn.running_mean.data.copy()),
        running_var=Tensor(bn.running_var.data.copy()),
        momentum=bn.momentum,
        eps=bn.eps,
    )


def gamma(state: PRepBNState) -> float:
    """
    Blend weight of the LayerNorm branch at the state's current step.

    All schedules give 1 at step 0, 0 from step ``total_steps`` on, and never
    increase in between.
    """
    t, total = state.current_step, state.total_steps
    if t >= total:
        return 0.0
    if state.schedule is Schedule.LINEAR:
        value = (total - t) / total
    elif state.schedule is Schedule.COSINE:
        value = 0.5 * (1.0 + math.cos(math.pi * t / total))
    else:
        value = 1.0 if 2 * t < total else 0.0
    return min(1.0, max(0.0, value))


def prepbn(x: Tensor, state: PRepBNState, mode: ModeLike = Mode.EVAL, optimizer_step: bool = False) -> Tensor:
    """
    gamma * LN(x) + (1 - gamma) * RepBN(x).

    In eval mode a branch with zero weight is skipped. Train and calibrate
    modes always run the RepBN branch so its running statistics keep
    tracking the data during the blend.

    Args:
        x: Input of shape (..., C)
        state: PRepBN parameters and schedule position
        mode: Forward mode
        optimizer_step: In train mode, advance the schedule by one step after this forward
    """
    mode = as_mode(mode)
    g = state.gamma

    if mode is Mode.EVAL and g == 1.0:
        out = _token_norm(x, state.ln, state.ln_kind)
    elif mode is Mode.EVAL and g == 0.0:
        out = repbn(x, state.repbn, mode)
    else:
        rep = repbn(x, state.repbn, mode)
        ln = _token_norm(x, state.ln, state.ln_kind)
        out = ln * g + rep * (1.0 - g)

    if optimizer_step and mode is Mode.TRAIN:
        state.advance()
    return out


def fuse_bn_into_linear(p: BNParams, w: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Fold an eval-mode BatchNorm into the linear layer that consumes it.

    For ``y = BN(x) @ w + b`` returns ``(w', b')`` with ``y = x @ w' + b'``,
    where ``w' = diag(a) @ w`` and ``b' = c @ w + b`` for the BatchNorm affine
    ``a = alpha / sigma``, ``c = beta - a * mu``.

    Args:
        p: BatchNorm parameters (running statistics frozen)
        w: Weight of shape (C, D)
        b: Bias of shape (D,)

    Returns:
        Tuple of fused (weight, bias) tensors
    """
    w_data = w.data if isinstance(w, Tensor) else np.asarray(w)
    b_data = b.data if isinstance(b, Tensor) else np.asarray(b)
    if w_data.ndim != 2 or w_data.shape[0] != p.channels:
        raise ShapeMismatch(f"Cannot fold BatchNorm of width {p.channels} into weight {w_data.shape}")
    if b_data.shape != (w_data.shape[1],):
        raise ShapeMismatch(f"Bias {b_data.shape} does not match weight {w_data.shape}")

    affine = FusedAffine.from_bn(p)
    w_fused = (affine.a[:, None] * w_data).astype(w_data.dtype)
    b_fused = (affine.b @ w_data + b_data).astype(b_data.dtype)
    return Tensor(w_fused, requires_grad=getattr(w, "requires_grad", False)), \
        Tensor(b_fused, requires_grad=getattr(b, "requires_grad", False))


def _iter_batches(data_stream: Union[Callable[[], Iterable[Any]], Iterable[Any]]) -> Iterable[Any]:
    return data_stream() if callable(data_stream) else data_stream


def recalibrate_stats(model: Any, data_stream: Union[Callable[[], Iterable[Any]], Iterable[Any]],
                      passes: int) -> int:
    """
    Refresh BatchNorm running statistics with learnable parameters frozen.

    Runs forward passes in calibrate mode over ``data_stream`` ``passes``
    times. Batches may be arrays, tensors or ``(x, y)`` tuples. A callable
    stream is re-invoked for every pass; otherwise the stream must be
    re-iterable (for example a list).

    Args:
        model: Model exposing ``forward(x, mode)``, ``parameters()`` and ``prepbn_states()``
        data_stream: Batches, or a zero-argument callable returning batches
        passes: Number of passes over the stream; 0 leaves the model untouched

    Returns:
        Number of batches processed

    Raises:
        NotConverged: If any PRepBN layer still has gamma > 0
        EmptyStream: If a pass yields no batches
    """
    if passes < 0:
        raise ValueError(f"passes must be non-negative, got {passes}")
    if passes == 0:
        return 0

    for state in model.prepbn_states():
        if state.gamma > 0.0:
            raise NotConverged(f"Cannot recalibrate while PRepBN gamma is {state.gamma:.6f} > 0", state.gamma)

    if not model.has_batchnorm():
        logger.info("Model has no BatchNorm statistics, recalibration skipped")
        return 0

    processed = 0
    with no_grad():
        for pass_index in range(passes):
            in_pass = 0
            for batch in _iter_batches(data_stream):
                x = batch[0] if isinstance(batch, tuple) else batch
                model.forward(x, mode=Mode.CALIBRATE)
                in_pass += 1
            if in_pass == 0:
                raise EmptyStream(f"Recalibration pass {pass_index + 1} received no batches")
            processed += in_pass
            logger.debug(f"Recalibration pass {pass_index + 1}/{passes}: {in_pass} batches")

    logger.info(f"Recalibrated BatchNorm statistics over {passes} passes ({processed} batches)")
    return processed
