"""
Verification module for the SLAB transformer toolkit.

Self-contained invariant suites that check a build against its exact
mathematical contracts:

- lemma: RepBN equals its reparameterized BatchNorm in eval mode
- sla: linear-order SLA equals a float64 quadratic-order reference
- fusion: a converged PRepBN model equals its norm-folded twin
- gradcheck: every differentiable operation against central differences
- rank: SLA similarity maps have rank at most the head dimension
- schedule: the recorded gamma trace follows the decay schedule exactly and
  recalibration leaves learnable parameters bit-identical

Each suite returns a ``SuiteResult``; ``run_suites`` runs a selection and
``format_table`` renders the pass/fail table printed by the CLI.
"""

import time
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from tensor_core import (
    Tensor, backward, depthwise_conv2d, gelu, log_softmax_lastdim, matmul, no_grad, reduce_moments, relu,
    softmax_lastdim,
)
from normalization import (
    BNParams, LNParams, Mode, PRepBNState, RepBNParams, Schedule, batchnorm, gamma, layernorm, prepbn,
    recalibrate_stats, reparam_repbn_to_bn, repbn, rmsnorm,
)
from attention import (
    AttentionParams, TokenGrid, attention_map_rank, sla_attention, sla_naive_oracle, sla_similarity,
    softmax_attention, softmax_attention_map,
)

logger = logging.getLogger(__name__)

SUITES = ("lemma", "sla", "fusion", "gradcheck", "rank", "schedule")

LEMMA_INSTANCES = 1000
SLA_INSTANCES = 200
FUSION_BATCHES = 100
GRAD_SAMPLES = 100
RANK_INSTANCES = 100

TOLERANCES = {
    "lemma": {"float64": 1e-12, "float32": 1e-6},
    "sla": {"float64": 1e-10, "float32": 1e-6},
    "fusion": {"float64": 1e-10, "float32": 1e-4},
    "gradcheck": {"float64": 1e-4},
}
GRAD_EPS = 1e-6
GRAD_REL_FLOOR = 1e-3


@dataclass
class SuiteResult:
    """Outcome of one suite; ``max_error`` and ``tolerance`` refer to the worst check."""
    name: str
    passed: bool
    checks: int = 0
    max_error: float = 0.0
    tolerance: Optional[float] = None
    seconds: float = 0.0
    details: List[str] = field(default_factory=list)


def _worst(errors: Dict[str, Tuple[float, float]]) -> Tuple[bool, float, Optional[float], List[str]]:
    """Combine per-precision (max_error, tolerance) pairs."""
    passed = all(err <= tol for err, tol in errors.values())
    name = max(errors, key=lambda k: errors[k][0] / errors[k][1])
    details = [f"{k}: max error {err:.3e} (tolerance {tol:.0e})" for k, (err, tol) in errors.items()]
    return passed, errors[name][0], errors[name][1], details


# *** lemma ***

def lemma_suite(rng: np.random.Generator, perturb_eta: float = 0.0) -> SuiteResult:
    """
    Eval-mode RepBN against the single BatchNorm produced by ``reparam_repbn_to_bn``.

    Args:
        rng: Random generator
        perturb_eta: Offset added to eta on the reparameterized side only, for fault injection
    """
    errors = {}
    for precision in ("float64", "float32"):
        dtype = np.dtype(precision)
        worst = 0.0
        for _ in range(LEMMA_INSTANCES):
            c = int(rng.integers(1, 17))
            x = Tensor(rng.uniform(-0.5, 0.5, (8, c)).astype(dtype))
            bn = BNParams(
                alpha=Tensor(rng.uniform(0.5, 1.0, c).astype(dtype)),
                beta=Tensor(rng.uniform(-0.25, 0.25, c).astype(dtype)),
                running_mean=Tensor(rng.uniform(-0.25, 0.25, c).astype(dtype)),
                running_var=Tensor(rng.uniform(0.5, 1.5, c).astype(dtype)),
            )
            eta = rng.uniform(-0.25, 0.25, c).astype(dtype)
            reference = repbn(x, RepBNParams(bn, Tensor(eta)), Mode.EVAL)
            perturbed = RepBNParams(bn, Tensor((eta + perturb_eta).astype(dtype)))
            folded = batchnorm(x, reparam_repbn_to_bn(perturbed), Mode.EVAL)
            worst = max(worst, float(np.max(np.abs(reference.data - folded.data))))
        errors[precision] = (worst, TOLERANCES["lemma"][precision])

    passed, max_error, tol, details = _worst(errors)
    return SuiteResult("lemma", passed, 2 * LEMMA_INSTANCES, max_error, tol, details=details)


# *** sla ***

def _random_attention(rng: np.random.Generator, c: int, heads: int, dtype: Any) -> AttentionParams:
    params = AttentionParams.init(c, heads, 3, rng, dtype)
    std = 0.5 / np.sqrt(c)
    for name in ("w_q", "w_k", "w_v", "w_o"):
        setattr(params, name, Tensor(rng.normal(0.0, std, (c, c)).astype(dtype)))
    for name in ("b_q", "b_k", "b_v", "b_o"):
        setattr(params, name, Tensor(rng.uniform(-0.1, 0.1, c).astype(dtype)))
    return params


def sla_suite(rng: np.random.Generator) -> SuiteResult:
    """Decoupled SLA against the naive float64 reference, N <= 64, C <= 32, 1-4 heads."""
    errors = {}
    for precision in ("float64", "float32"):
        dtype = np.dtype(precision)
        worst = 0.0
        for _ in range(SLA_INSTANCES):
            grid = TokenGrid(int(rng.integers(1, 9)), int(rng.integers(1, 9)))
            heads = int(rng.integers(1, 5))
            c = heads * int(rng.integers(1, 32 // heads + 1))
            params = _random_attention(rng, c, heads, dtype)
            x = Tensor(rng.uniform(-1.0, 1.0, (int(rng.integers(1, 3)), grid.tokens, c)).astype(dtype))
            with no_grad():
                fast = sla_attention(x, params, grid)
            reference = sla_naive_oracle(x, params, grid)
            worst = max(worst, float(np.max(np.abs(fast.data.astype(np.float64) - reference.data))))
        errors[precision] = (worst, TOLERANCES["sla"][precision])

    passed, max_error, tol, details = _worst(errors)
    return SuiteResult("sla", passed, 2 * SLA_INSTANCES, max_error, tol, details=details)


# *** fusion ***

def converged_prepbn_model(precision: str, rng: np.random.Generator, **overrides: Any):
    """
    Small PRepBN model with random statistics and affines, schedule at gamma = 0.

    Returns:
        SlabModel ready for ``fuse_model``
    """
    from model import ModelConfig, SlabModel

    settings = dict(depth=2, dim=16, heads=2, image_size=8, patch_size=2, num_classes=4,
                    norm_kind="prepbn", attn_kind="sla", decay_steps=10, precision=precision,
                    seed=int(rng.integers(0, 2 ** 31)))
    settings.update(overrides)
    model = SlabModel(ModelConfig(**settings))
    dtype = model.config.dtype
    for state in model.prepbn_states():
        bn, c = state.repbn.bn, state.repbn.bn.channels
        bn.running_mean.data = rng.uniform(-0.25, 0.25, c).astype(dtype)
        bn.running_var.data = rng.uniform(0.5, 1.5, c).astype(dtype)
        bn.alpha.data = rng.uniform(0.5, 1.0, c).astype(dtype)
        bn.beta.data = rng.uniform(-0.25, 0.25, c).astype(dtype)
        state.repbn.eta.data = rng.uniform(-0.25, 0.25, c).astype(dtype)
        state.current_step = state.total_steps
    return model


def max_logit_difference(a: Any, b: Any, batches: Sequence[np.ndarray]) -> float:
    """Largest absolute eval-mode logit difference of two models over ``batches``."""
    worst = 0.0
    with no_grad():
        for xb in batches:
            la, lb = a.forward(xb, Mode.EVAL), b.forward(xb, Mode.EVAL)
            worst = max(worst, float(np.max(np.abs(la.data.astype(np.float64) - lb.data))))
    return worst


def random_batches(model: Any, count: int, rng: np.random.Generator, batch_size: int = 4) -> List[np.ndarray]:
    """Random inputs matching ``model``'s input geometry."""
    cfg = model.config
    if cfg.input_kind == "tokens":
        return [rng.integers(0, cfg.vocab_size, (batch_size, cfg.seq_len)) for _ in range(count)]
    shape = (batch_size, cfg.in_channels, cfg.image_size, cfg.image_size)
    return [rng.normal(0.0, 1.0, shape).astype(cfg.dtype) for _ in range(count)]


def fusion_suite(rng: np.random.Generator) -> SuiteResult:
    """Eval logits of a converged PRepBN model against its fused twin on random batches."""
    from model import fuse_model

    errors, details = {}, []
    for precision in ("float64", "float32"):
        model = converged_prepbn_model(precision, rng)
        fused = fuse_model(model)
        if fused.num_tensor_elements() >= model.num_tensor_elements():
            details.append(f"{precision}: fused model does not store fewer values")
            errors[precision] = (float("inf"), TOLERANCES["fusion"][precision])
            continue
        worst = max_logit_difference(model, fused, random_batches(model, FUSION_BATCHES, rng))
        errors[precision] = (worst, TOLERANCES["fusion"][precision])

    passed, max_error, tol, worst_details = _worst(errors)
    return SuiteResult("fusion", passed, 2 * FUSION_BATCHES, max_error, tol, details=details + worst_details)


# *** gradcheck ***

GradCase = Tuple[Callable[[np.random.Generator], List[np.ndarray]], Callable[..., Tensor]]


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(0.1, 1.0, shape)


def _attention_from(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, kernel: Tensor) -> AttentionParams:
    c = w_q.shape[0]
    zeros = Tensor(np.zeros(c))
    return AttentionParams(w_q, w_k, w_v, Tensor(np.eye(c)), zeros, zeros, zeros, zeros, kernel, heads=2)


def _bn_from(alpha: Tensor, beta: Tensor) -> BNParams:
    c = alpha.shape[0]
    return BNParams(alpha, beta, Tensor(np.zeros(c)), Tensor(np.ones(c)))


def _prepbn_from(x: Tensor, scale: Tensor, alpha: Tensor, eta: Tensor) -> Tensor:
    c = scale.shape[0]
    state = PRepBNState(LNParams(scale, Tensor(np.zeros(c))), RepBNParams(_bn_from(alpha, Tensor(np.zeros(c))), eta),
                        total_steps=4, current_step=1)
    return prepbn(x, state, Mode.TRAIN)


def _shapes(*shapes: Tuple[int, ...], low: float = -1.0, high: float = 1.0):
    return lambda rng: [rng.uniform(low, high, s) for s in shapes]


def _labels_ce(logits: Tensor) -> Tensor:
    from training import cross_entropy
    return cross_entropy(logits, np.array([0, 2, 1]), smoothing=0.1)


GRAD_CASES: Dict[str, GradCase] = {
    "add": (_shapes((3, 4), (4,)), lambda a, b: a + b),
    "sub": (_shapes((3, 4), (3, 1)), lambda a, b: a - b),
    "mul": (_shapes((3, 4), (3, 4)), lambda a, b: a * b),
    "div": (lambda rng: [rng.uniform(-1, 1, (3, 4)), rng.uniform(0.5, 2.0, (4,))], lambda a, b: a / b),
    "pow": (_shapes((3, 4), low=0.5, high=2.0), lambda a: a ** 1.5),
    "sqrt": (_shapes((3, 4), low=0.5, high=2.0), lambda a: a.sqrt()),
    "exp": (_shapes((3, 4)), lambda a: a.exp()),
    "log": (_shapes((3, 4), low=0.5, high=2.0), lambda a: a.log()),
    "tanh": (_shapes((3, 4)), lambda a: a.tanh()),
    "relu": (lambda rng: [_away_from_zero(rng, (3, 4))], lambda a: relu(a)),
    "gelu": (_shapes((3, 4), low=-3.0, high=3.0), lambda a: gelu(a)),
    "sum": (_shapes((2, 3, 4)), lambda a: a.sum(axis=(0, 2), keepdims=True)),
    "mean": (_shapes((2, 3, 4)), lambda a: a.mean(axis=1)),
    "reshape": (_shapes((2, 3, 4)), lambda a: a.reshape(4, 6) * a.reshape(4, 6)),
    "transpose": (_shapes((2, 3, 4)), lambda a: a.transpose(2, 0, 1) * a.transpose(2, 0, 1)),
    "matmul": (_shapes((2, 3, 4), (4, 5)), lambda a, b: matmul(a, b)),
    "reduce_moments": (_shapes((5, 4)), lambda a: reduce_moments(a, 0)[1] + reduce_moments(a, 0)[0]),
    "softmax_lastdim": (_shapes((3, 5), low=-2.0, high=2.0), lambda a: softmax_lastdim(a)),
    "log_softmax_lastdim": (_shapes((3, 5), low=-2.0, high=2.0), lambda a: log_softmax_lastdim(a)),
    "depthwise_conv2d": (_shapes((2, 3, 4, 5), (3, 3, 3)), lambda x, k: depthwise_conv2d(x, k)),
    "layernorm": (_shapes((2, 3, 6), (6,), (6,)), lambda x, s, b: layernorm(x, LNParams(s, b))),
    "rmsnorm": (_shapes((2, 3, 6), (6,), (6,)), lambda x, s, b: rmsnorm(x, LNParams(s, b))),
    "batchnorm": (_shapes((2, 3, 6), (6,), (6,)), lambda x, a, b: batchnorm(x, _bn_from(a, b), Mode.TRAIN)),
    "repbn": (_shapes((2, 3, 6), (6,), (6,)),
              lambda x, a, e: repbn(x, RepBNParams(_bn_from(a, Tensor(np.zeros(6))), e), Mode.TRAIN)),
    "prepbn": (_shapes((2, 3, 6), (6,), (6,), (6,)), _prepbn_from),
    "softmax_attention": (_shapes((2, 4, 4), (4, 4), (4, 4), (4, 4), (4, 3, 3)),
                          lambda x, q, k, v, dw: softmax_attention(x, _attention_from(x, q, k, v, dw))),
    "sla_attention": (_shapes((2, 6, 4), (4, 4), (4, 4), (4, 4), (4, 3, 3)),
                      lambda x, q, k, v, dw: sla_attention(x, _attention_from(x, q, k, v, dw), TokenGrid(2, 3))),
    "cross_entropy": (_shapes((3, 4), low=-2.0, high=2.0), _labels_ce),
}


def gradcheck_op(make_inputs: Callable[[np.random.Generator], List[np.ndarray]], fn: Callable[..., Tensor],
                 rng: np.random.Generator, samples: int = GRAD_SAMPLES, eps: float = GRAD_EPS,
                 floor: float = GRAD_REL_FLOOR) -> float:
    """
    Worst relative error of directional derivatives over ``samples`` random directions.

    Each sample draws float64 inputs, a random projection ``r`` of the output
    and a random direction per input, then compares the reverse-mode
    directional derivative of ``sum(fn(x) * r)`` with a central difference.
    The relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor only
    bounds the ratio when both derivatives are near zero.
    """
    worst = 0.0
    for _ in range(samples):
        arrays = [np.asarray(a, dtype=np.float64) for a in make_inputs(rng)]
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*inputs)
        r = rng.normal(0.0, 1.0, out.shape)
        backward((out * Tensor(r)).sum())
        directions = [rng.normal(0.0, 1.0, a.shape) for a in arrays]
        analytic = sum(float(np.sum(t.grad.data * u)) if t.grad is not None else 0.0
                       for t, u in zip(inputs, directions))

        with no_grad():
            def f(sign: float) -> float:
                shifted = [Tensor(a + sign * eps * u) for a, u in zip(arrays, directions)]
                return float(np.sum(fn(*shifted).data * r))

            numeric = (f(1.0) - f(-1.0)) / (2.0 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return worst


def gradcheck_suite(rng: np.random.Generator, samples: int = GRAD_SAMPLES) -> SuiteResult:
    """Finite-difference check of every differentiable operation in float64."""
    tol = TOLERANCES["gradcheck"]["float64"]
    worst, failures = 0.0, []
    for name, (make_inputs, fn) in GRAD_CASES.items():
        err = gradcheck_op(make_inputs, fn, rng, samples)
        worst = max(worst, err)
        if err > tol:
            failures.append(f"{name}: relative error {err:.3e}")
    details = failures or [f"{len(GRAD_CASES)} operations within {tol:.0e}"]
    return SuiteResult("gradcheck", not failures, len(GRAD_CASES) * samples, worst, tol, details=details)


# *** rank ***

def rank_suite(rng: np.random.Generator) -> SuiteResult:
    """SLA similarity rank never exceeds the head dimension; softmax maps can exceed it."""
    dim, heads = 16, 2
    d = dim // heads
    sla_max, softmax_max = 0, 0
    for _ in range(RANK_INSTANCES):
        n = int(rng.integers(d + 4, 33))
        params = AttentionParams.init(dim, heads, 3, rng, np.float64)
        x = rng.normal(0.0, 1.0, (n, dim))
        sla_max = max(sla_max, max(attention_map_rank(m) for m in sla_similarity(x, params)))
        softmax_max = max(softmax_max, max(attention_map_rank(m) for m in softmax_attention_map(x, params)))
    passed = sla_max <= d and softmax_max > d
    details = [f"head dim {d}: max SLA rank {sla_max}, max softmax rank {softmax_max}"]
    return SuiteResult("rank", passed, RANK_INSTANCES, float(sla_max), float(d), details=details)


# *** schedule ***

def schedule_suite(rng: np.random.Generator) -> SuiteResult:
    """Gamma trace of a tiny training run, schedule endpoints, and frozen-parameter recalibration."""
    from datasets import DatasetSpec, build_dataset
    from model import ModelConfig, SlabModel
    from training import TrainConfig, train

    details, ok = [], True
    for schedule in Schedule:
        state = PRepBNState(LNParams.create(1), RepBNParams.create(1), total_steps=50, schedule=schedule)
        trace = []
        for t in range(61):
            state.current_step = t
            trace.append(gamma(state))
        monotone = all(b <= a for a, b in zip(trace, trace[1:]))
        if trace[0] != 1.0 or trace[50] != 0.0 or trace[-1] != 0.0 or not monotone:
            ok = False
            details.append(f"{schedule.value} schedule: endpoints or monotonicity violated")

    seed = int(rng.integers(0, 2 ** 31))
    data = build_dataset(DatasetSpec(num_samples=64, image_size=4, num_classes=2, seed=seed))
    model = SlabModel(ModelConfig(depth=1, dim=8, heads=2, image_size=4, patch_size=2, num_classes=2,
                                  norm_kind="prepbn", attn_kind="sla", seed=seed))
    artifacts = train(model, data, TrainConfig(epochs=3, batch_size=16, warmup_epochs=1, recalib_epochs=0, seed=seed))

    total = artifacts.decay_steps
    mismatched = [(t, g) for t, g in artifacts.gamma_trace if g != float(Fraction(max(total - t, 0), total))]
    if mismatched or not artifacts.gamma_trace or artifacts.gamma_trace[-1][1] != 0.0:
        ok = False
        details.append(f"gamma trace deviates from (T - t) / T at {len(mismatched)} steps or does not end at 0")
    else:
        details.append(f"gamma trace matches (T - t) / T at {len(artifacts.gamma_trace)} steps, T = {total}")

    before = {k: v.data.copy() for k, v in model.named_parameters().items()}
    stats_before = [s.repbn.bn.running_mean.data.copy() for s in model.prepbn_states()]
    recal_rng = np.random.default_rng(seed)
    recalibrate_stats(model, lambda: data.batches(16, recal_rng), passes=2)
    changed = [k for k, v in model.named_parameters().items() if not np.array_equal(v.data, before[k])]
    stats_moved = any(not np.array_equal(s.repbn.bn.running_mean.data, b)
                      for s, b in zip(model.prepbn_states(), stats_before))
    if changed or not stats_moved:
        ok = False
        details.append(f"recalibration changed {len(changed)} learnable tensors; running statistics moved: {stats_moved}")
    else:
        details.append("recalibration left learnable parameters bit-identical")

    return SuiteResult("schedule", ok, 3 + len(artifacts.gamma_trace) + 1, float(len(mismatched)), 0.0,
                       details=details)


def run_suites(names: Sequence[str] = ("all",), seed: int = 0, perturb_eta: float = 0.0) -> List[SuiteResult]:
    """
    Run the selected suites in a fixed order.

    Args:
        names: Suite names, or "all"
        seed: Seed for every random instance
        perturb_eta: Fault-injection offset for the lemma suite

    Raises:
        ValueError: If a suite name is unknown
    """
    selected = list(SUITES) if "all" in names else list(names)
    unknown = [n for n in selected if n not in SUITES]
    if unknown:
        raise ValueError(f"Unknown suite(s) {unknown}; valid suites: all, {', '.join(SUITES)}")

    runners: Dict[str, Callable[[np.random.Generator], SuiteResult]] = {
        "lemma": lambda rng: lemma_suite(rng, perturb_eta),
        "sla": sla_suite,
        "fusion": fusion_suite,
        "gradcheck": gradcheck_suite,
        "rank": rank_suite,
        "schedule": schedule_suite,
    }
    results = []
    for offset, name in enumerate(SUITES):
        if name not in selected:
            continue
        start = time.perf_counter()
        result = runners[name](np.random.default_rng(seed + offset))
        result.seconds = time.perf_counter() - start
        log = logger.info if result.passed else logger.error
        log(f"Suite {name}: {'PASS' if result.passed else 'FAIL'} ({result.seconds:.2f}s) " + "; ".join(result.details))
        results.append(result)
    return results


def format_table(results: Sequence[SuiteResult]) -> str:
    """Fixed-width pass/fail table, one row per suite."""
    lines = [f"{'suite':<10} {'result':<6} {'checks':>7} {'max error':>11} {'tolerance':>10} {'time':>8}"]
    for r in results:
        tol = f"{r.tolerance:.0e}" if r.tolerance else "-"
        lines.append(f"{r.name:<10} {'PASS' if r.passed else 'FAIL':<6} {r.checks:>7} {r.max_error:>11.3e} "
                     f"{tol:>10} {r.seconds:>7.2f}s")
        for detail in r.details:
            lines.append(f"    {detail}")
    return "\n".join(lines)
