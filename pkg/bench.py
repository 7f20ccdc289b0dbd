"""
Benchmark module for the SLAB transformer toolkit.

Latency and scaling harness for the efficiency claims of the toolkit:

- attention: softmax attention against SLA as the token count N grows
- normalization: LayerNorm, BatchNorm, RepBN and the folded affine
- full-block: a pre-norm block with token norms against the same block
  with its (converged) PRepBN norms folded away

Every sweep point is timed with a monotonic nanosecond clock after a warmup,
with inputs allocated once and reused across iterations. At each (N, C) the
variants are timed in rotating round-robin order, so machine drift hits all
of them alike; each sample averages a few back-to-back calls. Reports carry the
median and interquartile range per point, a least-squares log-log slope with
a bootstrap confidence interval per variant, analytic multiply-accumulate
counts, and environment metadata. They are written as CSV or JSON with a
standalone plotting script next to them.
"""

import json
import time
import logging
import platform
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import psutil
from threadpoolctl import threadpool_info, threadpool_limits

from config import config, ConfigError
from tensor_core import Tensor, no_grad
from normalization import (
    BNParams, FusedAffine, LNParams, Mode, RepBNParams, batchnorm, layernorm, repbn,
)
from attention import AttentionParams, TokenGrid, sla_attention, softmax_attention
from model import ModelConfig, attention_flops, block_flops, block_forward, fuse_block, make_block

logger = logging.getLogger(__name__)

TARGETS = ("attention", "normalization", "full-block")
VARIANTS = {
    "attention": ("softmax", "sla"),
    "normalization": ("layernorm", "batchnorm", "repbn", "fused"),
    "full-block": ("ln-softmax", "ln-sla", "bn-softmax", "bn-sla"),
}
REPORT_COLUMNS = ["target", "variant", "N", "C", "median_ms", "iqr_ms", "flops",
                  "slope", "slope_ci_lo", "slope_ci_hi"]
MIN_FIT_POINTS = 4
MIN_TIMED_ITERS = 30
CALLS_PER_SAMPLE = {"attention": 1, "normalization": 10, "full-block": 5}


class InsufficientPoints(ValueError):
    """Raised when a scaling fit has fewer than four sweep points."""
    pass


class NonPositiveLatency(ValueError):
    """Raised when a scaling fit receives a latency or N that is not positive."""
    pass


@dataclass
class BenchSpec:
    """
    What to time and how often.

    ``seq_lens`` and ``dims`` must be strictly increasing; every variant is
    timed at every (N, C) pair. A variant listed more than once is timed as
    separate series labelled ``name#2``, ``name#3`` and so on. ``threads``
    caps BLAS threads inside the timed region and defaults to
    ``SLAB_BENCH_THREADS``. ``calls_per_sample`` defaults per target.
    """
    target: str = "attention"
    variants: List[str] = field(default_factory=lambda: ["softmax", "sla"])
    seq_lens: List[int] = field(default_factory=lambda: [256, 512, 1024, 2048])
    dims: List[int] = field(default_factory=lambda: [192])
    heads: int = 3
    mlp_ratio: float = 4.0
    dwc_kernel_size: int = 3
    batch_size: int = 1
    warmup_iters: int = 5
    timed_iters: int = 30
    repetitions: int = 3
    calls_per_sample: Optional[int] = None
    threads: Optional[int] = None
    precision: str = "float32"
    n_bootstrap: int = 1000
    seed: int = 0

    def validate(self) -> None:
        """
        Raises:
            ConfigError: Naming the offending [bench] key
        """
        def fail(key: str, message: str):
            raise ConfigError(f"[bench] {key}: {message}", "bench", key)

        if self.target not in TARGETS:
            fail("target", f"must be one of {', '.join(TARGETS)}, got '{self.target}'")
        valid = VARIANTS[self.target]
        if not self.variants:
            fail("variants", f"at least one variant is required (valid variants: {', '.join(valid)})")
        for variant in self.variants:
            if variant not in valid:
                fail("variants", f"unknown variant '{variant}' for target {self.target} "
                                 f"(valid variants: {', '.join(valid)})")
        for key, sweep in (("seq_lens", self.seq_lens), ("dims", self.dims)):
            if not sweep:
                fail(key, "must list at least one value")
            if any(v <= 0 for v in sweep):
                fail(key, f"values must be positive, got {sweep}")
            if any(b <= a for a, b in zip(sweep, sweep[1:])):
                fail(key, f"must be strictly increasing, got {sweep}")
        if self.heads <= 0 or any(c % self.heads for c in self.dims):
            fail("heads", f"every dim in {self.dims} must be divisible by {self.heads} heads")
        if self.timed_iters < MIN_TIMED_ITERS:
            fail("timed_iters", f"must be >= {MIN_TIMED_ITERS}, got {self.timed_iters}")
        if self.warmup_iters < 0 or self.repetitions < 1:
            fail("repetitions", "warmup_iters must be >= 0 and repetitions >= 1")
        if self.calls_per_sample is not None and self.calls_per_sample < 1:
            fail("calls_per_sample", f"must be positive, got {self.calls_per_sample}")
        if self.batch_size < 1:
            fail("batch_size", f"must be positive, got {self.batch_size}")
        if self.threads is not None and self.threads < 1:
            fail("threads", f"must be positive, got {self.threads}")
        if self.precision not in ("float32", "float64"):
            fail("precision", f"must be float32 or float64, got '{self.precision}'")
        if self.dwc_kernel_size <= 0 or self.dwc_kernel_size % 2 == 0:
            fail("dwc_kernel_size", f"must be a positive odd integer, got {self.dwc_kernel_size}")
        if self.n_bootstrap < 1:
            fail("n_bootstrap", f"must be positive, got {self.n_bootstrap}")

    @property
    def dtype(self) -> Any:
        return np.float64 if self.precision == "float64" else np.float32

    @property
    def sample_calls(self) -> int:
        if self.calls_per_sample is not None:
            return self.calls_per_sample
        return CALLS_PER_SAMPLE[self.target]

    def series_labels(self) -> List[str]:
        """Report label of each entry of ``variants``, in order."""
        seen: Dict[str, int] = {}
        labels = []
        for variant in self.variants:
            seen[variant] = seen.get(variant, 0) + 1
            labels.append(variant if seen[variant] == 1 else f"{variant}#{seen[variant]}")
        return labels


@dataclass
class BenchPoint:
    """Latency distribution of one variant at one (N, C)."""
    target: str
    variant: str
    n: int
    c: int
    median_ms: float
    p25_ms: float
    p75_ms: float
    flops: int
    samples: int

    @property
    def iqr_ms(self) -> float:
        return self.p75_ms - self.p25_ms


@dataclass
class ScalingFit:
    """Log-log slope of latency against N for one variant at fixed C."""
    target: str
    variant: str
    c: int
    slope: float
    ci_lo: float
    ci_hi: float
    n_points: int


@dataclass
class BenchReport:
    """Result of a sweep: timed points, scaling fits, notices and environment."""
    spec: Optional[BenchSpec] = None
    points: List[BenchPoint] = field(default_factory=list)
    fits: List[ScalingFit] = field(default_factory=list)
    notices: List[str] = field(default_factory=list)
    environment: Dict[str, Any] = field(default_factory=dict)

    def series(self, variant: str, c: Optional[int] = None) -> List[BenchPoint]:
        return sorted((p for p in self.points if p.variant == variant and (c is None or p.c == c)),
                      key=lambda p: p.n)

    def rows(self) -> List[Dict[str, Any]]:
        """Report rows in column order; fit rows leave N and the latency columns empty."""
        rows = []
        for p in self.points:
            rows.append({
                "target": p.target, "variant": p.variant, "N": p.n, "C": p.c,
                "median_ms": p.median_ms, "iqr_ms": p.iqr_ms, "flops": p.flops,
                "slope": None, "slope_ci_lo": None, "slope_ci_hi": None,
            })
        for f in self.fits:
            rows.append({
                "target": f.target, "variant": f.variant, "N": None, "C": f.c,
                "median_ms": None, "iqr_ms": None, "flops": None,
                "slope": f.slope, "slope_ci_lo": f.ci_lo, "slope_ci_hi": f.ci_hi,
            })
        return rows

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows(), columns=REPORT_COLUMNS)
        for column in ("N", "C", "flops"):
            frame[column] = frame[column].astype("Int64")
        return frame


def environment_metadata(threads: Optional[int] = None) -> Dict[str, Any]:
    """Machine and library details recorded with every report."""
    memory = psutil.virtual_memory()
    libraries = [
        {"api": info.get("internal_api"), "threads": info.get("num_threads")}
        for info in threadpool_info()
    ]
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_physical": psutil.cpu_count(logical=False),
        "cpu_logical": psutil.cpu_count(logical=True),
        "memory_total_mb": round(memory.total / 2 ** 20),
        "timed_threads": threads,
        "multithreaded": threads is None or threads > 1,
        "blas": libraries,
        "clock": "perf_counter_ns",
    }


def format_ms(ms: float) -> str:
    if ms >= 10.0:
        return f"{ms:.1f} ms"
    if ms >= 0.01:
        return f"{ms * 1e3:.1f} us"
    return f"{ms * 1e6:.0f} ns"


def _rand(rng: np.random.Generator, shape: Tuple[int, ...], dtype: Any) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype))


def _attention_case(spec: BenchSpec, variant: str, n: int, c: int,
                    rng: np.random.Generator) -> Tuple[Callable[[], Any], int]:
    params = AttentionParams.init(c, spec.heads, spec.dwc_kernel_size, rng, spec.dtype)
    x = _rand(rng, (spec.batch_size, n, c), spec.dtype)
    grid = TokenGrid.for_tokens(n)
    macs = sum(attention_flops(n, c, spec.heads, variant, spec.dwc_kernel_size).values()) * spec.batch_size
    if variant == "softmax":
        return lambda: softmax_attention(x, params), macs
    return lambda: sla_attention(x, params, grid), macs


def _normalization_case(spec: BenchSpec, variant: str, n: int, c: int,
                        rng: np.random.Generator) -> Tuple[Callable[[], Any], int]:
    x = _rand(rng, (spec.batch_size, n, c), spec.dtype)
    bn = BNParams.create(c, spec.dtype)
    bn.running_mean.data = rng.uniform(-0.5, 0.5, c).astype(spec.dtype)
    bn.running_var.data = rng.uniform(0.5, 1.5, c).astype(spec.dtype)
    if variant == "layernorm":
        ln = LNParams.create(c, spec.dtype)
        return lambda: layernorm(x, ln), 0
    if variant == "batchnorm":
        return lambda: batchnorm(x, bn, Mode.EVAL), 0
    if variant == "repbn":
        rep = RepBNParams(bn, Tensor(rng.uniform(-0.25, 0.25, c).astype(spec.dtype)))
        return lambda: repbn(x, rep, Mode.EVAL), 0
    affine = FusedAffine.from_bn(bn)
    return lambda: affine.apply(x), 0


def _block_case(spec: BenchSpec, variant: str, n: int, c: int,
                rng: np.random.Generator) -> Tuple[Callable[[], Any], int]:
    norm, attn = variant.split("-")
    cfg = ModelConfig(depth=1, dim=c, heads=spec.heads, mlp_ratio=spec.mlp_ratio,
                      norm_kind="layernorm" if norm == "ln" else "prepbn", attn_kind=attn,
                      dwc_kernel_size=spec.dwc_kernel_size, precision=spec.precision, seed=spec.seed)
    block = make_block(cfg, rng)
    if norm == "bn":
        for slot in (block.norm1, block.norm2):
            slot.params.current_step = slot.params.total_steps
        block = fuse_block(block)
    x = _rand(rng, (spec.batch_size, n, c), spec.dtype)
    grid = TokenGrid.for_tokens(n)
    macs = sum(block_flops(n, c, spec.heads, cfg.hidden_dim, attn, spec.dwc_kernel_size).values())
    return lambda: block_forward(x, block, Mode.EVAL, grid), macs * spec.batch_size


_BUILDERS = {
    "attention": _attention_case,
    "normalization": _normalization_case,
    "full-block": _block_case,
}


def time_interleaved(fns: Sequence[Callable[[], Any]], warmup_iters: int, timed_iters: int,
                     repetitions: int = 1, calls_per_sample: int = 1) -> np.ndarray:
    """
    Per-call latencies in milliseconds of several callables timed side by side.

    Each repetition warms every callable up with ``warmup_iters`` untimed
    calls, then runs ``timed_iters`` rounds. A round takes one sample of every
    callable; the order rotates by one position per round. A sample is the
    mean latency of ``calls_per_sample`` back-to-back calls.

    Returns:
        Array of shape (len(fns), timed_iters * repetitions)
    """
    samples = np.empty((len(fns), timed_iters * repetitions), dtype=np.float64)
    order = list(range(len(fns)))
    i = 0
    with no_grad():
        for _ in range(repetitions):
            for fn in fns:
                for _ in range(warmup_iters):
                    fn()
            for _ in range(timed_iters):
                for j in order:
                    fn = fns[j]
                    start = time.perf_counter_ns()
                    for _ in range(calls_per_sample):
                        fn()
                    samples[j, i] = (time.perf_counter_ns() - start) / 1e6 / calls_per_sample
                order = order[1:] + order[:1]
                i += 1
    return samples


def time_callable(fn: Callable[[], Any], warmup_iters: int, timed_iters: int, repetitions: int = 1,
                  calls_per_sample: int = 1) -> np.ndarray:
    """Per-call latencies of a single callable; samples from all repetitions are pooled."""
    return time_interleaved([fn], warmup_iters, timed_iters, repetitions, calls_per_sample)[0]


def fit_scaling_exponent(points: Sequence[Tuple[float, float]], n_bootstrap: int = 1000, seed: int = 0,
                         confidence: float = 0.95) -> Tuple[float, Tuple[float, float]]:
    """
    Least-squares slope of log(latency) against log(N).

    Args:
        points: (N, latency) pairs
        n_bootstrap: Resamples of the (N, latency) pairs for the confidence interval
        seed: Seed for the bootstrap resampling
        confidence: Two-sided interval coverage

    Returns:
        Tuple of (slope, (ci_lo, ci_hi))

    Raises:
        InsufficientPoints: With fewer than four points or fewer than two distinct N
        NonPositiveLatency: If any N or latency is not positive
    """
    if len(points) < MIN_FIT_POINTS:
        raise InsufficientPoints(f"Scaling fit needs at least {MIN_FIT_POINTS} points, got {len(points)}")
    data = np.asarray(points, dtype=np.float64)
    if np.any(data <= 0) or not np.all(np.isfinite(data)):
        raise NonPositiveLatency("Scaling fit needs positive, finite N and latency values")
    log_n, log_t = np.log(data[:, 0]), np.log(data[:, 1])
    if np.unique(log_n).size < 2:
        raise InsufficientPoints("Scaling fit needs at least two distinct N")

    slope = float(np.polyfit(log_n, log_t, 1)[0])

    rng = np.random.default_rng(seed)
    boot = []
    for _ in range(n_bootstrap):
        idx = rng.integers(0, len(data), len(data))
        if np.unique(log_n[idx]).size < 2:
            continue
        boot.append(np.polyfit(log_n[idx], log_t[idx], 1)[0])
    if not boot:
        return slope, (slope, slope)
    tail = (1.0 - confidence) / 2.0 * 100.0
    lo, hi = np.percentile(boot, [tail, 100.0 - tail])
    return slope, (float(min(lo, slope)), float(max(hi, slope)))


def run_sweep(spec: BenchSpec) -> BenchReport:
    """
    Time every variant at every (N, C) of ``spec`` and fit scaling exponents.

    All variants of one (N, C) are built first and timed together with
    ``time_interleaved``. Variants with fewer than four sweep points get a
    notice in the report instead of a slope; their latencies are still
    reported.

    Raises:
        ConfigError: If the spec is invalid
    """
    spec.validate()
    threads = spec.threads if spec.threads is not None else config.runtime["bench_threads"]
    report = BenchReport(spec=spec, environment=environment_metadata(threads))
    build = _BUILDERS[spec.target]
    rng = np.random.default_rng(spec.seed)
    labels = spec.series_labels()
    calls = spec.sample_calls

    logger.info(f"Benchmark {spec.target}: variants {labels}, N {spec.seq_lens}, C {spec.dims}, "
                f"{spec.timed_iters} x {spec.repetitions} samples of {calls} call(s), {threads} thread(s)")

    with threadpool_limits(limits=threads):
        for c in spec.dims:
            for n in spec.seq_lens:
                cases = [build(spec, variant, n, c, rng) for variant in spec.variants]
                samples = time_interleaved([fn for fn, _ in cases], spec.warmup_iters, spec.timed_iters,
                                           spec.repetitions, calls)
                for label, (_, macs), row in zip(labels, cases, samples):
                    p25, median, p75 = np.percentile(row, [25, 50, 75])
                    report.points.append(BenchPoint(spec.target, label, n, c, float(median), float(p25),
                                                    float(p75), int(macs), len(row)))
                    logger.info(f"  {label:<12} N={n:<6} C={c:<4} median {format_ms(median)} "
                                f"(IQR {format_ms(p75 - p25)})")
    report.points.sort(key=lambda p: (spec.dims.index(p.c), labels.index(p.variant), p.n))

    for c in spec.dims:
        for label in labels:
            series = report.series(label, c)
            try:
                slope, (lo, hi) = fit_scaling_exponent([(p.n, p.median_ms) for p in series],
                                                       spec.n_bootstrap, spec.seed)
            except InsufficientPoints as e:
                notice = f"{label} at C={c}: slope not fitted ({e})"
                report.notices.append(notice)
                logger.warning(notice)
                continue
            report.fits.append(ScalingFit(spec.target, label, c, slope, lo, hi, len(series)))
            logger.info(f"  {label} at C={c}: slope {slope:.3f} [{lo:.3f}, {hi:.3f}]")
    return report


def compare_variants(report: BenchReport, fast: str, slow: str, c: Optional[int] = None) -> Dict[int, str]:
    """
    Per-N ordering verdict of two variants.

    Returns:
        Map from N to "faster" (``fast`` beats ``slow`` with disjoint IQRs),
        "slower" (the reverse) or "inconclusive" (IQRs overlap)
    """
    slow_points = {p.n: p for p in report.series(slow, c)}
    verdicts = {}
    for p in report.series(fast, c):
        q = slow_points.get(p.n)
        if q is None:
            continue
        if p.p75_ms < q.p25_ms:
            verdicts[p.n] = "faster"
        elif p.p25_ms > q.p75_ms:
            verdicts[p.n] = "slower"
        else:
            verdicts[p.n] = "inconclusive"
    return verdicts


PLOT_SCRIPT = '''"""Plot {name}: median latency against N on log-log axes."""

import sys
from pathlib import Path

import pandas as pd
import plotly.express as px

path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).with_name("{name}")
if path.suffix == ".json":
    import json
    frame = pd.DataFrame(json.loads(path.read_text())["rows"])
else:
    frame = pd.read_csv(path)
points = frame.dropna(subset=["N"])
fig = px.line(points, x="N", y="median_ms", color="variant", symbol="C", error_y="iqr_ms",
              log_x=True, log_y=True, markers=True, title="Latency scaling ({target})")
fig.write_html(path.with_suffix(".html"))
print(f"Wrote {{path.with_suffix('.html')}}")
'''


def emit_report(report: BenchReport, format: str = "csv", path: Union[str, Path] = "bench.csv") -> Path:
    """
    Write ``report`` to ``path`` and a plotting script next to it.

    CSV holds the report columns only; JSON additionally carries the
    environment metadata and notices. Fit rows have an empty N.

    Args:
        report: Sweep result
        format: "csv" or "json"
        path: Destination file

    Returns:
        Path of the written report

    Raises:
        ValueError: If format is not supported
        IOError: If writing fails
    """
    if format not in ("csv", "json"):
        raise ValueError("Format must be 'csv' or 'json'")
    path = Path(path)
    target = report.spec.target if report.spec else "bench"
    script = path.with_name(f"{path.stem}_plot.py")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if format == "csv":
            report.to_frame().to_csv(path, index=False)
        else:
            document = {
                "columns": REPORT_COLUMNS,
                "rows": report.rows(),
                "notices": report.notices,
                "environment": report.environment,
                "spec": asdict(report.spec) if report.spec else None,
            }
            path.write_text(json.dumps(document, indent=2), encoding="utf-8")
        script.write_text(PLOT_SCRIPT.format(name=path.name, target=target), encoding="utf-8")
    except OSError as e:
        logger.error(f"Report export failed: {e}")
        raise IOError(f"Failed to write benchmark report {path}: {e}")

    logger.info(f"Benchmark report written: {path} ({len(report.points)} points, {len(report.fits)} fits)")
    return path


def read_report(path: Union[str, Path]) -> pd.DataFrame:
    """Parse a CSV or JSON report back into a frame with the report columns."""
    path = Path(path)
    if path.suffix == ".json":
        rows = json.loads(path.read_text(encoding="utf-8"))["rows"]
        frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    else:
        frame = pd.read_csv(path)
    for column in ("N", "C", "flops"):
        frame[column] = frame[column].astype("Int64")
    return frame


def plot_report(report: BenchReport):
    """Plotly figure of median latency against N (log-log) with IQR error bars."""
    import plotly.graph_objects as go

    fig = go.Figure()
    for c in sorted({p.c for p in report.points}):
        for variant in dict.fromkeys(p.variant for p in report.points):
            series = report.series(variant, c)
            if not series:
                continue
            fig.add_trace(go.Scatter(
                x=[p.n for p in series],
                y=[p.median_ms for p in series],
                error_y=dict(
                    type="data",
                    symmetric=False,
                    array=[p.p75_ms - p.median_ms for p in series],
                    arrayminus=[p.median_ms - p.p25_ms for p in series],
                ),
                mode="lines+markers",
                name=f"{variant} (C={c})",
            ))
    target = report.spec.target if report.spec else "bench"
    fig.update_layout(
        title=f"Latency scaling ({target})",
        xaxis_title="tokens N",
        yaxis_title="median latency (ms)",
        xaxis_type="log",
        yaxis_type="log",
        template="plotly_white",
    )
    return fig
