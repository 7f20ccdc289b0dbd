#!/usr/bin/env python3
"""
Tests for the benchmark harness: scaling fits, sweeps on tiny sizes,
variant verdicts and report emission.
"""

import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import ConfigError
from model import attention_flops, block_flops
from bench import (
    REPORT_COLUMNS, BenchPoint, BenchReport, BenchSpec, InsufficientPoints, NonPositiveLatency,
    compare_variants, emit_report, fit_scaling_exponent, format_ms, plot_report, read_report, run_sweep,
    time_callable, time_interleaved,
)

SEQ_LENS = [64, 128, 256, 512, 1024]


def _tiny_spec(**overrides):
    settings = dict(seq_lens=[4, 8, 16, 32], dims=[8], heads=2, warmup_iters=1, timed_iters=30, repetitions=1,
                    n_bootstrap=50)
    settings.update(overrides)
    return BenchSpec(**settings)


@pytest.mark.parametrize("exponent", [1.0, 2.0])
def test_fit_recovers_exact_power_law(exponent):
    points = [(n, 3e-3 * n ** exponent) for n in SEQ_LENS]
    slope, (lo, hi) = fit_scaling_exponent(points, n_bootstrap=200)
    assert slope == pytest.approx(exponent, abs=1e-9), f"slope {slope} should be {exponent}"
    assert lo <= slope <= hi, "the interval contains the point estimate"
    assert hi - lo < 1e-6, "noise-free data gives a degenerate interval"


def test_fit_on_noisy_data():
    rng = np.random.default_rng(0)
    points = [(n, n ** 1.5 * np.exp(rng.normal(0, 0.05))) for n in SEQ_LENS * 2]
    slope, (lo, hi) = fit_scaling_exponent(points, n_bootstrap=500, seed=1)
    assert abs(slope - 1.5) < 0.15, f"slope {slope:.3f} should be near 1.5"
    assert lo <= slope <= hi and hi - lo < 0.5


def test_fit_errors():
    with pytest.raises(InsufficientPoints):
        fit_scaling_exponent([(64, 1.0), (128, 2.0), (256, 4.0)])
    with pytest.raises(InsufficientPoints):
        fit_scaling_exponent([(64, 1.0)] * 4)
    with pytest.raises(NonPositiveLatency):
        fit_scaling_exponent([(64, 1.0), (128, 0.0), (256, 4.0), (512, 8.0)])


def test_time_callable_pools_repetitions():
    calls = []
    samples = time_callable(lambda: calls.append(1), warmup_iters=2, timed_iters=5, repetitions=3)
    assert samples.shape == (15,), "samples from all repetitions are pooled"
    assert len(calls) == 21, "warmup calls run before every repetition"
    assert np.all(samples >= 0)


def test_time_interleaved_rotates_order_and_averages_calls():
    """Every round samples each callable once, starting one position later than the round before."""
    calls = []
    fns = [lambda: calls.append("a"), lambda: calls.append("b"), lambda: calls.append("c")]
    samples = time_interleaved(fns, warmup_iters=1, timed_iters=3, repetitions=1, calls_per_sample=2)
    assert samples.shape == (3, 3), "one row of samples per callable"
    assert calls[:3] == ["a", "b", "c"], "each callable is warmed up first"
    timed = "".join(calls[3:])
    assert timed == "aabbcc" + "bbccaa" + "ccaabb", f"unexpected call order {timed}"


def test_calls_per_sample_defaults_by_target():
    assert BenchSpec(target="attention", variants=["sla"]).sample_calls == 1
    assert BenchSpec(target="full-block", variants=["bn-sla"]).sample_calls == 5
    assert BenchSpec(target="full-block", variants=["bn-sla"], calls_per_sample=2).sample_calls == 2
    with pytest.raises(ConfigError) as info:
        _tiny_spec(calls_per_sample=0).validate()
    assert info.value.key == "calls_per_sample"


def test_repeated_variant_is_timed_as_its_own_series():
    spec = _tiny_spec(variants=["sla", "softmax", "sla"])
    assert spec.series_labels() == ["sla", "softmax", "sla#2"]
    report = run_sweep(spec)
    assert len(report.points) == 12, "three series at four sequence lengths"
    assert len(report.series("sla")) == 4 and len(report.series("sla#2")) == 4, "copies are not merged"
    assert {f.variant for f in report.fits} == {"sla", "softmax", "sla#2"}
    assert [p.variant for p in report.points[:4]] == ["sla"] * 4, "points are grouped per series"


def test_attention_sweep_reports_points_fits_and_flops():
    report = run_sweep(_tiny_spec())
    assert len(report.points) == 8, "two variants at four sequence lengths"
    assert {f.variant for f in report.fits} == {"softmax", "sla"}, "four points are enough for a fit"
    assert not report.notices
    for p in report.points:
        assert p.median_ms > 0 and p.p25_ms <= p.median_ms <= p.p75_ms
        assert p.flops == sum(attention_flops(p.n, 8, 2, p.variant).values())
    assert report.environment["timed_threads"] == 1, "benchmarks default to one thread"


def test_short_sweep_adds_notice_instead_of_slope():
    report = run_sweep(_tiny_spec(target="full-block", variants=["bn-sla"], seq_lens=[4]))
    assert len(report.points) == 1 and not report.fits
    assert report.notices and "bn-sla" in report.notices[0], "the notice names the variant"
    hidden = int(8 * 4.0)
    assert report.points[0].flops == sum(block_flops(4, 8, 2, hidden, "sla").values())


def test_normalization_sweep():
    report = run_sweep(_tiny_spec(target="normalization", variants=["layernorm", "repbn", "fused"], seq_lens=[4, 8]))
    assert {p.variant for p in report.points} == {"layernorm", "repbn", "fused"}
    assert all(p.flops == 0 for p in report.points), "normalization layers report no MACs"
    assert len(report.notices) == 3


def test_unknown_variant_lists_valid_ones():
    with pytest.raises(ConfigError) as info:
        BenchSpec(variants=["flash"]).validate()
    assert info.value.key == "variants" and "valid variants: softmax, sla" in str(info.value)
    with pytest.raises(ConfigError):
        _tiny_spec(seq_lens=[8, 4]).validate()
    with pytest.raises(ConfigError):
        _tiny_spec(timed_iters=10).validate()


def _point(variant, n, p25, median, p75):
    return BenchPoint("attention", variant, n, 8, median, p25, p75, 0, 30)


def test_compare_variants():
    report = BenchReport(points=[
        _point("sla", 64, 1.0, 1.1, 1.2), _point("softmax", 64, 1.1, 1.15, 1.3),
        _point("sla", 128, 1.0, 1.1, 1.2), _point("softmax", 128, 2.0, 2.1, 2.2),
        _point("sla", 256, 3.0, 3.1, 3.2), _point("softmax", 256, 1.0, 1.1, 1.2),
    ])
    assert compare_variants(report, "sla", "softmax") == {64: "inconclusive", 128: "faster", 256: "slower"}


def test_emit_csv_and_json_hold_the_same_rows(tmp_path):
    report = run_sweep(_tiny_spec(seq_lens=[4, 8, 16, 32, 64], variants=["sla"]))
    csv_path = emit_report(report, "csv", tmp_path / "bench.csv")
    json_path = emit_report(report, "json", tmp_path / "bench.json")
    assert (tmp_path / "bench_plot.py").exists(), "a plotting script is written next to the report"

    from_csv, from_json = read_report(csv_path), read_report(json_path)
    assert list(from_csv.columns) == REPORT_COLUMNS
    pd.testing.assert_frame_equal(from_csv, from_json, check_dtype=False)
    assert from_csv["slope"].notna().sum() == 1, "one fit row per variant"

    with pytest.raises(ValueError):
        emit_report(report, "xlsx", tmp_path / "bench.xlsx")


def test_empty_report_is_header_only(tmp_path):
    path = emit_report(BenchReport(), "csv", tmp_path / "empty.csv")
    assert path.read_text().strip() == ",".join(REPORT_COLUMNS), "an empty report has only the header"


def test_plot_report_and_format_ms():
    report = BenchReport(points=[_point("sla", 64, 1.0, 1.1, 1.2), _point("sla", 128, 2.0, 2.1, 2.2),
                                 _point("softmax", 64, 1.0, 1.1, 1.2)])
    fig = plot_report(report)
    assert len(fig.data) == 2, "one trace per variant"
    assert fig.layout.xaxis.type == "log"

    assert format_ms(12.34) == "12.3 ms"
    assert format_ms(0.5) == "500.0 us"
    assert format_ms(0.000002) == "2 ns"


@pytest.mark.slow
def test_attention_scaling_exponents():
    """Softmax attention scales quadratically in N and SLA linearly, and SLA wins from N = 2048."""
    spec = BenchSpec(target="attention", variants=["softmax", "sla"], seq_lens=[256, 512, 1024, 2048, 4096, 8192],
                     dims=[192], heads=3, warmup_iters=1, timed_iters=30, repetitions=1)
    report = run_sweep(spec)
    slopes = {f.variant: f.slope for f in report.fits}
    assert 1.7 <= slopes["softmax"] <= 2.3, f"softmax slope {slopes['softmax']:.3f}"
    assert 0.7 <= slopes["sla"] <= 1.3, f"SLA slope {slopes['sla']:.3f}"

    softmax = {p.n: p.median_ms for p in report.series("softmax")}
    for p in report.series("sla"):
        if p.n >= 2048:
            assert p.median_ms < softmax[p.n], f"SLA {p.median_ms:.2f} ms vs softmax {softmax[p.n]:.2f} ms at N={p.n}"


@pytest.mark.slow
def test_fused_block_beats_layernorm_block():
    """Folding the norms away makes the block faster at every N, with disjoint IQRs from N = 1024."""
    spec = BenchSpec(target="full-block", variants=["ln-softmax", "ln-sla", "bn-softmax", "bn-sla"],
                     seq_lens=[256, 512, 1024, 2048], dims=[192], heads=3, warmup_iters=2, timed_iters=30,
                     repetitions=1)
    report = run_sweep(spec)
    for attn in ("softmax", "sla"):
        fused = {p.n: p for p in report.series(f"bn-{attn}")}
        ln = {p.n: p for p in report.series(f"ln-{attn}")}
        verdicts = compare_variants(report, f"bn-{attn}", f"ln-{attn}")
        for n in spec.seq_lens:
            assert fused[n].median_ms < ln[n].median_ms, \
                f"{attn} N={n}: fused {fused[n].median_ms:.2f} ms vs LayerNorm {ln[n].median_ms:.2f} ms"
            if n >= 1024:
                assert verdicts[n] == "faster", f"{attn} N={n}: IQRs overlap ({verdicts[n]})"


@pytest.mark.slow
def test_identical_variants_are_indistinguishable():
    spec = BenchSpec(target="attention", variants=["sla", "sla"], seq_lens=[512, 1024], dims=[192], heads=3,
                     warmup_iters=2, timed_iters=30, repetitions=1)
    verdicts = compare_variants(run_sweep(spec), "sla", "sla#2")
    assert set(verdicts.values()) == {"inconclusive"}, f"identical work should overlap: {verdicts}"
