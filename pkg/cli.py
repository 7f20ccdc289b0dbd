"""
Command-line entry point for the SLAB transformer toolkit.

Subcommands:

    slab train  --config PATH --out DIR [--seed INT]
    slab fuse   --checkpoint IN --out OUT
    slab bench  [--target ...] [--variants ...] [--seq-lens ...] [--format csv|json] --out PATH
    slab verify [--suite all|lemma|sla|fusion|gradcheck|rank|schedule]
    slab flops  [--config PATH]

Model, training and data settings come from a TOML file with optional
[model], [train], [data] and [bench] sections; benchmark settings can also
be given as flags, which win over the file.

Exit codes: 0 success, 1 verification or contract failure, 2 usage or
configuration error.
"""

import sys
import json
import logging
import argparse
import tomllib
from contextlib import nullcontext
from dataclasses import dataclass, field, asdict
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from config import config, ConfigError, dataclass_from_section, setup_logging
from normalization import NotConverged
from model import ModelConfig, SlabModel, count_flops, fuse_model
from checkpoint import CheckpointIOError, CorruptCheckpoint, load_checkpoint, save_checkpoint
from datasets import DatasetError, DatasetSpec, load_dataset
from metrics_logger import MetricsLogger
from training import DivergedLoss, TrainConfig, train
from bench import BenchSpec, InsufficientPoints, compare_variants, emit_report, format_ms, run_sweep
from verify import SUITES, format_table, max_logit_difference, random_batches, run_suites

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# keys of [data] that follow [model] unless the data section sets them
SHARED_GEOMETRY = ("input_kind", "image_size", "in_channels", "seq_len", "vocab_size", "num_classes")


@dataclass
class CliConfig:
    """Parsed run configuration: one dataclass per TOML section."""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)
    source: Optional[str] = None

    def apply_seed(self, seed: int) -> None:
        self.model.seed = seed
        self.train.seed = seed
        self.data.seed = seed
        self.bench.seed = seed

    def validate(self) -> None:
        """
        Raises:
            ConfigError: If a section is invalid or [data] disagrees with [model]
        """
        self.model.validate()
        self.train.validate()
        self.data.validate()
        self.bench.validate()
        keys = ["input_kind", "num_classes"]
        keys += ["image_size", "in_channels"] if self.model.input_kind == "image" else ["seq_len", "vocab_size"]
        for key in keys:
            if getattr(self.data, key) != getattr(self.model, key):
                raise ConfigError(f"[data] {key} = {getattr(self.data, key)} disagrees with "
                                  f"[model] {key} = {getattr(self.model, key)}", "data", key)

    def snapshot(self) -> Dict[str, Any]:
        return {
            "source": self.source,
            "model": asdict(self.model),
            "train": asdict(self.train),
            "data": asdict(self.data),
            "bench": asdict(self.bench),
        }


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DatasetSpec, "bench": BenchSpec}


def load_cli_config(path: Optional[Path] = None) -> CliConfig:
    """
    Read and validate a TOML run configuration.

    Missing sections and keys take their defaults. ``[model] precision``
    defaults to ``SLAB_PRECISION``; ``[data]`` input geometry follows
    ``[model]`` unless set explicitly.

    Raises:
        ConfigError: If the file is missing or unreadable, or a section or key is unknown or invalid
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e

    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown section [{unknown[0]}] in {path} (valid sections: {', '.join(SECTIONS)})",
                          unknown[0])
    for name, section in raw.items():
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table", name)

    model_values = dict(raw.get("model", {}))
    model_values.setdefault("precision", config.runtime["default_precision"])
    model = dataclass_from_section(ModelConfig, "model", model_values)

    data_values = dict(raw.get("data", {}))
    for key in SHARED_GEOMETRY:
        data_values.setdefault(key, getattr(model, key))

    cli_config = CliConfig(
        model=model,
        train=dataclass_from_section(TrainConfig, "train", raw.get("train", {})),
        data=dataclass_from_section(DatasetSpec, "data", data_values),
        bench=dataclass_from_section(BenchSpec, "bench", raw.get("bench", {})),
        source=str(path) if path is not None else None,
    )
    cli_config.validate()
    return cli_config


def _write_snapshot(cli_config: CliConfig, out_dir: Path, command: str, extra: Optional[Dict[str, Any]] = None) -> Path:
    snapshot = cli_config.snapshot()
    snapshot.update({"command": command, "created": datetime.now().isoformat(timespec="seconds")})
    snapshot.update(extra or {})
    path = out_dir / "config_snapshot.json"
    path.write_text(json.dumps(snapshot, indent=2, sort_keys=True, default=str), encoding="utf-8")
    return path


# *** subcommands ***

def cmd_train(args: argparse.Namespace) -> int:
    cli_config = load_cli_config(args.config)
    if args.seed is not None:
        cli_config.apply_seed(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_snapshot(cli_config, out_dir, "train", {"seed": args.seed})

    storage = config.storage
    data = load_dataset(cli_config.data)
    model = SlabModel(cli_config.model)
    metrics = MetricsLogger(out_dir / storage["metrics_name"], run_id=out_dir.name)

    print("SLAB training")
    print("=" * 40)
    print(f"Model: depth {model.config.depth}, dim {model.config.dim}, {model.config.norm_kind} + "
          f"{model.config.attn_kind}, {model.num_tensor_elements(learnable_only=True)} parameters")

    artifacts = train(model, data, cli_config.train, metrics=metrics, run_dir=out_dir)
    checkpoint = save_checkpoint(model, out_dir / storage["checkpoint_name"], extra={
        "total_steps": artifacts.total_steps,
        "decay_steps": artifacts.decay_steps,
        "test_loss": artifacts.test_loss,
        "test_acc": artifacts.test_acc,
    })

    print(f"Optimizer steps: {artifacts.total_steps}")
    if model.gamma is not None:
        print(f"Final gamma: {model.gamma:.6f} (decay steps {artifacts.decay_steps})")
    if artifacts.test_acc is not None:
        print(f"Test accuracy: {artifacts.test_acc:.4f}  test loss: {artifacts.test_loss:.4f}")
    print(f"Checkpoint: {checkpoint}")
    print(f"Metrics: {metrics.path}")
    return EXIT_OK


def cmd_fuse(args: argparse.Namespace) -> int:
    source = Path(args.checkpoint)
    if not source.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {source}")
    model = load_checkpoint(source)
    out = Path(args.out)

    if model.config.fused:
        print(f"Notice: {source} is already fused; writing it unchanged to {out}")
        save_checkpoint(model, out, extra={"fused_from": str(source)})
        return EXIT_OK

    fused = fuse_model(model)
    save_checkpoint(fused, out, extra={"fused_from": str(source)})
    rng = np.random.default_rng(args.seed)
    diff = max_logit_difference(model, fused, random_batches(model, args.check_batches, rng))

    print(f"Fused {source} -> {out}")
    print(f"Stored values: {model.num_tensor_elements()} -> {fused.num_tensor_elements()}")
    print(f"max |logit diff| on {args.check_batches} random batches: {diff:.3e}")
    return EXIT_OK


def _csv_list(cast):
    def parse(text: str) -> List[Any]:
        try:
            return [cast(v.strip()) for v in text.split(",") if v.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"invalid list '{text}': {e}")
    return parse


BENCH_FLAGS = ("target", "variants", "seq_lens", "dims", "heads", "warmup_iters", "timed_iters",
               "repetitions", "calls_per_sample", "threads", "batch_size", "precision")


def cmd_bench(args: argparse.Namespace) -> int:
    cli_config = load_cli_config(args.config)
    spec = cli_config.bench
    for name in BENCH_FLAGS:
        value = getattr(args, name)
        if value is not None:
            setattr(spec, name, value)
    if args.target is not None and args.variants is None:
        from bench import VARIANTS
        spec.variants = list(VARIANTS[args.target])
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()

    report = run_sweep(spec)
    path = emit_report(report, args.format, args.out)

    print(f"Benchmark: {spec.target}")
    print("=" * 40)
    for p in report.points:
        print(f"{p.variant:<12} N={p.n:<6} C={p.c:<4} median {format_ms(p.median_ms):>10}  "
              f"IQR {format_ms(p.iqr_ms):>10}  MACs {p.flops}")
    for fit in report.fits:
        print(f"{fit.variant:<12} C={fit.c:<4} slope {fit.slope:.3f} [{fit.ci_lo:.3f}, {fit.ci_hi:.3f}]")
    for notice in report.notices:
        print(f"Notice: {notice}")
    for fast, slow in (("sla", "softmax"), ("fused", "layernorm"), ("bn-sla", "ln-sla"),
                       ("bn-softmax", "ln-softmax")):
        if fast in spec.variants and slow in spec.variants:
            for c in spec.dims:
                verdicts = compare_variants(report, fast, slow, c)
                print(f"{fast} vs {slow} (C={c}): " + ", ".join(f"N={n} {v}" for n, v in verdicts.items()))
    print(f"Report: {path}")

    if args.require_slope and len(report.fits) < len(spec.variants) * len(spec.dims):
        raise InsufficientPoints(f"Slope required but not fitted: {'; '.join(report.notices)}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    names = [n.strip() for n in args.suite.split(",") if n.strip()]
    try:
        results = run_suites(names, seed=args.seed, perturb_eta=args.debug_perturb_eta)
    except ValueError as e:
        raise ConfigError(str(e), "verify", "suite") from e
    print(format_table(results))
    passed = all(r.passed for r in results)
    print(f"\n{'All suites passed' if passed else 'Verification FAILED'}")
    return EXIT_OK if passed else EXIT_FAILURE


def cmd_flops(args: argparse.Namespace) -> int:
    cli_config = load_cli_config(args.config)
    cfg = cli_config.model
    table = count_flops(cfg)
    print(f"Multiply-accumulates per input: depth {cfg.depth}, dim {cfg.dim}, {cfg.heads} heads, "
          f"{cfg.attn_kind} attention, N = {cfg.num_tokens}")
    print("=" * 40)
    width = max(len(k) for k in table)
    for key, value in table.items():
        print(f"{key:<{width}}  {value:>14,}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slab", description="SLAB transformer toolkit")
    parser.add_argument("--log-level", type=str, default=None,
                        help="Override SLAB_LOG_LEVEL (DEBUG, INFO, WARNING, ...)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a model from a TOML config")
    p.add_argument("--config", type=Path, required=True, help="TOML run configuration")
    p.add_argument("--out", type=Path, required=True, help="Output directory for checkpoint and metrics")
    p.add_argument("--seed", type=int, default=None, help="Seed for model, data and training")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("fuse", help="Fold converged PRepBN norms into linear layers")
    p.add_argument("--checkpoint", type=Path, required=True, help="Input checkpoint")
    p.add_argument("--out", type=Path, required=True, help="Fused checkpoint path")
    p.add_argument("--check-batches", type=int, default=8, help="Random batches for the logit comparison")
    p.add_argument("--seed", type=int, default=0, help="Seed for the random batches")
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("bench", help="Latency and scaling benchmark")
    p.add_argument("--config", type=Path, default=None, help="TOML file with a [bench] section")
    p.add_argument("--target", choices=("attention", "normalization", "full-block"), default=None)
    p.add_argument("--variants", type=_csv_list(str), default=None, help="Comma-separated variant names")
    p.add_argument("--seq-lens", dest="seq_lens", type=_csv_list(int), default=None,
                   help="Comma-separated token counts, strictly increasing")
    p.add_argument("--dims", type=_csv_list(int), default=None, help="Comma-separated channel counts")
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--warmup-iters", dest="warmup_iters", type=int, default=None)
    p.add_argument("--timed-iters", dest="timed_iters", type=int, default=None)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--calls-per-sample", dest="calls_per_sample", type=int, default=None,
                   help="Back-to-back calls averaged into one latency sample")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads in the timed region")
    p.add_argument("--precision", choices=("float32", "float64"), default=None)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", type=Path, required=True, help="Report path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--require-slope", action="store_true", help="Fail when a slope cannot be fitted")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("verify", help="Run invariant suites")
    p.add_argument("--suite", type=str, default="all",
                   help=f"all or a comma-separated subset of: {', '.join(SUITES)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--debug-perturb-eta", dest="debug_perturb_eta", type=float, default=0.0,
                   help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("flops", help="Print the multiply-accumulate table of a config")
    p.add_argument("--config", type=Path, default=None, help="TOML file with a [model] section")
    p.set_defaults(handler=cmd_flops)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse ``argv`` and run one subcommand.

    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    setup_logging()
    if args.log_level:
        logging.getLogger().setLevel(getattr(logging, args.log_level.upper(), logging.INFO))

    threads = config.runtime["threads"]
    limits = threadpool_limits(limits=threads) if threads and args.command != "bench" else nullcontext()
    try:
        with limits:
            return args.handler(args)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CheckpointIOError, DatasetError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NotConverged as e:
        print(f"Not converged: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except DivergedLoss as e:
        where = f"; last good state saved to {e.checkpoint_path}" if e.checkpoint_path else ""
        print(f"Training diverged at step {e.step}: {e}{where}", file=sys.stderr)
        return EXIT_FAILURE
    except CorruptCheckpoint as e:
        print(f"Corrupt checkpoint: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except InsufficientPoints as e:
        print(f"Insufficient points: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
