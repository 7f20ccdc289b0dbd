#!/usr/bin/env python3
"""
Quick Start Script for the SLAB transformer toolkit
Run this to verify all modules import and the core invariants hold
"""

import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))


def check_imports():
    """Verify all required modules can be imported"""
    modules_to_check = [
        ('config', 'config'),
        ('tensor_core', 'Tensor'),
        ('normalization', 'prepbn'),
        ('attention', 'sla_attention'),
        ('model', 'SlabModel'),
        ('checkpoint', 'save_checkpoint'),
        ('datasets', 'load_dataset'),
        ('metrics_logger', 'MetricsLogger'),
        ('training', 'train'),
        ('bench', 'run_sweep'),
        ('verify', 'run_suites'),
    ]

    print("🔍 Checking module imports...")
    all_good = True

    for module_name, attr in modules_to_check:
        try:
            module = __import__(module_name)
            if hasattr(module, attr):
                print(f"✅ {module_name}.{attr} imported successfully")
            else:
                print(f"⚠️  {module_name} imported but {attr} not found")
                all_good = False
        except ImportError as e:
            print(f"❌ Failed to import {module_name}: {e}")
            all_good = False

    return all_good


def check_directories():
    """Ensure data, run and log directories exist"""
    print("\n🔍 Checking directory structure...")

    from config import config as cfg
    for dir_path in (cfg.storage["data_dir"], cfg.storage["runs_dir"], cfg.logging["log_dir"]):
        if not dir_path.exists():
            dir_path.mkdir(parents=True, exist_ok=True)
            print(f"📁 Created {dir_path}/ directory")
        else:
            print(f"✅ {dir_path}/ directory exists")

    return True


def test_basic_functionality():
    """Run the fast invariant suites and a tiny forward pass"""
    print("\n🧪 Testing basic functionality...")

    try:
        import numpy as np
        from model import ModelConfig, SlabModel, count_flops
        from verify import run_suites

        model = SlabModel(ModelConfig())
        logits = model(np.zeros((2, 1, 8, 8), dtype=np.float32))
        print(f"✅ Default model forward: logits {logits.shape}, {count_flops(model.config)['total']:,} MACs")

        for result in run_suites(["lemma", "sla", "rank"]):
            status = "✅" if result.passed else "❌"
            print(f"{status} {result.name} suite: max error {result.max_error:.2e}")
            if not result.passed:
                return False
        return True
    except Exception as e:
        print(f"❌ Error during functionality test: {e}")
        return False


def main():
    """Main quick start verification"""
    print("=" * 60)
    print("SLAB Transformer Toolkit - Quick Start")
    print("=" * 60)

    imports_ok = check_imports()
    dirs_ok = check_directories() if imports_ok else False
    functional_ok = test_basic_functionality() if imports_ok and dirs_ok else False

    # Summary
    print("\n" + "=" * 60)
    print("📊 System Check Summary:")
    print("=" * 60)

    all_ready = imports_ok and dirs_ok and functional_ok

    if all_ready:
        print("✅ System is ready to use!")
        print("\n🚀 Try a toy training run:")
        print("   slab train --config configs/prepbn_sla.toml --out runs/prepbn_sla")
        print("   slab fuse --checkpoint runs/prepbn_sla/model.slab --out runs/prepbn_sla/fused.slab")
        print("\n📚 See README.md for the full command reference")
    else:
        print("⚠️  Some issues need to be resolved:")
        if not imports_ok:
            print("   - Fix import errors (uv pip install -e .)")
        if not functional_ok:
            print("   - Check error messages above")

    return 0 if all_ready else 1


if __name__ == "__main__":
    sys.exit(main())
