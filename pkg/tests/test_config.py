#!/usr/bin/env python3
"""
Tests for runtime configuration and TOML section parsing.
"""

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import pytest

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import Config, ConfigError, dataclass_from_section


@dataclass
class _Section:
    epochs: int = 3
    lr: Optional[float] = None
    name: str = "run"
    flag: bool = False
    sizes: List[int] = field(default_factory=lambda: [1, 2])


def test_env_settings_and_defaults(tmp_path, monkeypatch):
    """Environment variables from a .env file feed the runtime section."""
    # private copy so values loaded from the .env file do not leak into other tests
    environ = {k: v for k, v in os.environ.items() if k not in ("SLAB_THREADS", "SLAB_PRECISION")}
    monkeypatch.setattr(os, "environ", environ)
    env = tmp_path / ".env"
    env.write_text("SLAB_THREADS=2\nSLAB_PRECISION=float64\n")
    cfg = Config(env_file=env)
    assert cfg.runtime["threads"] == 2
    assert cfg.runtime["default_precision"] == "float64"
    assert cfg.storage["checkpoint_name"] == "model.slab"
    print("✓ Environment settings passed")


def test_invalid_env_values_are_rejected(monkeypatch):
    monkeypatch.setenv("SLAB_PRECISION", "float16")
    with pytest.raises(ConfigError) as info:
        Config(env_file="does-not-exist.env")
    assert info.value.key == "default_precision"


def test_override_validates_and_rolls_back():
    cfg = Config(env_file="does-not-exist.env")
    cfg.override("runtime", "bench_threads", 4)
    assert cfg.get("runtime", "bench_threads") == 4
    with pytest.raises(ConfigError):
        cfg.override("runtime", "bench_threads", 0)
    assert cfg.runtime["bench_threads"] == 4, "a rejected override leaves the old value"
    with pytest.raises(ConfigError):
        cfg.override("runtime", "gpu", True)
    with pytest.raises(ConfigError):
        cfg.get_section("network")
    assert cfg.get("network", "x", "fallback") == "fallback"


def test_section_coercion():
    section = dataclass_from_section(_Section, "train", {"epochs": 5.0, "lr": 1, "sizes": "4, 8"})
    assert section.epochs == 5 and isinstance(section.epochs, int)
    assert section.lr == 1.0 and isinstance(section.lr, float)
    assert section.sizes == [4, 8], "comma-separated strings become lists"
    assert section.name == "run", "absent keys take their defaults"


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError) as info:
        dataclass_from_section(_Section, "train", {"epohcs": 3})
    message = str(info.value)
    assert info.value.section == "train" and info.value.key == "epohcs"
    assert "valid keys: epochs, flag, lr, name, sizes" in message


@pytest.mark.parametrize("key,value", [("epochs", 2.5), ("epochs", True), ("flag", "yes"), ("name", 3),
                                       ("sizes", 7)])
def test_wrong_types_name_the_key(key, value):
    with pytest.raises(ConfigError) as info:
        dataclass_from_section(_Section, "train", {key: value})
    assert info.value.key == key
