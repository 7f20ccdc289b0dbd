#!/usr/bin/env python3
"""
Tests for the datasets module: synthetic generation, HDF5 snapshots, the
CSV and image-folder sources, batching and validation errors.
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import ConfigError
from datasets import DatasetError, DatasetSpec, build_dataset, load_dataset, load_snapshot, save_dataset


def _spec(**overrides):
    settings = dict(num_samples=40, image_size=4, num_classes=3, seed=7)
    settings.update(overrides)
    return DatasetSpec(**settings)


def test_synthetic_images_are_deterministic():
    """The same spec always yields the same arrays and split."""
    a, b = build_dataset(_spec()), build_dataset(_spec())
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_test, b.y_test), "same seed, same data"
    assert a.x_train.shape == (32, 1, 4, 4), "80% of 40 samples go to training"
    assert len(a.x_test) == 8
    assert a.x_train.dtype == np.float32 and a.y_train.dtype == np.int64

    c = build_dataset(_spec(seed=8))
    assert not np.array_equal(a.x_train, c.x_train), "a different seed changes the data"


def test_synthetic_tokens_range():
    ds = build_dataset(_spec(input_kind="tokens", seq_len=6, vocab_size=5))
    assert ds.x_train.shape[1] == 6
    assert ds.x_train.min() >= 0 and ds.x_train.max() < 5, "token ids stay inside the vocabulary"


def test_batches_cover_split_without_repeats():
    ds = build_dataset(_spec())
    seen = [y for _, y in ds.batches(8, rng=np.random.default_rng(0))]
    assert len(seen) == ds.steps_per_epoch(8) == 4
    assert sum(len(y) for y in seen) == 32

    partial = list(ds.batches(6, shuffle=False, drop_last=False, split="test"))
    assert [len(x) for x, _ in partial] == [6, 2], "a trailing partial batch is kept when asked"
    with pytest.raises(ValueError):
        next(ds.batches(0))


def test_snapshot_round_trip_and_cache(tmp_path):
    """A snapshot reloads identical arrays; a changed spec rebuilds the cache."""
    ds = build_dataset(_spec())
    path = save_dataset(ds, tmp_path / "data.h5")
    loaded = load_snapshot(path)
    assert np.array_equal(loaded.x_train, ds.x_train) and np.array_equal(loaded.y_test, ds.y_test)
    assert loaded.spec == ds.spec, "the spec travels with the snapshot"

    cached = _spec(cache_path=str(tmp_path / "cache.h5"))
    first = load_dataset(cached)
    assert (tmp_path / "cache.h5").exists(), "load_dataset writes the cache"
    again = load_dataset(cached)
    assert np.array_equal(first.x_train, again.x_train)

    rebuilt = load_dataset(replace(cached, noise=1.0))
    assert rebuilt.spec.noise == 1.0, "a stale snapshot is rebuilt"


def test_csv_tokens_source(tmp_path):
    csv = tmp_path / "tokens.csv"
    pd.DataFrame({"label": [0, 1, 0, 1], "tokens": ["1 2 3", "3 2 1", "0 0 1", "4 4 4"]}).to_csv(csv, index=False)
    ds = build_dataset(DatasetSpec(source="csv-tokens", input_kind="tokens", path=str(csv), num_samples=4,
                                   seq_len=3, vocab_size=5, num_classes=2))
    assert len(ds.x_train) + len(ds.x_test) == 4
    assert ds.x_train.shape[1] == 3

    pd.DataFrame({"label": [0, 1], "tokens": ["1 2", "3 2 1"]}).to_csv(csv, index=False)
    with pytest.raises(DatasetError):
        build_dataset(DatasetSpec(source="csv-tokens", input_kind="tokens", path=str(csv), seq_len=3,
                                  vocab_size=5, num_classes=2))


def test_image_folder_source(tmp_path):
    from PIL import Image

    rng = np.random.default_rng(0)
    for name in ("cats", "dogs"):
        (tmp_path / name).mkdir()
        for i in range(3):
            pixels = rng.integers(0, 256, (10, 10), dtype=np.uint8)
            Image.fromarray(pixels).save(tmp_path / name / f"{i}.png")
    (tmp_path / "cats" / "notes.txt").write_text("ignored")

    ds = build_dataset(DatasetSpec(source="image-folder", path=str(tmp_path), image_size=4, num_classes=2))
    total = len(ds.x_train) + len(ds.x_test)
    assert total == 6, "non-image files are skipped"
    assert ds.x_train.shape[1:] == (1, 4, 4), "images are resized to the configured size"
    assert 0.0 <= ds.x_train.min() and ds.x_train.max() <= 1.0, "pixels are scaled to [0, 1]"

    with pytest.raises(DatasetError):
        build_dataset(DatasetSpec(source="image-folder", path=str(tmp_path), image_size=4, num_classes=3))
    with pytest.raises(DatasetError):
        build_dataset(DatasetSpec(source="image-folder", path=str(tmp_path / "missing"), num_classes=2))


def test_spec_validation_names_the_key():
    with pytest.raises(ConfigError) as info:
        DatasetSpec(source="csv-tokens", input_kind="tokens").validate()
    assert info.value.key == "path", "a file source without a path should name [data] path"
    with pytest.raises(ConfigError):
        DatasetSpec(train_fraction=0.9, test_fraction=0.3).validate()
    with pytest.raises(ConfigError):
        DatasetSpec(source="mnist").validate()
