"""
Dataset module for the SLAB transformer toolkit.

Materializes small classification datasets for training runs:

- synthetic-clusters: class prototype images (or token distributions) plus
  Gaussian noise, constructed to be learnable by a few-block model
- image-folder: ``root/<class_name>/*.png|jpg`` decoded with Pillow
- csv-tokens: a CSV with ``label`` and ``tokens`` (space separated ids) columns

A materialized dataset can be cached as an HDF5 snapshot using chunked,
compressed datasets, so repeated runs read identical arrays.
"""

import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

try:
    import h5py
except ImportError:
    raise ImportError(
        "h5py is required for dataset snapshots. Install with: pip install h5py>=3.0.0"
    )

from config import config, ConfigError

logger = logging.getLogger(__name__)

SOURCES = ("synthetic-clusters", "image-folder", "csv-tokens")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}


class DatasetError(ValueError):
    """Raised when a data source cannot produce a valid dataset."""
    pass


@dataclass
class DatasetSpec:
    """Where examples come from, how many, their geometry and the split."""
    source: str = "synthetic-clusters"
    input_kind: str = "image"
    num_samples: int = 2048
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    image_size: int = 8
    in_channels: int = 1
    seq_len: int = 16
    vocab_size: int = 16
    num_classes: int = 4
    noise: float = 0.5
    path: Optional[str] = None
    cache_path: Optional[str] = None
    seed: int = 0

    def validate(self) -> None:
        """
        Raises:
            ConfigError: Naming the offending [data] key
        """
        def fail(key: str, message: str):
            raise ConfigError(f"[data] {key}: {message}", "data", key)

        if self.source not in SOURCES:
            fail("source", f"must be one of {', '.join(SOURCES)}, got '{self.source}'")
        if self.input_kind not in ("image", "tokens"):
            fail("input_kind", f"must be image or tokens, got '{self.input_kind}'")
        if self.source == "image-folder" and self.input_kind != "image":
            fail("input_kind", "image-folder produces image inputs")
        if self.source == "csv-tokens" and self.input_kind != "tokens":
            fail("input_kind", "csv-tokens produces token inputs")
        if self.source != "synthetic-clusters" and not self.path:
            fail("path", f"source '{self.source}' needs a path")
        if self.num_samples < 2:
            fail("num_samples", f"must be >= 2, got {self.num_samples}")
        if not (0 < self.train_fraction < 1 and 0 < self.test_fraction < 1):
            fail("train_fraction", "split fractions must lie in (0, 1)")
        if self.train_fraction + self.test_fraction > 1.0 + 1e-9:
            fail("test_fraction", "train_fraction + test_fraction must not exceed 1")
        if self.num_classes < 2:
            fail("num_classes", f"must be >= 2, got {self.num_classes}")
        if self.noise < 0:
            fail("noise", f"must be non-negative, got {self.noise}")


@dataclass
class Dataset:
    """Materialized train/test arrays with integer labels."""
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    spec: DatasetSpec

    def __len__(self) -> int:
        return len(self.x_train)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None, shuffle: bool = True,
                drop_last: bool = True, split: str = "train") -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """
        Yield ``(x, y)`` batches.

        Args:
            batch_size: Examples per batch
            rng: Generator used for shuffling (order is deterministic per generator state)
            shuffle: Shuffle the split before batching
            drop_last: Skip the trailing partial batch
            split: "train" or "test"
        """
        if batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        x, y = (self.x_train, self.y_train) if split == "train" else (self.x_test, self.y_test)
        order = np.arange(len(x))
        if shuffle:
            order = (rng or np.random.default_rng(self.spec.seed)).permutation(len(x))
        stop = len(x) - len(x) % batch_size if drop_last else len(x)
        for start in range(0, stop, batch_size):
            idx = order[start:start + batch_size]
            yield x[idx], y[idx]

    def steps_per_epoch(self, batch_size: int) -> int:
        return len(self.x_train) // batch_size


def _split(x: np.ndarray, y: np.ndarray, spec: DatasetSpec, rng: np.random.Generator) -> Dataset:
    order = rng.permutation(len(x))
    n_train = int(round(len(x) * spec.train_fraction))
    n_test = int(round(len(x) * spec.test_fraction))
    n_train = min(max(n_train, 1), len(x) - 1)
    n_test = min(max(n_test, 1), len(x) - n_train)
    train, test = order[:n_train], order[n_train:n_train + n_test]
    return Dataset(x[train], y[train], x[test], y[test], spec)


def _synthetic_images(spec: DatasetSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    shape = (spec.in_channels, spec.image_size, spec.image_size)
    prototypes = rng.normal(0.0, 1.0, (spec.num_classes,) + shape)
    labels = rng.integers(0, spec.num_classes, spec.num_samples)
    x = prototypes[labels] + spec.noise * rng.normal(0.0, 1.0, (spec.num_samples,) + shape)
    return x.astype(np.float32), labels.astype(np.int64)


def _synthetic_tokens(spec: DatasetSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    # each class prefers its own random token distribution; noise flattens it
    logits = rng.normal(0.0, 2.0, (spec.num_classes, spec.vocab_size)) / max(spec.noise, 1e-3)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.integers(0, spec.num_classes, spec.num_samples)
    x = np.stack([rng.choice(spec.vocab_size, spec.seq_len, p=probs[c]) for c in labels])
    return x.astype(np.int64), labels.astype(np.int64)


def _image_folder(spec: DatasetSpec) -> Tuple[np.ndarray, np.ndarray]:
    from PIL import Image

    root = Path(spec.path)
    if not root.is_dir():
        raise DatasetError(f"Image folder not found: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise DatasetError(f"Image folder {root} needs at least two class directories, found {len(classes)}")
    if len(classes) != spec.num_classes:
        raise DatasetError(f"Image folder {root} has {len(classes)} classes, num_classes is {spec.num_classes}")

    mode = "L" if spec.in_channels == 1 else "RGB"
    images: List[np.ndarray] = []
    labels: List[int] = []
    for label, name in enumerate(classes):
        for file in sorted((root / name).iterdir()):
            if file.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(file) as img:
                img = img.convert(mode).resize((spec.image_size, spec.image_size))
                arr = np.asarray(img, dtype=np.float32) / 255.0
            images.append(arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1))
            labels.append(label)
    if len(images) < 2:
        raise DatasetError(f"Image folder {root} contains fewer than two images")
    logger.info(f"Loaded {len(images)} images in {len(classes)} classes from {root}")
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def _csv_tokens(spec: DatasetSpec) -> Tuple[np.ndarray, np.ndarray]:
    import pandas as pd

    path = Path(spec.path)
    if not path.is_file():
        raise DatasetError(f"Token CSV not found: {path}")
    frame = pd.read_csv(path)
    for column in ("label", "tokens"):
        if column not in frame.columns:
            raise DatasetError(f"{path}: missing column '{column}'")

    rows = [np.array(str(t).split(), dtype=np.int64) for t in frame["tokens"]]
    bad = [i for i, r in enumerate(rows) if len(r) != spec.seq_len]
    if bad:
        raise DatasetError(f"{path}: row {bad[0]} has {len(rows[bad[0]])} tokens, expected {spec.seq_len}")
    x = np.stack(rows)
    if x.min() < 0 or x.max() >= spec.vocab_size:
        raise DatasetError(f"{path}: token ids must lie in [0, {spec.vocab_size})")
    y = frame["label"].to_numpy(dtype=np.int64)
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise DatasetError(f"{path}: labels must lie in [0, {spec.num_classes})")
    return x, y


def build_dataset(spec: DatasetSpec) -> Dataset:
    """Materialize ``spec`` from its source (no cache involved)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.source == "synthetic-clusters":
        x, y = _synthetic_tokens(spec, rng) if spec.input_kind == "tokens" else _synthetic_images(spec, rng)
    elif spec.source == "image-folder":
        x, y = _image_folder(spec)
    else:
        x, y = _csv_tokens(spec)
    dataset = _split(x, y, spec, rng)
    logger.info(f"Dataset {spec.source}: {len(dataset.x_train)} train / {len(dataset.x_test)} test examples")
    return dataset


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    """
    Write a dataset snapshot to HDF5.

    Layout: ``/train/x``, ``/train/y``, ``/test/x``, ``/test/y`` plus the
    JSON-encoded spec in the root ``spec`` attribute.
    """
    path = Path(path)
    storage = config.storage
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_name(path.name + ".tmp")

    with h5py.File(temp_file, "w") as f:
        f.attrs["spec"] = json.dumps(asdict(dataset.spec), sort_keys=True)
        for split, x, y in (("train", dataset.x_train, dataset.y_train), ("test", dataset.x_test, dataset.y_test)):
            group = f.create_group(split)
            for name, data in (("x", x), ("y", y)):
                rows = max(1, min(storage["chunk_rows"], len(data)))
                group.create_dataset(
                    name,
                    data=data,
                    chunks=(rows,) + data.shape[1:],
                    compression=storage["compression"],
                    compression_opts=storage["compression_level"],
                    shuffle=True,  # Improves compression
                    fletcher32=True  # Error detection
                )
    temp_file.replace(path)
    logger.info(f"Dataset snapshot written: {path}")
    return path


def load_snapshot(path: Union[str, Path]) -> Dataset:
    """Read a dataset snapshot written by ``save_dataset``."""
    path = Path(path)
    try:
        with h5py.File(path, "r") as f:
            spec = DatasetSpec(**json.loads(f.attrs["spec"]))
            arrays: Dict[str, Any] = {
                f"{kind}_{split}": f[f"{split}/{kind}"][...] for split in ("train", "test") for kind in ("x", "y")
            }
    except (OSError, KeyError) as e:
        raise DatasetError(f"Cannot read dataset snapshot {path}: {e}") from e
    return Dataset(spec=spec, **arrays)


def load_dataset(spec: DatasetSpec) -> Dataset:
    """
    Materialize ``spec``, reusing its HDF5 snapshot when ``cache_path`` is set.

    A snapshot whose stored spec differs from ``spec`` is rebuilt.
    """
    if spec.cache_path:
        cache = Path(spec.cache_path)
        if cache.exists():
            dataset = load_snapshot(cache)
            if asdict(dataset.spec) == asdict(spec):
                logger.info(f"Dataset loaded from snapshot {cache}")
                return dataset
            logger.warning(f"Snapshot {cache} was built from a different spec; rebuilding")
        dataset = build_dataset(spec)
        save_dataset(dataset, cache)
        return dataset
    return build_dataset(spec)
