"""
Configuration module for the SLAB transformer toolkit.

This module provides centralized runtime configuration for all components
including kernel threading, storage locations, HDF5 snapshot settings and
logging. Settings come from environment variables (optionally loaded from a
.env file), are validated, and can be overridden programmatically.

Run configuration for training and benchmarking ([model], [train], [bench],
[data] sections) lives in TOML files; ``dataclass_from_section`` maps one
section onto its dataclass and rejects unknown keys.
"""

import os
import logging
import dataclasses
from pathlib import Path
from typing import Dict, Any, Optional, Union, Type, TypeVar, get_type_hints

from dotenv import load_dotenv

T = TypeVar("T")


class ConfigError(Exception):
    """Raised when there's an error in configuration."""

    def __init__(self, message: str, section: Optional[str] = None, key: Optional[str] = None):
        super().__init__(message)
        self.section = section
        self.key = key


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() == "true"


class Config:
    """
    Centralized runtime configuration for the SLAB toolkit.

    This class manages all environment-level settings with support for:
    - Loading from environment variables via .env file
    - Configuration validation
    - Override capabilities
    - Default fallback values
    """

    SECTIONS = ("runtime", "storage", "logging")

    def __init__(self, env_file: Optional[Union[str, Path]] = None, validate: bool = True):
        """
        Initialize configuration.

        Args:
            env_file: Path to .env file. If None, looks for .env in current directory
            validate: Whether to validate configuration values
        """
        if env_file is None:
            env_file = Path.cwd() / ".env"
        if Path(env_file).exists():
            load_dotenv(env_file)

        self._runtime_settings = self._load_runtime_settings()
        self._storage_settings = self._load_storage_settings()
        self._logging_settings = self._load_logging_settings()

        if validate:
            self._validate_config()

    def _load_runtime_settings(self) -> Dict[str, Any]:
        """Load kernel and threading settings."""
        threads = os.getenv("SLAB_THREADS")
        return {
            "threads": int(threads) if threads else None,
            "bench_threads": int(os.getenv("SLAB_BENCH_THREADS", "1")),
            "default_precision": os.getenv("SLAB_PRECISION", "float32"),
        }

    def _load_storage_settings(self) -> Dict[str, Any]:
        """Load storage-related configuration settings."""
        data_dir = Path(os.getenv("SLAB_DATA_DIR", "./data"))
        return {
            "data_dir": data_dir,
            "runs_dir": Path(os.getenv("SLAB_RUNS_DIR", "./runs")),
            "checkpoint_name": os.getenv("SLAB_CHECKPOINT_NAME", "model.slab"),
            "metrics_name": os.getenv("SLAB_METRICS_NAME", "metrics.jsonl"),
            "compression": os.getenv("SLAB_HDF5_COMPRESSION", "gzip"),
            "compression_level": int(os.getenv("SLAB_HDF5_COMPRESSION_LEVEL", "4")),
            "chunk_rows": int(os.getenv("SLAB_HDF5_CHUNK_ROWS", "1024")),
        }

    def _load_logging_settings(self) -> Dict[str, Any]:
        """Load logging-related configuration settings."""
        log_level_str = os.getenv("SLAB_LOG_LEVEL", "INFO").upper()
        log_level = getattr(logging, log_level_str, logging.INFO)

        return {
            "log_level": log_level,
            "log_file": os.getenv("SLAB_LOG_FILE", "slab.log"),
            "log_dir": Path(os.getenv("SLAB_LOG_DIR", "./logs")),
            "log_rotation": _env_bool("SLAB_LOG_ROTATION", "True"),
            "max_log_size_mb": int(os.getenv("SLAB_MAX_LOG_SIZE_MB", "10")),
            "backup_count": int(os.getenv("SLAB_LOG_BACKUP_COUNT", "5")),
            "console_logging": _env_bool("SLAB_CONSOLE_LOGGING", "True"),
            "file_logging": _env_bool("SLAB_FILE_LOGGING", "True"),
            "debug_mode": _env_bool("SLAB_DEBUG", "False"),
            "log_format": os.getenv("SLAB_LOG_FORMAT", "%(asctime)s - %(name)s - %(levelname)s - %(message)s"),
            "date_format": os.getenv("SLAB_DATE_FORMAT", "%Y-%m-%d %H:%M:%S"),
        }

    def _validate_config(self) -> None:
        """Validate configuration values."""
        threads = self._runtime_settings["threads"]
        if threads is not None and threads <= 0:
            raise ConfigError("SLAB_THREADS must be positive", "runtime", "threads")

        if self._runtime_settings["bench_threads"] <= 0:
            raise ConfigError("Bench threads must be positive", "runtime", "bench_threads")

        precision = self._runtime_settings["default_precision"]
        if precision not in ("float32", "float64"):
            raise ConfigError(f"SLAB_PRECISION must be float32 or float64, got {precision}",
                              "runtime", "default_precision")

        if not 0 <= self._storage_settings["compression_level"] <= 9:
            raise ConfigError("Compression level must be between 0 and 9", "storage", "compression_level")

        if self._storage_settings["chunk_rows"] <= 0:
            raise ConfigError("HDF5 chunk rows must be positive", "storage", "chunk_rows")

        if self._logging_settings["max_log_size_mb"] <= 0:
            raise ConfigError("Max log size must be positive", "logging", "max_log_size_mb")

        if self._logging_settings["backup_count"] < 0:
            raise ConfigError("Backup count must be non-negative", "logging", "backup_count")

    def _section_map(self) -> Dict[str, Dict[str, Any]]:
        return {
            "runtime": self._runtime_settings,
            "storage": self._storage_settings,
            "logging": self._logging_settings,
        }

    def override(self, section: str, key: str, value: Any, validate: bool = True) -> None:
        """
        Override a configuration value.

        Args:
            section: Configuration section (runtime, storage, logging)
            key: Configuration key
            value: New value
            validate: Whether to validate after setting the value
        """
        section_map = self._section_map()
        if section not in section_map:
            raise ConfigError(f"Unknown configuration section: {section}", section)
        if key not in section_map[section]:
            raise ConfigError(f"Unknown configuration key: {key} in section {section}", section, key)

        old_value = section_map[section][key]
        section_map[section][key] = value

        if validate:
            try:
                self._validate_config()
            except ConfigError:
                section_map[section][key] = old_value
                raise

    def get(self, section: str, key: str, default: Any = None) -> Any:
        """Get a configuration value, or ``default`` when section or key is unknown."""
        section_map = self._section_map()
        if section not in section_map:
            return default
        return section_map[section].get(key, default)

    def get_section(self, section: str) -> Dict[str, Any]:
        """
        Get entire configuration section.

        Args:
            section: Configuration section name

        Returns:
            Dictionary containing section configuration
        """
        section_map = self._section_map()
        if section not in section_map:
            raise ConfigError(f"Unknown configuration section: {section}", section)
        return section_map[section].copy()

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        """Export all configuration as a dictionary."""
        return {name: values.copy() for name, values in self._section_map().items()}

    @property
    def runtime(self) -> Dict[str, Any]:
        """Runtime (threading / precision) settings."""
        return self._runtime_settings.copy()

    @property
    def storage(self) -> Dict[str, Any]:
        """Storage configuration settings."""
        return self._storage_settings.copy()

    @property
    def logging(self) -> Dict[str, Any]:
        """Logging configuration settings."""
        return self._logging_settings.copy()


# Global configuration instance
config = Config()


def setup_logging() -> None:
    """Setup logging configuration based on config settings."""
    log_config = config.logging
    handlers = []

    if log_config["file_logging"]:
        log_dir = log_config["log_dir"]
        log_dir.mkdir(parents=True, exist_ok=True)
        log_file_path = log_dir / log_config["log_file"]

        if log_config["log_rotation"]:
            from logging.handlers import RotatingFileHandler
            file_handler = RotatingFileHandler(
                log_file_path,
                maxBytes=log_config["max_log_size_mb"] * 1024 * 1024,
                backupCount=log_config["backup_count"]
            )
        else:
            file_handler = logging.FileHandler(log_file_path)

        file_handler.setLevel(log_config["log_level"])
        file_handler.setFormatter(logging.Formatter(log_config["log_format"], datefmt=log_config["date_format"]))
        handlers.append(file_handler)

    if log_config["console_logging"]:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(log_config["log_level"])
        console_handler.setFormatter(logging.Formatter(log_config["log_format"], datefmt=log_config["date_format"]))
        handlers.append(console_handler)

    logging.basicConfig(level=log_config["log_level"], handlers=handlers, force=True)

    if log_config["debug_mode"]:
        logging.getLogger().setLevel(logging.DEBUG)
        logging.getLogger("h5py").setLevel(logging.INFO)


def _coerce(value: Any, annotation: Any, section: str, key: str) -> Any:
    """Convert a TOML value onto a dataclass field annotation."""
    origin = getattr(annotation, "__origin__", None)
    args = getattr(annotation, "__args__", ())

    if origin is Union and type(None) in args:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, section, key)

    try:
        if annotation is bool:
            if not isinstance(value, bool):
                raise TypeError(f"expected true/false, got {value!r}")
            return value
        if annotation is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError(f"expected an integer, got {value!r}")
            return int(value)
        if annotation is float:
            if isinstance(value, bool):
                raise TypeError(f"expected a number, got {value!r}")
            return float(value)
        if annotation is str:
            if not isinstance(value, str):
                raise TypeError(f"expected a string, got {value!r}")
            return value
        if origin in (list, tuple):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            if not isinstance(value, (list, tuple)):
                raise TypeError(f"expected a list, got {value!r}")
            inner = args[0] if args else Any
            items = [_coerce(v, inner, section, key) if inner is not Any else v for v in value]
            return tuple(items) if origin is tuple else items
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {key}: {e}", section, key) from e
    return value


def dataclass_from_section(cls: Type[T], section: str, values: Dict[str, Any]) -> T:
    """
    Build a configuration dataclass from one TOML section.

    Args:
        cls: Target dataclass type
        section: Section name, used in error messages
        values: Raw key/value pairs from the section

    Returns:
        Instance of ``cls``; defaults fill every key that is absent

    Raises:
        ConfigError: If a key is unknown or a value has the wrong type
    """
    hints = get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            valid = ", ".join(sorted(fields))
            raise ConfigError(f"Unknown key '{key}' in section [{section}] (valid keys: {valid})", section, key)
        kwargs[key] = _coerce(value, hints[key], section, key)
    return cls(**kwargs)
