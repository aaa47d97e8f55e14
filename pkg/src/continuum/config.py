"""Run configuration: typed sections, file loading and seed derivation.

Configuration files are TOML or JSON documents whose top-level tables mirror
``RunConfig``'s sections. Unknown keys are rejected and every field is
validated on construction, so a bad file fails before any stage runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

from .exceptions import ConfigError

T = TypeVar("T")


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{key}: {message}")


@dataclass(frozen=True)
class IngestConfig:
    format: str = "streamspot"
    inputs: list[str] = field(default_factory=list)
    labels: str = ""
    node_labels: str = ""

    def __post_init__(self) -> None:
        _require(
            self.format in ("streamspot", "canonical"),
            "ingest.format",
            f"must be 'streamspot' or 'canonical', got {self.format!r}",
        )


@dataclass(frozen=True)
class SnapshotConfig:
    n: int = 3
    binary: bool = False

    def __post_init__(self) -> None:
        _require(self.n >= 1, "snapshot.n", f"must be >= 1, got {self.n}")


@dataclass(frozen=True)
class ModelConfig:
    """Autoencoder hyperparameters.

    ``d_node`` and ``d_edge`` are the vocabulary sizes; stages fill them in from
    the dataset, so files normally leave them out.
    """

    d_node: int = 1
    d_edge: int = 1
    d_hidden: int = 64
    n_gnn_layers: int = 2
    n_heads: int = 4
    dropout_p: float = 0.1
    use_edge_features: bool = True
    epochs: int = 6
    lr: float = 1e-3
    seed: int = 0
    sce_alpha: float = 1.0
    sce_beta: float = 1.0
    sce_eps: float = 1e-4
    leaky_slope: float = 0.2
    edge_transform: str = "log1p"

    def __post_init__(self) -> None:
        for name in ("d_node", "d_edge", "d_hidden", "n_gnn_layers", "n_heads"):
            _require(getattr(self, name) >= 1, f"model.{name}", "must be >= 1")
        _require(
            self.d_hidden % self.n_heads == 0,
            "model.d_hidden",
            f"{self.d_hidden} is not divisible by n_heads={self.n_heads}",
        )
        _require(0.0 <= self.dropout_p < 1.0, "model.dropout_p", "must be in [0, 1)")
        _require(self.epochs >= 0, "model.epochs", "must be >= 0")
        _require(self.lr > 0, "model.lr", "must be > 0")
        _require(0.0 < self.sce_eps < 0.5, "model.sce_eps", "must be in (0, 0.5)")
        _require(
            self.edge_transform in ("log1p", "raw"),
            "model.edge_transform",
            "must be 'log1p' or 'raw'",
        )

    @property
    def head_dim(self) -> int:
        return self.d_hidden // self.n_heads


@dataclass(frozen=True)
class DetectConfig:
    k: int = 5
    train_fraction: float = 0.8
    val_fraction: float = 0.5
    level: str = "graph"

    def __post_init__(self) -> None:
        _require(self.k >= 1, "detect.k", "must be >= 1")
        _require(
            0.0 < self.train_fraction <= 1.0, "detect.train_fraction", "must be in (0, 1]"
        )
        _require(0.0 < self.val_fraction < 1.0, "detect.val_fraction", "must be in (0, 1)")
        _require(
            self.level in ("graph", "node"), "detect.level", "must be 'graph' or 'node'"
        )


@dataclass(frozen=True)
class FedConfig:
    """Federation settings; aggregation is always the unweighted mean."""

    n_clients: int = 3
    threshold: int = 2
    rounds: int = 3
    local_epochs: int = 2
    aggregation: str = "mean"
    decrypt_subset: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        _require(self.n_clients >= 2, "federation.n_clients", "must be >= 2")
        _require(
            1 < self.threshold <= self.n_clients,
            "federation.threshold",
            f"must satisfy 1 < t <= n_clients, got t={self.threshold}",
        )
        _require(self.rounds >= 1, "federation.rounds", "must be >= 1")
        _require(self.local_epochs >= 0, "federation.local_epochs", "must be >= 0")
        _require(self.aggregation == "mean", "federation.aggregation", "only 'mean' is supported")
        if self.decrypt_subset:
            _require(
                len(set(self.decrypt_subset)) == self.threshold,
                "federation.decrypt_subset",
                f"must name exactly {self.threshold} distinct share indices",
            )
            _require(
                all(1 <= i <= self.n_clients for i in self.decrypt_subset),
                "federation.decrypt_subset",
                f"indices must lie in 1..{self.n_clients}",
            )


@dataclass(frozen=True)
class PathsConfig:
    graphs: str = "artifacts/graphs"
    snapshots: str = "artifacts/snapshots"
    model: str = "artifacts/model.ckpt"
    report: str = "artifacts/report.json"


@dataclass(frozen=True)
class RunConfig:
    """All stage settings plus the global seed and parallelism knobs."""

    seed: int = 0
    jobs: int = 1
    serial: bool = False
    ingest: IngestConfig = field(default_factory=IngestConfig)
    snapshot: SnapshotConfig = field(default_factory=SnapshotConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    federation: FedConfig = field(default_factory=FedConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self) -> None:
        _require(self.jobs >= 1, "jobs", "must be >= 1")


def _check_type(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        _require(isinstance(value, bool), key, f"expected a boolean, got {value!r}")
    elif isinstance(default, int):
        _require(
            isinstance(value, int) and not isinstance(value, bool),
            key,
            f"expected an integer, got {value!r}",
        )
    elif isinstance(default, float):
        _require(
            isinstance(value, int | float) and not isinstance(value, bool),
            key,
            f"expected a number, got {value!r}",
        )
        return float(value)
    elif isinstance(default, str):
        _require(isinstance(value, str), key, f"expected a string, got {value!r}")
    elif isinstance(default, list):
        _require(isinstance(value, list), key, f"expected a list, got {value!r}")
    return value


def _build(cls: type[T], data: Any, prefix: str) -> T:
    _require(isinstance(data, dict), prefix or "config", "expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    defaults = cls()
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            raise ConfigError(f"{dotted}: unknown key")
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, dotted)
        else:
            kwargs[key] = _check_type(dotted, value, default)
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    """Build a validated ``RunConfig`` from a parsed document."""
    return _build(RunConfig, data, "")


def load_config(path: str | Path) -> RunConfig:
    """Load a TOML (``.toml``) or JSON configuration file.

    Raises:
        ConfigError: If the file cannot be parsed or fails validation.
    """
    path = Path(path)
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                data = tomllib.load(f)
        else:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except ValueError as e:
        # TOMLDecodeError, JSONDecodeError and UnicodeDecodeError
        raise ConfigError(f"{path}: {e}")
    return config_from_dict(data)


def with_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Return a copy with dotted-key overrides applied (``None`` values skipped)."""
    data = dataclasses.asdict(config)
    for dotted, value in overrides.items():
        if value is None:
            continue
        *sections, key = dotted.split(".")
        target = data
        for section in sections:
            target = target[section]
        target[key] = value
    return config_from_dict(data)


def derive_seed(global_seed: int, stage: str) -> int:
    """Stage-specific seed: SHA-256 of ``"<seed>:<stage>"``, first 8 bytes."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def config_to_dict(config: Any) -> dict[str, Any]:
    return dataclasses.asdict(config)


def model_config_from_dict(data: dict[str, Any]) -> ModelConfig:
    """Build a ``ModelConfig`` from a checkpoint sidecar document."""
    return _build(ModelConfig, data, "model")
