"""Pipeline configuration: one YAML tree, every leaf flag-overridable.

All stage randomness flows from the single top-level seed through named
per-stage sub-seeds, so stages are independently reproducible. Output
timestamps honor SOURCE_DATE_EPOCH so repeated runs can be byte-identical.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import yaml

from .curation import LengthPolicy, NoiseGatePolicy
from .services import ServiceConfig
from .vad import VadParams


class ConfigError(Exception):
    pass


def _default_service() -> ServiceConfig:
    return ServiceConfig(endpoint_url="")


@dataclass
class PipelineConfig:
    workspace_dir: str = "workspace"
    canonical_rate: int = 16000
    parallelism: int = 4
    seed: int = 0
    vad_backend: str = "energy"  # energy | sidecar
    sidecar_url: str | None = None
    vad: VadParams = field(default_factory=VadParams)
    noise_gate: NoiseGatePolicy = field(default_factory=NoiseGatePolicy)
    length: LengthPolicy = field(default_factory=LengthPolicy)
    asr: ServiceConfig = field(default_factory=_default_service)
    diacritizer: ServiceConfig = field(default_factory=_default_service)

    def __post_init__(self) -> None:
        if self.canonical_rate <= 0:
            raise ConfigError("canonical_rate must be positive")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.vad_backend not in ("energy", "sidecar"):
            raise ConfigError(f"vad_backend must be energy or sidecar, got {self.vad_backend!r}")

    def policy_snapshot(self) -> dict[str, Any]:
        """Config values that belong in output provenance."""
        return {
            "canonical_rate": self.canonical_rate,
            "vad_backend": self.vad_backend,
            "vad": dict(self.vad.__dict__),
            "noise_gate": dict(self.noise_gate.__dict__),
            "length": dict(self.length.__dict__),
        }


_SECTIONS = {
    "vad": VadParams,
    "noise_gate": NoiseGatePolicy,
    "length": LengthPolicy,
    "asr": ServiceConfig,
    "diacritizer": ServiceConfig,
}


def config_leaves() -> list[tuple[str, type]]:
    """(dotted name, type) for every overridable scalar, stable order."""
    leaves: list[tuple[str, type]] = []
    for f in fields(PipelineConfig):
        if f.name not in _SECTIONS:
            leaves.append((f.name, _annotated_type(f.type)))
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            leaves.append((f"{section}.{f.name}", _annotated_type(f.type)))
    return leaves


def _annotated_type(annotation: Any) -> type:
    if isinstance(annotation, type):
        return annotation
    text = str(annotation)
    for name, typ in (("int", int), ("float", float), ("bool", bool)):
        if text.startswith(name):
            return typ
    return str


def parse_override(raw: str, typ: type) -> Any:
    if typ is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse {raw!r} as bool")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {typ.__name__}") from exc


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Build the config from an optional YAML file plus dotted overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        data = loaded

    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted}: {key} is not a section")
        node[leaf] = value

    return _build_config(data)


def _build_config(data: dict[str, Any]) -> PipelineConfig:
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        if name in _SECTIONS:
            cls = _SECTIONS[name]
            if not isinstance(value, dict):
                raise ConfigError(f"config section {name} must be a mapping")
            section_known = {f.name for f in fields(cls)}
            section_unknown = set(value) - section_known
            if section_unknown:
                raise ConfigError(f"unknown keys in {name}: {sorted(section_unknown)}")
            try:
                kwargs[name] = cls(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad {name} config: {exc}") from exc
        else:
            kwargs[name] = value
    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def derive_seed(seed: int, stage: str) -> int:
    """Stable per-stage sub-seed from the single pipeline seed."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def created_at() -> str:
    """ISO-8601 timestamp; honors SOURCE_DATE_EPOCH for reproducible runs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    ts = int(epoch) if epoch else int(time.time())
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
