"""Application configuration: one YAML document with nested sections.

Resolution order is defaults < config file < environment < command-line flags.
Sections map one-to-one onto the library dataclasses, so every field has the
same default here as in code.  Unknown keys are rejected with their full path.

Environment variables:

``CURRSEG_CONFIG``
    config file used when ``--config`` is not given
``CURRSEG_SEED``, ``CURRSEG_JOBS``, ``CURRSEG_OUT``
    top-level ``seed``, ``jobs`` and ``out``
``CURRSEG_<SECTION>__<FIELD>``
    any section field, e.g. ``CURRSEG_BOXES__POLARITY=bright-on-dark`` or
    ``CURRSEG_FINE_PROFILE__PRIOR_WEIGHT=0.1``; values are parsed as YAML scalars
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml

from .backend import AdapterConfig, BuiltinSegmenter, ExternalSegmenter, StageProfile, coarse_profile, fine_profile
from .curriculum import CurriculumConfig
from .promptgen import BoxProposerConfig, EdgePointConfig
from .synthetic import SyntheticSpec

ENV_PREFIX = "CURRSEG_"
EFFECTIVE_CONFIG_NAME = "effective_config.yaml"


class ConfigError(ValueError):
    """Bad config document; ``key`` is the dotted path of the offending entry, if any."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class BackendSection:
    kind: str = "builtin"
    command: Tuple[str, ...] = ()
    exchange_dir: Optional[str] = None
    timeout: float = 60.0
    poll_interval: float = 0.05

    def __post_init__(self) -> None:
        if self.kind not in ("builtin", "external"):
            raise ValueError("kind must be 'builtin' or 'external'")
        if isinstance(self.command, str):
            object.__setattr__(self, "command", tuple(self.command.split()))
        else:
            object.__setattr__(self, "command", tuple(self.command))
        if self.kind == "external" and not self.command and self.exchange_dir is None:
            raise ValueError("an external backend needs 'command' or 'exchange_dir'")


@dataclass(frozen=True)
class CurriculumSection:
    steps: int = 2
    per_box_segmentation: bool = True
    empty_box_policy: str = "return-empty"


@dataclass(frozen=True)
class LossSection:
    """Loss constants (only used by code that trains or scores soft masks)."""

    dice_smooth: float = 1.0
    bce_clamp_eps: float = 1e-7


@dataclass(frozen=True)
class SyntheticSection:
    """:class:`SyntheticSpec` minus ``rng_seed``, which comes from the top-level ``seed``."""

    width: int = 128
    height: int = 128
    lesions_min: int = 1
    lesions_max: int = 1
    base_radius: float = 22.0
    radius_jitter: float = 0.25
    harmonics: int = 3
    amplitude_min: float = 0.0
    amplitude_max: float = 0.12
    contrast: float = 0.5
    background: float = 0.75
    edge_fuzz_sigma: float = 3.0
    noise_sigma: float = 0.03
    min_separation: float = 10.0
    max_attempts: int = 200


SECTIONS: Dict[str, Any] = {
    "backend": BackendSection,
    "curriculum": CurriculumSection,
    "coarse_profile": coarse_profile,
    "fine_profile": fine_profile,
    "boxes": BoxProposerConfig,
    "points": EdgePointConfig,
    "synthetic": SyntheticSection,
    "loss": LossSection,
}
TOP_LEVEL = {"seed": 0, "jobs": 1, "out": "out"}


@dataclass(frozen=True)
class AppConfig:
    seed: int = 0
    jobs: int = 1
    out: str = "out"
    backend: BackendSection = field(default_factory=BackendSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    coarse_profile: StageProfile = field(default_factory=coarse_profile)
    fine_profile: StageProfile = field(default_factory=fine_profile)
    boxes: BoxProposerConfig = field(default_factory=BoxProposerConfig)
    points: EdgePointConfig = field(default_factory=EdgePointConfig)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    loss: LossSection = field(default_factory=LossSection)

    def curriculum_config(self) -> CurriculumConfig:
        c = self.curriculum
        return CurriculumConfig(
            steps=c.steps,
            coarse_profile=self.coarse_profile,
            fine_profile=self.fine_profile,
            box_cfg=self.boxes,
            point_cfg=self.points,
            per_box_segmentation=c.per_box_segmentation,
            empty_box_policy=c.empty_box_policy,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(rng_seed=self.seed, **dataclasses.asdict(self.synthetic))

    def make_backend(self):
        b = self.backend
        if b.kind == "builtin":
            return BuiltinSegmenter()
        return ExternalSegmenter(AdapterConfig(command=b.command, exchange_dir=b.exchange_dir,
                                               timeout=b.timeout, poll_interval=b.poll_interval))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        """sha256 of the canonical JSON form, ignoring ``out`` and ``jobs`` (they never change results)."""
        doc = self.to_dict()
        doc.pop("out")
        doc.pop("jobs")
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def echo(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / EFFECTIVE_CONFIG_NAME
        path.write_text(f"# fingerprint: {self.fingerprint()}\n" + self.to_yaml())
        return path


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, key: str):
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, tuple):
        if isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
            return tuple(value)
        if isinstance(value, str):
            return value
    elif default is None:
        if value is None or isinstance(value, (str, int, float)):
            return None if value is None else str(value)
    raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}", key)


def _build_section(name: str, values: Mapping[str, Any]):
    factory = SECTIONS[name]
    base = factory()
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    kwargs = {}
    for k, v in values.items():
        key = f"{name}.{k}"
        if k not in known:
            raise ConfigError(f"unknown key '{key}' (valid: {', '.join(known)})", key)
        kwargs[k] = _coerce(v, known[k], key)
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}", name) from None


def merge(*docs: Mapping[str, Any]) -> dict:
    """Shallow-per-section merge of several raw documents; later ones win."""
    out: Dict[str, Any] = {}
    for doc in docs:
        for k, v in doc.items():
            if k in SECTIONS and isinstance(v, Mapping):
                out.setdefault(k, {})
                if not isinstance(out[k], dict):
                    out[k] = {}
                out[k].update(v)
            else:
                out[k] = v
    return out


def build(doc: Mapping[str, Any]) -> AppConfig:
    """Validate a raw document (as parsed from YAML) into an :class:`AppConfig`."""
    if not isinstance(doc, Mapping):
        raise ConfigError("config document must be a mapping at the top level")
    kwargs: Dict[str, Any] = {}
    for k, v in doc.items():
        if k in TOP_LEVEL:
            kwargs[k] = _coerce(v, TOP_LEVEL[k], k)
        elif k in SECTIONS:
            if v is None:
                v = {}
            if not isinstance(v, Mapping):
                raise ConfigError(f"section '{k}' must be a mapping", k)
            kwargs[k] = _build_section(k, v)
        else:
            valid = ", ".join(list(TOP_LEVEL) + list(SECTIONS))
            raise ConfigError(f"unknown key '{k}' (valid: {valid})", str(k))
    if kwargs.get("jobs", 1) < 1:
        raise ConfigError("jobs must be >= 1", "jobs")
    cfg = AppConfig(**kwargs)
    try:
        cfg.curriculum_config()
        cfg.synthetic_spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def read_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"{path}: YAML parse error{where}: {getattr(exc, 'problem', exc)}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def _scalar(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def env_overrides(environ: Mapping[str, str]) -> dict:
    doc: Dict[str, Any] = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or name == ENV_PREFIX + "CONFIG":
            continue
        key = name[len(ENV_PREFIX):].lower()
        if "__" in key:
            section, fld = key.split("__", 1)
            if section not in SECTIONS:
                raise ConfigError(f"{name}: unknown section '{section}'", section)
            doc.setdefault(section, {})[fld] = _scalar(raw)
        elif key in TOP_LEVEL:
            doc[key] = _scalar(raw)
        else:
            raise ConfigError(f"{name}: unknown setting '{key}'", key)
    return doc


def load_config(path=None, environ: Optional[Mapping[str, str]] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> AppConfig:
    """Resolve defaults, file (``path`` or ``$CURRSEG_CONFIG``), environment and flag overrides."""
    environ = os.environ if environ is None else environ
    path = path or environ.get(ENV_PREFIX + "CONFIG")
    file_doc = read_file(path) if path else {}
    flags = {k: v for k, v in (overrides or {}).items() if v is not None}
    return build(merge(file_doc, env_overrides(environ), flags))
