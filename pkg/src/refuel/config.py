"""Pipeline configuration: one JSON document, validated before any work starts."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from . import serialization as ser
from .envgen import FamilySpec
from .errors import InputError, SchemaError
from .rng import check_seed
from .upstream import HyperParams

FEATURE_CHOICES = ("learned", "onehot", "true")


def _default_family() -> FamilySpec:
    return FamilySpec(num_states=6, num_actions=3, horizon=4, dim=2, num_tasks=4, xi_target=0.05,
                      phi_class_size=6, psi_class_size=12)


def _default_compare_family() -> FamilySpec:
    return FamilySpec(num_states=6, num_actions=3, horizon=4, dim=2, num_tasks=8,
                      phi_class_size=12, psi_class_size=16)


def _build(cls, doc: Any, where: str):
    if not isinstance(doc, Mapping):
        raise SchemaError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise SchemaError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, InputError) as exc:
        raise SchemaError(f"invalid {where}: {exc}") from exc


def _check_positive(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0 or not math.isfinite(value):
        raise InputError(f"{name} must be a positive number")


def _check_count(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise InputError(f"{name} must be a positive integer")


@dataclass(frozen=True)
class DownstreamSection:
    """Shared fields of the offline and online stages."""

    features: str = "learned"
    lam: float = 1.0
    c_beta: float = 1.0
    delta: float = 0.05
    xi_down: Optional[float] = None

    def _validate(self) -> None:
        if self.features not in FEATURE_CHOICES:
            raise InputError(f"features must be one of {FEATURE_CHOICES}")
        for name in ("lam", "c_beta"):
            _check_positive(name, getattr(self, name))
        if not 0.0 < self.delta < 1.0:
            raise InputError("delta must lie in (0, 1)")
        if self.xi_down is not None and not (self.xi_down >= 0 and math.isfinite(self.xi_down)):
            raise InputError("xi_down must be null or a finite nonnegative number")


@dataclass(frozen=True)
class OfflineSection(DownstreamSection):
    n_off: int = 4096

    def __post_init__(self) -> None:
        self._validate()
        _check_count("n_off", self.n_off)


@dataclass(frozen=True)
class OnlineSection(DownstreamSection):
    n_episodes: int = 500

    def __post_init__(self) -> None:
        self._validate()
        _check_count("n_episodes", self.n_episodes)


@dataclass(frozen=True)
class EvalSection:
    panel_size: int = 20
    n_rewards: int = 10

    def __post_init__(self) -> None:
        _check_count("panel_size", self.panel_size)
        _check_count("n_rewards", self.n_rewards)


@dataclass(frozen=True)
class CompareSection:
    family: FamilySpec = field(default_factory=_default_compare_family)
    task_counts: tuple[int, ...] = (1, 8)
    target_tv: float = 0.20
    hyper: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self) -> None:
        counts = tuple(self.task_counts)
        for c in counts:
            _check_count("task_counts entries", c)
        if 1 not in counts or len(counts) < 2:
            raise InputError("task_counts must contain 1 and a larger count")
        _check_positive("target_tv", self.target_tv)
        object.__setattr__(self, "task_counts", counts)

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family.to_dict(), "task_counts": list(self.task_counts),
                "target_tv": self.target_tv, "hyper": self.hyper.to_dict()}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "CompareSection":
        if not isinstance(doc, Mapping):
            raise SchemaError("compare must be an object")
        doc = dict(doc)
        if "family" in doc:
            doc["family"] = FamilySpec.from_dict(doc["family"])
        if "hyper" in doc:
            doc["hyper"] = HyperParams.from_dict(doc["hyper"])
        return _build(cls, doc, "compare")


@dataclass(frozen=True)
class PipelineConfig:
    family: FamilySpec = field(default_factory=_default_family)
    upstream: HyperParams = field(default_factory=HyperParams)
    offline: OfflineSection = field(default_factory=OfflineSection)
    online: OnlineSection = field(default_factory=OnlineSection)
    eval: EvalSection = field(default_factory=EvalSection)
    compare: CompareSection = field(default_factory=CompareSection)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        seeds = tuple(check_seed(s) for s in self.seeds)
        if not seeds:
            raise InputError("seeds must not be empty")
        object.__setattr__(self, "seeds", seeds)

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def with_seeds(self, seeds) -> "PipelineConfig":
        return dataclasses.replace(self, seeds=tuple(seeds))

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family.to_dict(),
            "upstream": self.upstream.to_dict(),
            "offline": dataclasses.asdict(self.offline),
            "online": dataclasses.asdict(self.online),
            "eval": dataclasses.asdict(self.eval),
            "compare": self.compare.to_dict(),
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PipelineConfig":
        if not isinstance(doc, Mapping):
            raise SchemaError("config root must be an object")
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise SchemaError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        if "family" in doc:
            kwargs["family"] = FamilySpec.from_dict(doc["family"])
        if "upstream" in doc:
            kwargs["upstream"] = HyperParams.from_dict(doc["upstream"])
        if "offline" in doc:
            kwargs["offline"] = _build(OfflineSection, doc["offline"], "offline")
        if "online" in doc:
            kwargs["online"] = _build(OnlineSection, doc["online"], "online")
        if "eval" in doc:
            kwargs["eval"] = _build(EvalSection, doc["eval"], "eval")
        if "compare" in doc:
            kwargs["compare"] = CompareSection.from_dict(doc["compare"])
        if "seeds" in doc:
            seeds = doc["seeds"]
            if not isinstance(seeds, list):
                raise SchemaError("seeds must be a list of integers")
            kwargs["seeds"] = tuple(seeds)
        try:
            return cls(**kwargs)
        except InputError as exc:
            raise SchemaError(f"invalid config: {exc}") from exc


def load_config(path) -> PipelineConfig:
    try:
        doc = json.loads(ser.read_text(path))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config is not valid JSON: {exc}") from exc
    return PipelineConfig.from_dict(doc)


def parse_seed_list(text: str) -> tuple[int, ...]:
    """``"3"`` or ``"1,2,3"``."""
    if not text.strip():
        raise InputError("empty seed list")
    try:
        seeds = tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise InputError(f"invalid seed list {text!r}") from exc
    return tuple(check_seed(s) for s in seeds)
