"""Experiment configuration: one JSON file describing suite, features and methods.

Every field has a default, so ``{}`` is a valid configuration. Unknown keys
are rejected rather than silently ignored.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .baselines import IcpConfig, RansacConfig
from .benchgen import SuiteConfig
from .descriptors import OracleNoiseSpec
from .errors import ParameterError
from .fileio import read_json
from .p2p import P2PConfig
from .pipeline import DEFAULT_ICP, DEFAULT_VOXEL, METHODS, DescriptorConfig

CONFIG_ENV = "P2PREG_CONFIG"

_METHOD_KEYS = {
    "baseline": {"temperature"},
    "p2p": {f.name for f in fields(P2PConfig)},
    "icp": {f.name for f in fields(IcpConfig)} | {"init"},
    "ransac": {f.name for f in fields(RansacConfig)},
    "procrustes": set(),
}


class ConfigError(ParameterError):
    """Malformed or inconsistent experiment configuration."""


def _check_keys(d: dict[str, Any], allowed: set[str], where: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


@dataclass(frozen=True)
class MethodSpec:
    """A named registrar with its settings.

    ``name`` labels results and must be unique; ``method`` picks the
    registrar and defaults to ``name``, so ablations such as
    ``{"name": "p2p-inlier", "method": "p2p", "selection": "inlier-count"}``
    can sit next to the default ``p2p``.
    """

    name: str
    method: str
    params: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict[str, Any] | str) -> "MethodSpec":
        if isinstance(d, str):
            d = {"name": d}
        d = dict(d)
        if "name" not in d:
            raise ConfigError("every method entry needs a name")
        name = str(d.pop("name"))
        method = str(d.pop("method", name))
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        _check_keys(d, _METHOD_KEYS[method], f"method {name!r}")
        spec = cls(name, method, d)
        spec.run_kwargs()
        return spec

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "method": self.method, **self.params}

    def run_kwargs(self) -> dict[str, Any]:
        """Keyword arguments for :func:`pipeline.run_method`."""
        p = dict(self.params)
        try:
            if self.method == "p2p":
                return {"p2p": P2PConfig(**p)}
            if self.method == "icp":
                init = p.pop("init", "identity")
                if init not in ("identity", "ground-truth"):
                    raise ConfigError(f"icp init must be identity or ground-truth, got {init!r}")
                return {"icp_cfg": replace(DEFAULT_ICP, **p), "icp_init": init}
            if self.method == "ransac":
                return {"ransac": RansacConfig(**p)}
            if self.method == "baseline":
                return {"temperature": p.get("temperature")}
            return {}
        except ConfigError:
            raise
        except (TypeError, ParameterError) as exc:
            raise ConfigError(f"method {self.name!r}: {exc}") from exc

    def with_seed(self, seed: int) -> "MethodSpec":
        """RANSAC draws its hypotheses from ``seed``; other methods are unchanged."""
        if self.method != "ransac":
            return self
        return replace(self, params={**self.params, "seed": int(seed)})


DEFAULT_METHODS = ("baseline", "p2p")


@dataclass(frozen=True)
class ExperimentConfig:
    suite: SuiteConfig = SuiteConfig()
    suite_path: str | None = None
    descriptor: DescriptorConfig = DescriptorConfig()
    voxel_size: float = DEFAULT_VOXEL
    methods: tuple[MethodSpec, ...] = tuple(MethodSpec.from_dict(m) for m in DEFAULT_METHODS)
    out: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ConfigError("voxel_size must be positive")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError(f"method names must be unique: {names}")
        if not self.methods:
            raise ConfigError("at least one method is required")

    def method(self, name: str) -> MethodSpec:
        """Look up a method by name, or build a default one for a bare registrar name."""
        for m in self.methods:
            if m.name == name:
                return m
        if name in METHODS:
            return MethodSpec(name, name)
        raise ConfigError(f"no method named {name!r} in the configuration")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed), suite=replace(self.suite, seed=int(seed)))

    def sample_seed(self, sample_id: str) -> int:
        """Per-sample seed from the global seed and the sample id, independent of run order."""
        return zlib.crc32(f"{self.seed}:{sample_id}".encode()) & 0x7FFFFFFF

    def resolved_suite_path(self) -> Path:
        return Path(self.suite_path) if self.suite_path else Path(self.out) / "suite"

    def to_dict(self) -> dict[str, Any]:
        return {
            "suite": self.suite.to_dict(),
            "suite_path": self.suite_path,
            "descriptor": {
                "kind": self.descriptor.kind,
                "oracle": asdict(self.descriptor.oracle),
                "normal_k": self.descriptor.normal_k,
                "radius": self.descriptor.radius,
                "dim": self.descriptor.dim,
            },
            "voxel_size": self.voxel_size,
            "methods": [m.to_dict() for m in self.methods],
            "out": self.out,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        _check_keys(d, {f.name for f in fields(cls)}, "configuration")
        kw: dict[str, Any] = {}
        try:
            if "suite" in d:
                _check_keys(d["suite"], {f.name for f in fields(SuiteConfig)}, "suite")
                kw["suite"] = SuiteConfig.from_dict(d["suite"])
            if "descriptor" in d:
                desc = dict(d["descriptor"])
                _check_keys(desc, {f.name for f in fields(DescriptorConfig)}, "descriptor")
                if "oracle" in desc:
                    _check_keys(desc["oracle"], {f.name for f in fields(OracleNoiseSpec)}, "descriptor.oracle")
                    desc["oracle"] = OracleNoiseSpec(**desc["oracle"])
                kw["descriptor"] = DescriptorConfig(**desc)
            if "methods" in d:
                kw["methods"] = tuple(MethodSpec.from_dict(m) for m in d["methods"])
            for key in ("suite_path", "out"):
                if d.get(key) is not None:
                    kw[key] = str(d[key])
            if "voxel_size" in d:
                kw["voxel_size"] = float(d["voxel_size"])
            if "seed" in d:
                kw["seed"] = int(d["seed"])
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        cfg = cls(**kw)
        # the global seed drives generation unless the suite pins its own
        if "seed" in d and "seed" not in d.get("suite", {}):
            cfg = replace(cfg, suite=replace(cfg.suite, seed=cfg.seed))
        return cfg


def load_config(path: str | os.PathLike | None = None) -> ExperimentConfig:
    """Read a configuration file; without a path, fall back to ``$P2PREG_CONFIG`` or defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"configuration file {p} does not exist")
    try:
        data = read_json(p)
    except ValueError as exc:
        raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)
