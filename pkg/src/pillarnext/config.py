"""Run configuration: strict JSON schema over the dataclass configs, seeded streams."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .network import NetworkConfig
from .sparse import GridConfig
from .training import SceneSpec


@dataclass
class RunOptions:
    seed: int = 0
    precision: int = 64
    score_thresh: float = 0.3
    iou_thresh: float = 0.7
    scenes: int = 3
    steps: int = 500
    lr: float = 1e-3
    bench_channels: int = 16
    output_dir: str = "."

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if not 0 < self.iou_thresh < 1 or not 0 <= self.score_thresh < 1:
            raise ValueError("thresholds must lie in (0, 1)")
        if self.scenes < 0 or self.steps < 0 or self.lr <= 0 or self.bench_channels < 1:
            raise ValueError("scenes/steps must be >= 0, lr > 0, bench_channels >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    run: RunOptions = field(default_factory=RunOptions)

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


SECTIONS = {"grid": GridConfig, "network": NetworkConfig, "scene": SceneSpec, "run": RunOptions}


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _coerce(value, default, path: str):
    """Check ``value`` against the type of ``default`` and convert lists to tuples."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfig(f"expected a boolean, got {value!r}", path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig(f"expected an integer, got {value!r}", path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(f"expected a number, got {value!r}", path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidConfig(f"expected a string, got {value!r}", path)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise InvalidConfig(f"expected a list, got {value!r}", path)
        proto = default[0] if default else 0.0
        return tuple(_coerce(v, proto, f"{path}[{i}]") for i, v in enumerate(value))
    raise InvalidConfig(f"unsupported field type for {value!r}", path)


def _section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise InvalidConfig("expected an object", name)
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise InvalidConfig(f"unknown key (allowed: {', '.join(sorted(known))})", f"{name}.{key}")
    kwargs = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in data.items()}
    try:
        return cls(**{**{f.name: getattr(defaults, f.name) for f in dataclasses.fields(cls)}, **kwargs})
    except (ValueError, TypeError) as exc:
        raise InvalidConfig(str(exc), name) from None


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise InvalidConfig("top level must be an object")
    for key in data:
        if key not in SECTIONS:
            raise InvalidConfig(f"unknown section (allowed: {', '.join(SECTIONS)})", key)
    return RunConfig(**{name: _section(name, cls, data.get(name, {})) for name, cls in SECTIONS.items()})


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(exc.msg, line=exc.lineno) from None
    return config_from_dict(data)


def toy_config() -> RunConfig:
    """Reduced-range configuration used by the toy training experiment."""
    return config_from_dict({
        "grid": {"x_range": [-20.0, 20.0], "y_range": [-20.0, 20.0], "z_range": [-2.0, 4.0],
                 "voxel_size": [0.2, 0.2, 0.2]},
        "network": {"stage_channels": [16, 16, 32, 32, 32, 32], "fuse_channels": 32,
                    "head_channels": 32, "mlp_channels": 16},
        "scene": {"x_range": [-20.0, 20.0], "y_range": [-20.0, 20.0]},
    })


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def stream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])
