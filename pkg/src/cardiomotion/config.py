"""Run configuration: one JSON document driving every pipeline stage.

The document has fixed sections (grid, metric, shooting, registration,
nets, diffusion, phantom) plus a top-level seed.  Unknown keys are
rejected with the full key path so typos fail loudly instead of
silently falling back to defaults.  `write_reference` emits the
complete default document; it is the single reference for every
tunable and its default value.
"""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass(frozen=True)
class GridSection:
    height: int = 64
    width: int = 64
    spacing: float = 1.0


@dataclass(frozen=True)
class MetricSection:
    alpha: float = 3.0
    gamma: float = 1.0
    power: int = 3


@dataclass(frozen=True)
class ShootingSection:
    num_steps: int = 10


@dataclass(frozen=True)
class RegistrationSection:
    sigma: float = 0.03
    learning_rate: float = 1e-4
    max_iterations: int = 500
    convergence_tol: float = 1e-6


@dataclass(frozen=True)
class NetsSection:
    base_channels: int = 16
    latent_channels: int = 16
    num_down: int = 2
    time_embed_dim: int = 16


@dataclass(frozen=True)
class DiffusionSection:
    num_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kernel_std: float = 1.0
    loss_alpha: float = 1e-2
    lambda_eps: float = 1e-4
    lambda_m: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 2000
    patience: int = 50
    learning_rate: float = 1e-4


@dataclass(frozen=True)
class PhantomSection:
    num_frames: int = 8
    contraction: tuple[float, float] = (0.05, 0.15)
    twist: tuple[float, float] = (0.1, 0.3)
    r_inner: tuple[float, float] = (8.0, 12.0)
    r_outer: tuple[float, float] = (18.0, 24.0)
    center_jitter: float = 0.0
    smoothing_std: float = 1.5


@dataclass(frozen=True)
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    metric: MetricSection = field(default_factory=MetricSection)
    shooting: ShootingSection = field(default_factory=ShootingSection)
    registration: RegistrationSection = field(default_factory=RegistrationSection)
    nets: NetsSection = field(default_factory=NetsSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    seed: int = 0


_SECTIONS = {
    "grid": GridSection,
    "metric": MetricSection,
    "shooting": ShootingSection,
    "registration": RegistrationSection,
    "nets": NetsSection,
    "diffusion": DiffusionSection,
    "phantom": PhantomSection,
}


def _build_section(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key: {path}.{key}")
        f = fields[key]
        if f.type.startswith("tuple"):
            if not (isinstance(value, (list, tuple)) and len(value) == 2):
                raise ConfigError(f"{path}.{key} must be a two-element list")
            value = (float(value[0]), float(value[1]))
        elif f.type == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}.{key} must be an integer")
        elif f.type == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}.{key} must be a number")
            value = float(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key == "seed":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key} must be a JSON object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            raise ConfigError(f"unknown config key: {key}")
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        section = dataclasses.asdict(getattr(cfg, name))
        out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
    out["seed"] = cfg.seed
    return out


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from e
    return config_from_dict(data)


def write_reference(path) -> None:
    """Write the default configuration document (the tunables reference)."""
    text = json.dumps(config_to_dict(RunConfig()), indent=2, sort_keys=False) + "\n"
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".cfg-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
