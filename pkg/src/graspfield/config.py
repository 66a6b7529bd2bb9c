"""Run configuration: strict JSON loading plus command-line overrides.

A run file is a single JSON object with optional sections mirroring the
library config dataclasses. Unknown keys anywhere are errors, so a typo
fails loudly instead of silently running defaults.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .latent import FlowConfig
from .objectives import LossWeights
from .sampler import SamplerConfig
from .scenes import SceneConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "ABLATION_MODES",
    "default_data_root",
    "load_config",
    "config_to_dict",
    "save_config",
    "apply_overrides",
    "sampler_for_run",
]

ABLATION_MODES = ("full", "no-touch", "vision-only")

DATA_ROOT_ENV = "GRASPFIELD_DATA_ROOT"

# JSON spells the guidance weights out; the dataclasses abbreviate them.
_KEY_ALIASES = {
    "lambda_ni": "lam_ni",
    "lambda_contact": "lam_c",
}


class ConfigError(ValueError):
    pass


def default_data_root() -> Path:
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path("graspfield-data")


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline command needs, validated up front."""

    command: str = ""
    data_root: Path = field(default_factory=default_data_root)
    out_dir: Optional[Path] = None      # defaults to data_root
    seed: int = 0
    n_scenes: int = 10
    workers: int = 1
    guidance: bool = True
    ablation: str = "full"
    touch_noise_mm: float = 0.0
    codec_k: int = 8
    scene: SceneConfig = field(default_factory=SceneConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.n_scenes < 1:
            raise ConfigError("n_scenes must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.ablation not in ABLATION_MODES:
            raise ConfigError(
                f"ablation must be one of {ABLATION_MODES}, got {self.ablation!r}")
        if self.touch_noise_mm < 0:
            raise ConfigError("touch_noise_mm must be nonnegative")
        if self.codec_k < 1:
            raise ConfigError("codec_k must be >= 1")
        self.scene.validate()
        self.sampler.validate()

    def resolved_out_dir(self) -> Path:
        return Path(self.out_dir) if self.out_dir is not None else Path(self.data_root)


_SECTIONS = {
    "scene": SceneConfig,
    "sampler": SamplerConfig,
    "flow": FlowConfig,
    "loss": LossWeights,
}

_TOP_KEYS = {
    "data_root", "out_dir", "seed", "n_scenes", "workers", "guidance",
    "ablation", "touch_noise_mm", "codec_k",
} | set(_SECTIONS)


def _build_section(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        if isinstance(value, list):
            # SceneConfig ranges are tuples; the sampler grid is an array
            if name == "time_grid":
                value = np.asarray(value, dtype=np.float64)
            else:
                value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


def load_config(path) -> RunConfig:
    """Parse and validate a JSON run file."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        elif key in ("data_root", "out_dir"):
            kwargs[key] = Path(value) if value is not None else None
        else:
            kwargs[key] = value
    try:
        cfg = RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    cfg.validate()
    return cfg


def _section_to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def config_to_dict(cfg: RunConfig) -> dict:
    """JSON-serializable snapshot, reloadable by load_config."""
    out = {
        "data_root": str(cfg.data_root),
        "out_dir": None if cfg.out_dir is None else str(cfg.out_dir),
        "seed": cfg.seed,
        "n_scenes": cfg.n_scenes,
        "workers": cfg.workers,
        "guidance": cfg.guidance,
        "ablation": cfg.ablation,
        "touch_noise_mm": cfg.touch_noise_mm,
        "codec_k": cfg.codec_k,
    }
    for name in _SECTIONS:
        out[name] = _section_to_dict(getattr(cfg, name))
    return out


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=1, sort_keys=True)
        fh.write("\n")


def apply_overrides(cfg: RunConfig, *, command: Optional[str] = None,
                    data_root=None, out_dir=None, seed: Optional[int] = None,
                    workers: Optional[int] = None,
                    guidance: Optional[bool] = None,
                    ablation: Optional[str] = None,
                    touch_noise_mm: Optional[float] = None,
                    n_scenes: Optional[int] = None) -> RunConfig:
    """Return a copy with any explicitly passed flags replacing file values."""
    changes = {}
    if command is not None:
        changes["command"] = command
    if data_root is not None:
        changes["data_root"] = Path(data_root)
    if out_dir is not None:
        changes["out_dir"] = Path(out_dir)
    if seed is not None:
        changes["seed"] = seed
    if workers is not None:
        changes["workers"] = workers
    if guidance is not None:
        changes["guidance"] = guidance
    if ablation is not None:
        changes["ablation"] = ablation
    if touch_noise_mm is not None:
        changes["touch_noise_mm"] = touch_noise_mm
    if n_scenes is not None:
        changes["n_scenes"] = n_scenes
    out = dataclasses.replace(cfg, **changes)
    out.validate()
    return out


def sampler_for_run(cfg: RunConfig) -> SamplerConfig:
    """Sampler settings with the run-level guidance switch stamped in.

    `guidance` on the run config is the single source of truth; the
    sampler section's own flag is ignored by the pipeline commands.
    """
    return dataclasses.replace(cfg.sampler, guidance_enabled=cfg.guidance)
