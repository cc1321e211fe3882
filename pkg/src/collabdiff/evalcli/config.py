"""Experiment configuration in a flat ``key = value`` text format.

Unknown keys and out-of-range values are rejected at load time. The canonical
form (sorted keys, ``key=value`` lines, LF endings) is what gets hashed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..exceptions import ConfigurationError

MODE_NAMES = ("full", "no_spatial", "no_temporal", "uniform")


def _rng(lo=None, hi=None, choices=None):
    return {"lo": lo, "hi": hi, "choices": choices}


@dataclass(frozen=True)
class ExperimentConfig:
    resolution: int = field(default=32, metadata=_rng(choices=(16, 32)))
    T: int = field(default=1000, metadata=_rng(10, 10000))
    beta_start: float = field(default=1e-4, metadata=_rng(1e-6, 0.5))
    beta_end: float = field(default=0.02, metadata=_rng(1e-6, 0.999))
    variance: str = field(default="beta", metadata=_rng(choices=("beta", "beta_tilde")))
    sampler: str = field(default="ddim50", metadata=_rng(choices=("ddpm", "ddim50")))
    n_scenes: int = field(default=2000, metadata=_rng(10, 10**6))
    data_seed: int = field(default=0, metadata=_rng(0, 2**63 - 1))
    seed: int = field(default=0, metadata=_rng(0, 2**63 - 1))
    eps_channels: int = field(default=32, metadata=_rng(4, 512))
    diffuser_channels: int = field(default=8, metadata=_rng(2, 512))
    unimodal_steps: int = field(default=20000, metadata=_rng(0, 10**7))
    unimodal_batch: int = field(default=16, metadata=_rng(1, 4096))
    unimodal_lr: float = field(default=1e-4, metadata=_rng(0.0, 1.0))
    diffuser_steps: int = field(default=10000, metadata=_rng(0, 10**7))
    diffuser_batch: int = field(default=16, metadata=_rng(1, 4096))
    diffuser_lr: float = field(default=1e-4, metadata=_rng(0.0, 1.0))
    eval_conditions: int = field(default=50, metadata=_rng(1, 10**5))
    samples_per_condition: int = field(default=4, metadata=_rng(1, 1000))
    modes: str = field(default="full,no_spatial,no_temporal,uniform")
    temporal_reference: str = field(default="first", metadata=_rng(choices=("first", "mean")))
    edit_sessions: int = field(default=20, metadata=_rng(0, 10**4))
    edit_alpha: float = field(default=0.7, metadata=_rng(0.0, 1.0))
    edit_opt_steps: int = field(default=400, metadata=_rng(0, 10**6))
    edit_opt_lr: float = field(default=1e-3, metadata=_rng(0.0, 1.0))
    edit_finetune_steps: int = field(default=500, metadata=_rng(0, 10**6))
    edit_finetune_lr: float = field(default=1e-5, metadata=_rng(0.0, 1.0))
    edit_batch: int = field(default=4, metadata=_rng(1, 1024))
    trend_conditions: int = field(default=50, metadata=_rng(0, 10**4))

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            bounds = f.metadata
            if bounds.get("choices") is not None and value not in bounds["choices"]:
                raise ConfigurationError(f"{f.name}={value!r} not in {bounds['choices']}")
            if bounds.get("lo") is not None and not bounds["lo"] <= value <= bounds["hi"]:
                raise ConfigurationError(f"{f.name}={value!r} outside [{bounds['lo']}, {bounds['hi']}]")
        if self.beta_start > self.beta_end:
            raise ConfigurationError("beta_start must not exceed beta_end")
        unknown = set(self.mode_list) - set(MODE_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown modes {sorted(unknown)}")

    @property
    def mode_list(self) -> list[str]:
        return [m.strip() for m in self.modes.split(",") if m.strip()]

    def canonical(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n".replace("'", "")
                       for f in sorted(fields(self), key=lambda f: f.name))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def with_updates(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


FAST_PROFILE = dict(
    resolution=16,
    n_scenes=500,
    unimodal_steps=5000,
    unimodal_lr=1e-3,
    diffuser_steps=1500,
    diffuser_lr=1e-3,
    edit_opt_steps=100,
    edit_opt_lr=1e-2,
    edit_finetune_steps=150,
    # steps * lr roughly matches the default 500 * 1e-5; stronger tuning memorizes the input
    edit_finetune_lr=3e-5,
)


def fast_profile(**overrides) -> ExperimentConfig:
    return ExperimentConfig(**{**FAST_PROFILE, **overrides})


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in types:
        raise ConfigurationError(f"unknown config key {name!r}")
    kind = types[name]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{name}: cannot parse {raw!r} as {kind}") from exc
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key = key.strip()
        if key == "profile":
            if value.strip() != "fast":
                raise ConfigurationError(f"unknown profile {value.strip()!r}")
            base = fast_profile()
            continue
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, value.strip())
    return replace(base or ExperimentConfig(), **values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_bytes(config.canonical().encode("utf-8"))
    return path
