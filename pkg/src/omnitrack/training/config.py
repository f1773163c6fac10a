"""Training configuration, schedules and the INI config file format."""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..model import ModelConfig


@dataclass
class TrainConfig:
    total_steps: int = 200_000
    pairs_per_step: int = 8
    correspondences_per_step: int = 1024
    samples_per_ray: int = 32

    lambda_pho_max: float = 10.0
    lambda_pho_ramp: int = 50_000
    lambda_reg: float = 20.0
    lambda_pgrad: float = 1.0
    lambda_fgrad: float = 1.0
    lambda_zrange: float = 1.0
    use_photometric: bool = True
    reg_fraction: float = 1.0  # share of query rays that also feed the smoothness term

    lr_field: float = 3e-4
    lr_mapping: float = 1e-4
    lr_latent: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 20_000

    window_initial: int = 20
    window_every: int = 2_000

    hard_mining: bool = True
    error_refresh_every: int = 20_000
    error_map_stride: int = 1

    checkpoint_every: int = 20_000
    log_every: int = 100
    divergence_factor: float = 10.0
    divergence_patience: int = 1_000
    seed: int = 0

    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        positive = [
            "total_steps",
            "pairs_per_step",
            "correspondences_per_step",
            "samples_per_ray",
            "lr_decay_every",
            "window_initial",
            "window_every",
            "error_refresh_every",
            "checkpoint_every",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.correspondences_per_step % self.pairs_per_step:
            raise ValueError("correspondences_per_step must be a multiple of pairs_per_step")

    @property
    def per_pair(self) -> int:
        return self.correspondences_per_step // self.pairs_per_step

    def lambda_pho(self, step: int) -> float:
        if not self.use_photometric:
            return 0.0
        return self.lambda_pho_max * min(step / self.lambda_pho_ramp, 1.0)

    def lr_factor(self, step: int) -> float:
        return self.lr_decay ** (step // self.lr_decay_every)

    def learning_rates(self, step: int) -> dict[str, float]:
        f = self.lr_factor(step)
        return {"field": self.lr_field * f, "mapping": self.lr_mapping * f, "latent": self.lr_latent * f}

    def window(self, step: int, n_frames: int) -> int:
        return min(self.window_initial + step // self.window_every, n_frames - 1)

    def to_ini(self) -> configparser.ConfigParser:
        cp = configparser.ConfigParser()
        top = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        cp["train"] = {k: str(v) for k, v in top.items()}
        cp["model"] = {k: str(v) for k, v in asdict(self.model).items()}
        return cp

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            self.to_ini().write(fh)
        return path

    def replace(self, **changes) -> "TrainConfig":
        model_changes = {k[len("model.") :]: v for k, v in changes.items() if k.startswith("model.")}
        top = {k: v for k, v in changes.items() if not k.startswith("model.")}
        model = dataclasses.replace(self.model, **model_changes) if model_changes else self.model
        return dataclasses.replace(self, model=top.pop("model", model), **top)


def pair_weight(gap, window: int):
    """Flow-loss weight 1/cos(gap/window * pi/2), with gap/window capped at
    (window-1)/window so the weight stays finite at the window edge."""
    ratio = min(gap / window, (window - 1) / window) if window > 1 else 0.0
    return 1.0 / math.cos(ratio * math.pi / 2.0)


def _coerce(value: str, current):
    if isinstance(current, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(float(value)) if "e" in value.lower() else int(value)
    if isinstance(current, float):
        return float(value)
    return value


def apply_overrides(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """Apply string overrides keyed ``name`` or ``model.name``."""
    changes = {}
    for key, raw in overrides.items():
        if key.startswith("model."):
            name = key[len("model.") :]
            if not hasattr(cfg.model, name):
                raise KeyError(f"unknown model option {name!r}")
            changes[key] = _coerce(raw, getattr(cfg.model, name))
        else:
            if key == "model" or not hasattr(cfg, key):
                raise KeyError(f"unknown training option {key!r}")
            changes[key] = _coerce(raw, getattr(cfg, key))
    return cfg.replace(**changes)


def load_config(path: str | Path | None = None, base: TrainConfig | None = None, overrides: dict[str, str] | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    flat: dict[str, str] = {}
    if path is not None:
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        if cp.has_option("train", "preset"):
            cfg = PRESETS[cp.get("train", "preset")]()
        for section, prefix in (("train", ""), ("model", "model.")):
            if cp.has_section(section):
                for k, v in cp.items(section):
                    if k != "preset":
                        flat[prefix + k] = v
    flat.update(overrides or {})
    return apply_overrides(cfg, flat)


def reduced_config(**changes) -> TrainConfig:
    """Desk-scale preset for small synthetic scenes on one CPU core.

    Three coupling layers, K = 16, narrow networks, and every schedule
    compressed in proportion to a 20k-step run.
    """
    cfg = TrainConfig(
        total_steps=20_000,
        pairs_per_step=8,
        correspondences_per_step=256,
        samples_per_ray=16,
        lambda_pho_ramp=5_000,
        reg_fraction=0.25,
        lr_decay_every=5_000,
        window_initial=20,
        window_every=2_000,
        error_refresh_every=2_000,
        error_map_stride=2,
        checkpoint_every=5_000,
        model=ModelConfig(
            n_coupling=3,
            coupling_hidden=64,
            latent_dim=32,
            latent_hidden=64,
            field_hidden=128,
            field_layers=3,
        ),
    )
    return cfg.replace(**changes) if changes else cfg


def micro_config(**changes) -> TrainConfig:
    """Tiny configuration for gradient checks and smoke tests."""
    cfg = TrainConfig(
        total_steps=500,
        pairs_per_step=2,
        correspondences_per_step=16,
        samples_per_ray=4,
        lambda_pho_ramp=100,
        lr_decay_every=250,
        window_initial=4,
        window_every=100,
        error_refresh_every=100,
        checkpoint_every=250,
        log_every=50,
        model=ModelConfig(
            n_coupling=3,
            coupling_hidden=16,
            latent_dim=8,
            latent_hidden=16,
            field_hidden=16,
            field_layers=2,
            n_freq=2,
        ),
    )
    return cfg.replace(**changes) if changes else cfg


PRESETS = {"full": TrainConfig, "reduced": reduced_config, "micro": micro_config}
