"""Mapper configuration: one flat dataclass, a `key = value` file format,
and command-line overrides.

Every run-affecting knob lives here so a config file plus a dataset fully
determines a mapping run. Unknown keys and malformed values are rejected
loudly; silent fallback to a default is how reproducibility dies.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable, List

from .dsa import DsaSettings, Thresholds
from .optim import OptimSettings


class ConfigError(ValueError):
    """Bad configuration file or override."""


_CHOICES = {
    "dsa": ("off", "add", "remove", "full"),
    "kf_filtering": ("none", "partial", "full"),
    "final_refinement": ("on", "off"),
    "depth_normalization": ("normalized", "raw"),
    "holdout": ("protocol", "none"),
}


@dataclass
class MapperConfig:
    # change-detection thresholds
    eps_opacity: float = 0.5
    eps_depth: float = 0.10
    eps_color: float = 0.15
    eps_seed: float = 0.20
    tau: float = 10.0
    mask_cover: float = 0.5
    weight_ratio_gamma: float = 0.6
    min_conflict_fraction: float = 0.003
    min_attrib_weight: float = 0.5

    # keyframing and covisibility
    theta_translation: float = 0.3
    theta_rotation_deg: float = 20.0
    covis_tolerance: float = 0.1
    covis_stride: int = 8
    covis_min_fraction: float = 0.05
    window_size: int = 8

    # seeding and per-step optimization budgets
    seed_stride: int = 2
    seed_opacity: float = 0.5
    seed_iters: int = 50
    map_iters: int = 60
    remove_window_iters: int = 100
    final_refine_iters: int = 2000
    prune_opacity: float = 0.05

    # optimizer
    lr_mean: float = 1.6e-4
    lr_rot: float = 1e-3
    lr_log_scale: float = 1e-2
    lr_opacity: float = 1e-1
    lr_color: float = 2.5e-3
    lam: float = 0.2
    w_iso: float = 0.0

    # pipeline modes
    dsa: str = "full"
    kf_filtering: str = "partial"
    final_refinement: str = "on"
    depth_normalization: str = "normalized"
    holdout: str = "protocol"

    def validate(self):
        for name, allowed in _CHOICES.items():
            v = getattr(self, name)
            if v not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, "
                                  f"got {v!r}")
        positives = ("eps_opacity", "eps_depth", "eps_color", "eps_seed",
                     "tau", "mask_cover", "weight_ratio_gamma",
                     "theta_translation", "theta_rotation_deg",
                     "covis_tolerance", "lr_mean", "lr_rot", "lr_log_scale",
                     "lr_opacity", "lr_color")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("covis_stride", "window_size", "seed_stride",
                     "seed_iters", "map_iters", "remove_window_iters",
                     "final_refine_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0.0 < self.seed_opacity < 1.0):
            raise ConfigError("seed_opacity must lie in (0, 1)")
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError("lam must lie in [0, 1]")
        if not (0.0 <= self.prune_opacity < 1.0):
            raise ConfigError("prune_opacity must lie in [0, 1)")
        if not (0.0 <= self.covis_min_fraction <= 1.0):
            raise ConfigError("covis_min_fraction must lie in [0, 1]")
        try:
            self.thresholds().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    # -- converters to the per-module settings objects --------------------

    def thresholds(self) -> Thresholds:
        return Thresholds(
            eps_opacity=self.eps_opacity, eps_depth=self.eps_depth,
            eps_color=self.eps_color, eps_seed=self.eps_seed, tau=self.tau,
            mask_cover=self.mask_cover,
            weight_ratio_gamma=self.weight_ratio_gamma,
            min_conflict_fraction=self.min_conflict_fraction,
            min_attrib_weight=self.min_attrib_weight)

    def dsa_settings(self) -> DsaSettings:
        return DsaSettings(
            mode=self.dsa, kf_filtering=self.kf_filtering,
            seed_stride=self.seed_stride, seed_opacity=self.seed_opacity,
            seed_iters=self.seed_iters, map_iters=self.map_iters,
            remove_window_iters=self.remove_window_iters,
            window_size=self.window_size,
            covis_tolerance=self.covis_tolerance,
            covis_stride=self.covis_stride,
            covis_min_fraction=self.covis_min_fraction)

    def optim_settings(self) -> OptimSettings:
        return OptimSettings(
            lr_mean=self.lr_mean, lr_rot=self.lr_rot,
            lr_log_scale=self.lr_log_scale, lr_opacity=self.lr_opacity,
            lr_color=self.lr_color, lam=self.lam, w_iso=self.w_iso,
            normalize_depth=self.depth_normalization == "normalized")


def _coerce(name: str, raw: str, target_type: type):
    raw = raw.strip()
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"cannot parse {name} = {raw!r} as "
                          f"{target_type.__name__}") from e


def apply_overrides(cfg: MapperConfig, pairs: Iterable[str]) -> MapperConfig:
    """Apply `key=value` strings in order. Unknown keys are errors."""
    types = {f.name: f.type for f in fields(cfg)}
    concrete = {f.name: type(getattr(cfg, f.name)) for f in fields(cfg)}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        name, raw = pair.split("=", 1)
        name = name.strip()
        if name not in types:
            raise ConfigError(f"unknown config key {name!r}")
        setattr(cfg, name, _coerce(name, raw, concrete[name]))
    return cfg


def load_config(path: str) -> MapperConfig:
    """Parse a flat `key = value` file; '#' starts a comment."""
    cfg = MapperConfig()
    pairs: List[str] = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, "
                                  f"got {line!r}")
            pairs.append(line)
    apply_overrides(cfg, pairs)
    return cfg


def dump_config(cfg: MapperConfig) -> str:
    """Render the config in its own file format (round-trips)."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"
