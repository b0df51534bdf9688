"""Flat, namespaced run configuration.

Every key has a default below; config files (YAML or JSON) and ``--set`` overrides
may only name keys that exist here.  ``preset`` picks a base set of defaults.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .environment import DomainSpec, HotspotSpec
from .grpo import GrpoConfig, PpoConfig
from .policy import PolicyConfig
from .training import TrainConfig
from .worldmodel import FourierConfig, WorldConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    # data
    "env.kind": "ns",                 # ns | hotspot
    "env.height": 32,
    "env.width": 32,
    "env.frames": 20,
    "env.n_train": 64,
    "env.n_test": 8,
    "env.n_policy": 0,                # extra trajectories for policy training; 0 reuses the train set
    "env.dt": 0.05,
    "env.nu": 1e-3,
    "env.forcing": "li",
    "env.forcing_amp": 0.1,
    "env.save_every": 5,
    "env.burn_in": 10,
    "env.grf_alpha": 2.5,
    "env.grf_tau": 7.0,
    "env.hotspot_sigma": 0.25,
    "env.hotspot_band": 0.3,
    "env.hotspot_speed": [0.04, 0.08],
    "env.hotspot_amplitude": 1.0,
    # world model
    "world.n_latents": 32,
    "world.query_dim": 128,
    "world.latent_dim": 16,
    "world.enc_heads": 4,
    "world.enc_head_dim": 32,
    "world.fourier_scales": [2, 3],
    "world.fourier_n_freq": 12,
    "world.fourier_base": 2.0,
    "world.dec_blocks": 2,
    "world.dec_heads": 4,
    "world.dec_head_dim": 32,
    "world.dec_feature_dim": 16,
    "world.dec_width": 128,
    "world.dyn_dim": 128,
    "world.dyn_heads": 4,
    "world.dyn_blocks": 4,
    "world.dyn_mod_dim": 512,
    "world.step_embed_dim": 32,
    "world.gru_hidden": 32,
    "world.gru_layers": 2,
    "world.diffusion_steps": 3,
    "world.alpha_bar_final": 0.02,
    # world-model training
    "train.stage1_epochs": 300,
    "train.stage2_epochs": 150,
    "train.batch_size": 32,
    "train.lr": 1e-3,
    "train.query_lr_scale": 10.0,
    "train.lr_floor": 1e-5,
    "train.beta": 1e-5,
    "train.lam": 1.0,
    "train.n_train": 64,
    "train.history_len": 3,
    "train.in_t_only": True,
    "train.box_layout_frac": 0.0,
    # policy
    "policy.fourier_scales": [2, 3],
    "policy.fourier_n_freq": 7,
    "policy.value_embed_dim": 32,
    "policy.heads": 4,
    "policy.head_dim": 128,
    "policy.scale_feature_dim": 64,
    "policy.blocks": 2,
    "policy.a_max": 0.05,
    "policy.init_std": 0.025,
    # policy optimisation
    "grpo.algo": "grpo",              # grpo | ppo
    "grpo.groups": 4,
    "grpo.horizon": 3,
    "grpo.gamma": 0.99,
    "grpo.clip": 0.2,
    "grpo.eps_norm": 1e-8,
    "grpo.epochs": 4,
    "grpo.episodes": 8,
    "grpo.episode_len": 16,
    "grpo.total_steps": 50_000,
    "grpo.minibatch": 32,
    "grpo.lr_start": 1e-4,
    "grpo.lr_end": 1e-5,
    "grpo.filtering": True,
    "grpo.filter_reset": 0.1,
    "grpo.exec_group": "first",
    "grpo.common_noise": True,
    "grpo.n_sensors": 64,
    "ppo.value_weight": 5.0,
    "ppo.value_lr_scale": 10.0,
    # evaluation
    "eval.budgets": [64, 32, 16],
    "eval.track_trajectory": 0,
}

_TINY = {
    "env.height": 16, "env.width": 16, "env.frames": 8, "env.n_train": 4, "env.n_test": 2, "env.burn_in": 2,
    "world.n_latents": 8, "world.query_dim": 16, "world.latent_dim": 4, "world.enc_heads": 2,
    "world.enc_head_dim": 8, "world.fourier_n_freq": 3, "world.dec_blocks": 1, "world.dec_heads": 2,
    "world.dec_head_dim": 8, "world.dec_feature_dim": 8, "world.dec_width": 16, "world.dyn_dim": 16,
    "world.dyn_heads": 2, "world.dyn_blocks": 1, "world.dyn_mod_dim": 16, "world.step_embed_dim": 8,
    "world.gru_hidden": 4,
    "train.stage1_epochs": 2, "train.stage2_epochs": 2, "train.batch_size": 8, "train.n_train": 16,
    "policy.fourier_n_freq": 3, "policy.value_embed_dim": 8, "policy.heads": 2, "policy.head_dim": 8,
    "policy.scale_feature_dim": 8, "policy.blocks": 1,
    "grpo.episodes": 2, "grpo.episode_len": 4, "grpo.total_steps": 16, "grpo.minibatch": 4, "grpo.epochs": 1,
    "grpo.n_sensors": 8, "eval.budgets": [8, 4],
}

# translating-hotspot task: small models sized for a single CPU core
_HOTSPOT = {
    "env.kind": "hotspot", "env.height": 16, "env.width": 16, "env.frames": 20, "env.n_train": 48, "env.n_test": 16,
    "env.n_policy": 256,
    "world.n_latents": 16, "world.query_dim": 64, "world.latent_dim": 8, "world.enc_heads": 2,
    "world.enc_head_dim": 16, "world.fourier_scales": [1, 2], "world.fourier_n_freq": 6, "world.dec_blocks": 1,
    "world.dec_heads": 2, "world.dec_head_dim": 16, "world.dec_width": 64, "world.dyn_dim": 64,
    "world.dyn_heads": 2, "world.dyn_blocks": 2, "world.dyn_mod_dim": 128, "world.gru_hidden": 16,
    "train.stage1_epochs": 30, "train.stage2_epochs": 20, "train.batch_size": 16, "train.lr": 2e-3,
    "train.n_train": 16, "train.in_t_only": False,
    "policy.fourier_scales": [1, 2], "policy.fourier_n_freq": 5, "policy.heads": 2, "policy.head_dim": 16,
    "policy.scale_feature_dim": 16, "policy.blocks": 1, "policy.init_std": 0.04,
    "grpo.groups": 8, "grpo.episodes": 8, "grpo.total_steps": 6400, "grpo.minibatch": 16,
    "grpo.lr_start": 3e-3, "grpo.lr_end": 1e-3, "grpo.n_sensors": 8,
    "eval.budgets": [8],
}

# reduced Navier-Stokes run: about 80 s of world-model training per seed on one core
_NS_SMALL = {
    "env.n_train": 24, "env.n_test": 4,
    "world.n_latents": 16, "world.query_dim": 64, "world.latent_dim": 8, "world.enc_heads": 2,
    "world.enc_head_dim": 16, "world.fourier_n_freq": 8, "world.dec_blocks": 1, "world.dec_heads": 2,
    "world.dec_head_dim": 16, "world.dec_width": 64, "world.dyn_dim": 64, "world.dyn_heads": 2,
    "world.dyn_blocks": 2, "world.dyn_mod_dim": 128, "world.gru_hidden": 16,
    "train.stage1_epochs": 60, "train.stage2_epochs": 40, "train.batch_size": 16, "train.lr": 2e-3,
    "policy.heads": 2, "policy.head_dim": 16, "policy.scale_feature_dim": 16, "policy.blocks": 1,
}

PRESETS = {"desk": {}, "tiny": _TINY, "hotspot": _HOTSPOT, "ns-small": _NS_SMALL}


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lstrip("-").isdigit():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(default, list):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if isinstance(value, (list, tuple)):
            return [_coerce(key, v, default[0]) for v in value] if default else list(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    raise ConfigError(f"bad value {value!r} for {key} (expected {type(default).__name__})")


def _flatten(d: Mapping, prefix: str = "") -> dict:
    """Nested mappings become dotted keys, so both styles are accepted in files."""
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    preset: str = "desk"

    @classmethod
    def build(cls, preset: str = "desk", overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = cls(copy.deepcopy(DEFAULTS), preset)
        cfg.update(PRESETS[preset])
        cfg.update(overrides or {})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, Mapping):
            raise ConfigError(f"{path} must hold a mapping of keys to values")
        flat = _flatten(raw)
        preset = flat.pop("preset", "desk")
        return cls.build(preset, {**flat, **(overrides or {})})

    def update(self, items: Mapping[str, Any]) -> None:
        unknown = sorted(k for k in items if k not in DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for k, v in items.items():
            self.values[k] = _coerce(k, v, DEFAULTS[k])

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        if self["env.kind"] not in ("ns", "hotspot"):
            raise ConfigError(f"env.kind must be 'ns' or 'hotspot', got {self['env.kind']!r}")
        if self["grpo.algo"] not in ("grpo", "ppo"):
            raise ConfigError(f"grpo.algo must be 'grpo' or 'ppo', got {self['grpo.algo']!r}")
        if not self["eval.budgets"] or min(self["eval.budgets"]) < 1:
            raise ConfigError("eval.budgets must list positive sensor counts")
        if self["env.n_policy"] < 0:
            raise ConfigError("env.n_policy must be >= 0")
        if self["env.frames"] < 2:
            raise ConfigError("env.frames must be at least 2")
        try:                                    # the dataclasses carry the range checks
            self.domain(), self.world(), self.train(), self.policy(), self.grpo(), self.ppo()
            if self["env.kind"] == "hotspot":
                self.hotspot()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # -- module configs
    def section(self, ns: str) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(ns + ".")}

    def domain(self) -> DomainSpec:
        e = self.section("env")
        return DomainSpec(e["height"], e["width"], 1, e["dt"], e["nu"], e["forcing"], e["forcing_amp"],
                          e["save_every"])

    def hotspot(self) -> HotspotSpec:
        e = self.section("env")
        return HotspotSpec(e["height"], e["width"], e["hotspot_sigma"], e["hotspot_band"],
                           tuple(e["hotspot_speed"]), e["hotspot_amplitude"])

    def world(self) -> WorldConfig:
        w = self.section("world")
        fourier = FourierConfig(tuple(w.pop("fourier_scales")), w.pop("fourier_n_freq"), w.pop("fourier_base"))
        return WorldConfig(fourier=fourier, **w)

    def train(self) -> TrainConfig:
        return TrainConfig(**self.section("train"), seed=self["seed"])

    def policy(self) -> PolicyConfig:
        p = self.section("policy")
        fourier = FourierConfig(tuple(p.pop("fourier_scales")), p.pop("fourier_n_freq"))
        return PolicyConfig(latent_dim=self["world.latent_dim"], fourier=fourier, **p)

    def grpo(self) -> GrpoConfig:
        g = self.section("grpo")
        g.pop("algo")
        return GrpoConfig(**g, history_len=self["train.history_len"], seed=self["seed"])

    def ppo(self) -> PpoConfig:
        return PpoConfig(**self.section("ppo"))

    # -- serialisation
    def to_dict(self) -> dict:
        return {"preset": self.preset, **copy.deepcopy(self.values)}

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def parse_assignments(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out
