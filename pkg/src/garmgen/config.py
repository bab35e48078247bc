"""Single JSON run configuration shared by all CLI commands.

Sections map onto the module configs; CLI flags override file values and the
effective config is echoed into every output directory for provenance.
"""

from __future__ import annotations

import json
from dataclasses import asdict

from .garment_latent import TrainingConfig, desk_config
from .prompt_map import MapperConfig


def default_config() -> dict:
    return {
        "seed": 0,
        "corpus": {"n_train": 24, "n_holdout": 8, "seed": 0},
        "latent": asdict(desk_config()),
        "mapper": asdict(MapperConfig()),
        "embedding": {"dim": 64, "seed": 0},
        "decode": {"resolution": 64, "iso_factor": 1.5, "open_threshold_factor": 3.0},
        "texture": {"view_resolution": 512, "atlas_size": 1024, "dilation": 2,
                    "style_seed": 0},
    }


_SCHEMA = {
    "seed": int,
    "corpus.n_train": int,
    "corpus.n_holdout": int,
    "corpus.seed": int,
    "embedding.dim": int,
    "embedding.seed": int,
    "decode.resolution": int,
    "decode.iso_factor": (int, float),
    "decode.open_threshold_factor": (int, float),
    "texture.view_resolution": int,
    "texture.atlas_size": int,
    "texture.dilation": int,
    "texture.style_seed": int,
}


def validate_config(cfg: dict) -> dict:
    """Merge onto defaults and type-check; raises ValueError with the key path."""
    merged = default_config()
    for section, value in cfg.items():
        if section not in merged:
            raise ValueError(f"unknown config section or key: {section!r}")
        if isinstance(value, dict):
            for k, v in value.items():
                if k not in merged[section]:
                    raise ValueError(f"unknown config key: {section}.{k}")
                merged[section][k] = v
        else:
            merged[section] = value
    for path, types in _SCHEMA.items():
        section, _, key = path.partition(".")
        val = merged[section][key] if key else merged[section]
        if not isinstance(val, types) or isinstance(val, bool):
            raise ValueError(f"config {path} must be {types}, got {val!r}")
    if merged["decode"]["resolution"] < 8:
        raise ValueError("decode.resolution must be >= 8")
    if merged["decode"]["resolution"] > 512:
        raise ValueError("decode.resolution must be <= 512")
    # dataclass constructors re-validate their own fields
    TrainingConfig(**merged["latent"])
    MapperConfig(**merged["mapper"])
    return merged


def load_config(path: str | None) -> dict:
    if path is None:
        return default_config()
    with open(path) as fh:
        return validate_config(json.load(fh))


def training_config(cfg: dict) -> TrainingConfig:
    return TrainingConfig(**cfg["latent"])


def mapper_config(cfg: dict) -> MapperConfig:
    return MapperConfig(**cfg["mapper"])


def echo_config(cfg: dict, out_dir: str):
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
