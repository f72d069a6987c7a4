"""Run configuration: one JSON file, one global seed, a published schema.

Every subcommand reads the same hierarchical config; unknown keys are
rejected by name so typos cannot silently fall back to defaults. All
component seeds are derived from the single ``seed`` value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .model import BackboneConfig

# section -> key -> (type, default); the authoritative schema
SCHEMA = {
    "backbone": {
        "frames": (int, 8),
        "height": (int, 16),
        "width": (int, 16),
        "channels": (int, 4),
        "cond_channels": (int, 1),
        "patch": (list, [2, 4, 4]),
        "embed_dim": (int, 64),
        "blocks": (int, 4),
        "heads": (int, 4),
        "ffn_hidden": (int, 256),
        "text_width": (int, 32),
        "ref_tokens": (int, 4),
    },
    "adapter": {
        "rank": (int, 4),
        "alpha": (float, 4.0),
        "boundary": (float, 0.5),
    },
    "training": {
        "steps": (int, 200),
        "learning_rate": (float, 0.05),
        "batch_size": (int, 4),
    },
    "sampler": {
        "steps": (int, 16),
    },
    "pipeline": {
        "source": (str, "procedural"),   # "procedural" or "directory"
        "root": (str, ""),               # sim dataset root when source=directory
        "reference_pool": (str, ""),     # pool dir; empty = fixture first frames
        "fixture_clips": (int, 16),
        "workers": (int, 2),
    },
    "dvrs": {
        "judge": (str, "mock"),
        "weight_kc": (float, 1.0 / 3.0),
        "weight_dyn": (float, 1.0 / 3.0),
        "weight_vis": (float, 1.0 / 3.0),
        "dyn_rescale": (float, 10.0),
        "retries": (int, 2),
        "workers": (int, 2),
        "frames_per_segment": (int, 8),
        "prototype": (str, ""),          # empty = built-in prototype text
    },
    "depth_eval": {
        "align": (bool, True),
    },
}


@dataclass
class RunConfig:
    seed: int = 0
    sections: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def backbone_config(self) -> BackboneConfig:
        b = self.sections["backbone"]
        return BackboneConfig(
            frames=b["frames"], height=b["height"], width=b["width"],
            channels=b["channels"], cond_channels=b["cond_channels"],
            patch=tuple(b["patch"]), embed_dim=b["embed_dim"],
            blocks=b["blocks"], heads=b["heads"], ffn_hidden=b["ffn_hidden"],
            text_width=b["text_width"], ref_tokens=b["ref_tokens"],
        )


def _coerce(section: str, key: str, value, expected_type):
    if expected_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, expected_type) or (
        expected_type is int and isinstance(value, bool)
    ):
        raise ConfigurationError(
            f"config key {section}.{key} must be {expected_type.__name__}, "
            f"got {type(value).__name__}"
        )
    return value


def parse_config(data: dict) -> RunConfig:
    """Validate a parsed config dict against the schema; fill defaults."""
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be an object")
    unknown_top = set(data) - set(SCHEMA) - {"seed"}
    if unknown_top:
        raise ConfigurationError(f"unknown config key: {sorted(unknown_top)[0]}")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigurationError("config key seed must be int")
    sections = {}
    for section, keys in SCHEMA.items():
        given = data.get(section, {})
        if not isinstance(given, dict):
            raise ConfigurationError(f"config section {section} must be an object")
        unknown = set(given) - set(keys)
        if unknown:
            raise ConfigurationError(
                f"unknown config key: {section}.{sorted(unknown)[0]}"
            )
        sec = {}
        for key, (typ, default) in keys.items():
            sec[key] = _coerce(section, key, given.get(key, default), typ)
        sections[section] = sec
    cfg = RunConfig(seed=seed, sections=sections)
    cfg.backbone_config()  # validates divisibility constraints now, not later
    if cfg.sections["adapter"]["rank"] < 1:
        raise ConfigurationError("adapter.rank must be >= 1")
    if not (0.0 < cfg.sections["adapter"]["boundary"] < 1.0):
        raise ConfigurationError("adapter.boundary must lie in (0, 1)")
    if cfg.sections["training"]["steps"] < 1 or cfg.sections["sampler"]["steps"] < 1:
        raise ConfigurationError("step counts must be >= 1")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    return parse_config(data)


def default_config_dict() -> dict:
    """A complete config with every key at its default (schema reference)."""
    return {"seed": 0, **{
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in SCHEMA.items()
    }}
