"""Run configuration: one flat record shared by every subcommand.

Defaults are the values the generator is meant to run with (window size 16,
overlap 4, 20 sampling steps, guidance 7.5, condition weight 2). A config
is validated on construction and again whenever parsed from a file, and
files with keys this version does not know are rejected outright instead of
being silently ignored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

_SAMPLERS = ("ddim", "ddpm")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0

    # dataset generation
    identities: int = 4
    clip_frames: int = 32
    holdout_sequences: int = 3
    holdout_frames: int = 20

    # noise schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    # training
    pretrain_steps: int = 2000
    finetune_steps: int = 500
    face_steps: int = 800
    batch_size: int = 8
    learning_rate: float = 1e-3
    cond_dropout: float = 0.1
    perturb_magnitude: float = 0.05

    # synthesis and enhancement
    ws: int = 16
    os: int = 4
    steps: int = 20
    cfg: float = 7.5
    w_c: float = 2.0
    sampler: str = "ddim"
    enhance_steps: int = 20
    serial: bool = True

    # paths (required per command, not globally)
    data: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    frames: str | None = None

    def __post_init__(self):
        if self.identities < 2:
            raise ValueError("identities must be at least 2")
        if self.clip_frames < 1 or self.holdout_frames < 1:
            raise ValueError("frame counts must be at least 1")
        if self.holdout_sequences < 1:
            raise ValueError("holdout_sequences must be at least 1")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        for name in ("pretrain_steps", "finetune_steps", "face_steps",
                     "batch_size", "steps", "enhance_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must lie in [0, 1)")
        if self.perturb_magnitude < 0:
            raise ValueError("perturb_magnitude must be non-negative")
        if self.ws < 1:
            raise ValueError("ws must be at least 1")
        if self.os < 0 or self.os >= self.ws:
            raise ValueError("os must satisfy 0 <= os < ws")
        if self.steps > self.T or self.enhance_steps > self.T:
            raise ValueError("sampling steps cannot exceed T")
        if self.cfg < 0:
            raise ValueError("cfg must be non-negative")
        if self.sampler not in _SAMPLERS:
            raise ValueError(f"sampler must be one of {_SAMPLERS}")


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def parse_config(source) -> RunConfig:
    """Build a validated RunConfig from a JSON file path or a plain dict.

    Unknown keys are an error: a typo in a config must fail loudly, not
    fall back to a default.
    """
    if isinstance(source, dict):
        data = dict(source)
    else:
        with open(source) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object")
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**data)


def emit_config(cfg: RunConfig, path=None) -> dict:
    """Dump a config to a dict (and optionally a file) that parse_config
    reads back to an identical RunConfig."""
    data = asdict(cfg)
    if path is not None:
        with open(path, "w") as f:
            json.dump(data, f, indent=1, sort_keys=True)
            f.write("\n")
    return data
