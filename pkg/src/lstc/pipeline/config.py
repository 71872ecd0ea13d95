"""JSON-backed experiment configs."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError


def _from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**kwargs)


class JsonConfig:
    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data)

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SynthConfig(JsonConfig):
    n_videos: int = 24
    clips_per_video: int = 6
    grid: tuple = (4, 4, 2)  # (h, w, t)
    d: int = 16
    c_local: int = 4
    c_longterm: int = 4
    actors_per_clip: tuple = (1, 3)
    noise_sigma: float = 0.3
    seed: int = 0
    # held-out videos appended after the training videos
    n_test_videos: int = 8
    n_identities: int = 12
    cast_size: int = 5
    local_rate: float = 0.3
    context_radius_s: int = 8
    # the first n_interaction local classes fire when *another* actor in the
    # clip shows the class pattern, so pooling over the actor's own box misses them
    n_interaction: int = 1

    def __post_init__(self):
        h, w, t = self.grid
        counts = dict(n_videos=self.n_videos, clips_per_video=self.clips_per_video,
                      h=h, w=w, t=t, d=self.d, n_identities=self.n_identities,
                      cast_size=self.cast_size)
        for name, v in counts.items():
            if int(v) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.c_local < 0 or self.c_longterm < 0 or self.c_local + self.c_longterm < 1:
            raise ConfigError("need c_local, c_longterm >= 0 with at least one class")
        if self.n_test_videos < 0:
            raise ConfigError("n_test_videos must be >= 0")
        lo, hi = self.actors_per_clip
        if not 1 <= lo <= hi:
            raise ConfigError("actors_per_clip must be a range (lo, hi) with 1 <= lo <= hi")
        if hi > self.cast_size:
            raise ConfigError("actors_per_clip upper bound exceeds cast_size")
        if self.cast_size > self.n_identities:
            raise ConfigError("cast_size exceeds n_identities")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.local_rate <= 1.0:
            raise ConfigError("local_rate must lie in [0, 1]")
        if self.c_longterm >= 1:
            if self.clips_per_video == 1:
                raise ConfigError("long-term classes need clips_per_video >= 2")
            if 2 * self.c_longterm > self.n_identities:
                raise ConfigError("each long-term class needs its own anchor/partner identities")
        if not 0 <= self.n_interaction <= self.c_local:
            raise ConfigError("n_interaction must lie in [0, c_local]")
        if self.context_radius_s < 1:
            raise ConfigError("context_radius_s must be >= 1")

    @property
    def c(self):
        return self.c_local + self.c_longterm


@dataclass(frozen=True)
class TrainConfig(JsonConfig):
    stage: int = 1
    learning_rate: float = 0.1
    weight_decay: float = 1e-7
    steps: int = 1000
    batch_clips: int = 8
    K: int = 2
    M: int = 2
    d_k: int = 0  # 0 -> d // 2
    attn_scale: bool = True
    radius_s: int = 8
    include_center: bool = False
    seed: int = 0
    threshold: float = 0.5
    init_scale: float = 1.0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.steps < 0 or self.batch_clips < 1:
            raise ConfigError("steps must be >= 0 and batch_clips >= 1")
        if self.K < 1 or self.M < 1:
            raise ConfigError("K and M must be >= 1")
        if self.d_k < 0 or self.radius_s < 0:
            raise ConfigError("d_k and radius_s must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
