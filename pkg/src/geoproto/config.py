"""Run configuration: a flat schema read from ``key = value`` files.

Lines starting with ``#`` are comments. Every key must be a field of
:class:`TrainConfig`; anything else is rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

from .gape import FUSION_MODES


class ConfigKeyError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # geometry and prototypes
    K: int = 10
    G: int = 8
    tau_occ: float = 0.05
    hidden: int = 16
    mlp_bias: bool = True
    expected_bin_masked: bool = False
    # losses
    lambda_dist: float = 1.0
    lambda_geo: float = 0.3
    alpha: float = 20.0
    # optimiser
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.95
    lr_decay_every: int = 1000
    episodes: int = 4000
    checkpoint_every: int = 500
    # ablation switches
    enrichment: bool = True
    osb_loss: bool = True
    position_embedding: bool = False
    fusion: str = "additive"
    bg_enrich: bool = False
    query_reweight_tau: float = 0.0  # 0 disables the query-side gate
    # model and data
    channels: str = "16,16,32,32"
    image_size: int = 64
    shots: int = 1
    families: str = "compact_ellipse,annulus,irregular_blob"
    eval_families: str = ""  # empty: same as training
    source_domain: str = "source"
    target_domain: str = "target"
    heldout_episodes: int = 32
    # evaluation
    eval_episodes: int = 200
    eval_domain: str = "target"  # source, target or both
    eval_seed: int = 1000

    def __post_init__(self):
        problems = []
        if not 0 <= self.momentum < 1:
            problems.append("momentum must be in [0, 1)")
        for name in ("lr", "lr_decay", "alpha"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        for name in ("lambda_dist", "lambda_geo", "weight_decay", "query_reweight_tau", "tau_occ"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be nonnegative")
        if self.K < 2:
            problems.append("K must be >= 2")
        if self.G < 1:
            problems.append("G must be >= 1")
        if self.episodes < 0:
            problems.append("episodes must be >= 0")
        if self.checkpoint_every < 1 or self.lr_decay_every < 1:
            problems.append("checkpoint_every and lr_decay_every must be >= 1")
        if self.fusion not in FUSION_MODES:
            problems.append(f"fusion must be one of {FUSION_MODES}")
        if self.shots < 1:
            problems.append("shots must be >= 1")
        if self.eval_domain not in ("source", "target", "both"):
            problems.append("eval_domain must be source, target or both")
        if problems:
            raise ConfigKeyError("; ".join(problems))

    @property
    def channel_list(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.channels.split(",") if c.strip())

    @property
    def family_list(self) -> list[str]:
        return [f.strip() for f in self.families.split(",") if f.strip()]

    @property
    def eval_family_list(self) -> list[str]:
        names = [f.strip() for f in self.eval_families.split(",") if f.strip()]
        return names or self.family_list

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_lines(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))

    def as_dict(self) -> dict[str, str]:
        return {f.name: _render(getattr(self, f.name)) for f in fields(self)}


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: str):
    typ = _FIELDS[key].type
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigKeyError(f"bad value for {key}: {raw!r} (expected {typ})") from None
    return raw


def parse_pairs(pairs: Iterable[tuple[str, str]]) -> dict:
    out = {}
    for key, val in pairs:
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigKeyError(f"unknown config key: {key}")
        out[key] = _coerce(key, val)
    return out


def read_config_text(text: str) -> dict:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(f"line {n}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k, v))
    return parse_pairs(pairs)


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (),
                base: TrainConfig | None = None) -> TrainConfig:
    values: dict = {}
    if path is not None:
        values.update(read_config_text(Path(path).read_text()))
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigKeyError(f"override must be key=value, got {item!r}")
        pairs.append(tuple(item.split("=", 1)))
    values.update(parse_pairs(pairs))
    return (base or TrainConfig()).replace(**values)


def config_from_metadata(meta: Mapping[str, str]) -> TrainConfig:
    """Rebuild a config from checkpoint metadata, ignoring non-config keys."""
    return TrainConfig().replace(**parse_pairs((k, v) for k, v in meta.items() if k in _FIELDS))
