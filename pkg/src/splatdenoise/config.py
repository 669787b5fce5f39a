"""Run configuration and the flat ``section.key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .optimizer import ExploreConfig, LRSchedule
from .synthetic import SyntheticSceneSpec


class ConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    exploration: bool = True
    relocation: bool = True
    pruning: bool = True
    refinement: bool = True


@dataclass
class LifecycleConfig:
    prune_fraction: float = 0.10
    prune_at: float = 0.8
    densify_fraction: float = 0.0005
    refinement_rounds: int = 5
    refine_start: float = 0.6
    refine_end: float = 0.9
    knn_k: int = 3
    relocation_interval: int = 100
    relocation_until: float = 0.9
    opacity_floor: float = 0.005


@dataclass
class TrainConfig:
    max_steps: int = 2000
    seed: int = 0
    lambda_ssim: float = 0.2
    eval_interval: int = 100
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # directory written by ``synth``; empty means synthesize from ``synth.*`` in memory
    data: str = ""
    lr: LRSchedule = field(default_factory=LRSchedule)
    explore: ExploreConfig = field(default_factory=ExploreConfig)
    stages: StageConfig = field(default_factory=StageConfig)
    lifecycle: LifecycleConfig = field(default_factory=LifecycleConfig)
    synth: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        lc = self.lifecycle
        if self.max_steps <= 0:
            raise ConfigError("train.max_steps must be positive")
        for name in ("prune_fraction", "densify_fraction"):
            if not 0.0 <= getattr(lc, name) < 1.0:
                raise ConfigError(f"lifecycle.{name} must lie in [0, 1)")
        for name in ("prune_at", "refine_start", "refine_end", "relocation_until"):
            if not 0.0 < getattr(lc, name) < 1.0:
                raise ConfigError(f"lifecycle.{name} must lie strictly inside (0, 1)")
        if lc.refine_start > lc.refine_end:
            raise ConfigError("lifecycle.refine_start must not exceed lifecycle.refine_end")
        if lc.relocation_interval <= 0 or self.eval_interval <= 0:
            raise ConfigError("intervals must be positive")

    @classmethod
    def baseline(cls, **kwargs) -> "TrainConfig":
        """Plain Adam: every denoising stage and relocation switched off."""
        cfg = cls(**kwargs)
        cfg.stages = StageConfig(False, False, False, False)
        return cfg


_SECTIONS = {"lr": "lr", "explore": "explore", "stages": "stages",
             "lifecycle": "lifecycle", "synth": "synth"}


def to_flat(cfg: TrainConfig) -> dict[str, object]:
    flat = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            flat[f"train.{f.name}"] = value
    return flat


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in to_flat(cfg).items())


def _parse(raw: str, current):
    raw = raw.strip()
    if raw == "auto" or current == "auto":
        return raw if raw == "auto" else float(raw)
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.split(",")]
        if len(parts) != len(current):
            raise ValueError(f"expected {len(current)} comma-separated values")
        return tuple(_parse(p, c) for p, c in zip(parts, current))
    return raw


def apply_overrides(cfg: TrainConfig, items: list[tuple[str, str, str]]) -> TrainConfig:
    """Apply ``(key, value, origin)`` triples; ``origin`` names the source in errors."""
    cfg = dataclasses.replace(cfg, lr=dataclasses.replace(cfg.lr),
                              explore=dataclasses.replace(cfg.explore),
                              stages=dataclasses.replace(cfg.stages),
                              lifecycle=dataclasses.replace(cfg.lifecycle),
                              synth=dataclasses.replace(cfg.synth))
    for key, raw, origin in items:
        section, _, name = key.strip().partition(".")
        if section == "train":
            target = cfg
        elif section in _SECTIONS:
            target = getattr(cfg, section)
        else:
            raise ConfigError(f"{origin}: unknown section in key {key!r}")
        if not name or name not in {f.name for f in dataclasses.fields(target)} or name in _SECTIONS:
            raise ConfigError(f"{origin}: unknown key {key!r}")
        try:
            value = _parse(raw, getattr(target, name))
        except ValueError as exc:
            raise ConfigError(f"{origin}: bad value for {key!r}: {exc}") from exc
        setattr(target, name, value)
    try:
        for sub in (cfg.explore, cfg.synth):
            sub.__post_init__()
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def parse_lines(text: str, origin: str = "<config>") -> list[tuple[str, str, str]]:
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{origin}:{lineno}: malformed line {line!r} (expected key = value)")
        items.append((key.strip(), value.strip(), f"{origin}:{lineno}"))
    return items


def load(path, overrides: list[str] = ()) -> TrainConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    items = []
    if path is not None:
        p = Path(path)
        items += parse_lines(p.read_text(), str(p))
    for i, ov in enumerate(overrides):
        key, sep, value = ov.partition("=")
        if not sep:
            raise ConfigError(f"--set #{i + 1}: expected key=value, got {ov!r}")
        items.append((key.strip(), value.strip(), f"--set {ov}"))
    return apply_overrides(TrainConfig(), items)
