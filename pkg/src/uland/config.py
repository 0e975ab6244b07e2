"""Configuration dataclasses and strict JSON loading.

Every default equals the published value where one exists; the rest are
desk-scale choices. Unknown keys are rejected so that typos fail fast.
"""
from __future__ import annotations

import math

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .exceptions import ConfigError

PAPER_INPUT_SIZE = 224
PAPER_DELTA = 7


@dataclass
class GenConfig:
    height: int = 64
    width: int = 64
    period: float = 32.0
    n_frames_min: int = 24
    n_frames_max: int = 60
    gamma: float = 1.0
    v_key: float = 0.85
    # label noise std at 4 looks; noisier clips get proportionally noisier labels
    label_noise_std: float = 0.5
    key_jitter: int = 1
    pixel_spacing: float = 0.5
    length_min: float = 18.0
    length_max: float = 28.0
    # fraction by which the ribbon shortens when it is fully hidden
    shrink_min: float = 0.10
    shrink_max: float = 0.30
    ribbon_width: float = 1.2
    cap_radius: float = 1.6
    contrast: float = 0.55
    # hidden frames keep a faint, blurred, noisier ribbon rather than none
    visibility_floor: float = 0.35
    hidden_blur: float = 1.5
    hidden_speckle_looks: float = 1.0
    background: float = 0.18
    # per-clip speckle looks at full visibility, drawn uniformly from this range
    speckle_looks: tuple[float, float] = (2.0, 8.0)
    # frame-to-frame correlation of the speckle field (tissue speckle moves slowly)
    speckle_correlation: float = 0.9
    motion_amplitude: float = 1.5
    centre_jitter: float = 8.0
    n_distractors_min: int = 1
    n_distractors_max: int = 3
    distractor_amplitude: tuple[float, float] = (0.25, 0.55)
    distractor_sigma: tuple[float, float] = (1.2, 2.2)
    distractor_step: float = 1.0

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"frame size must be >= 16, got {self.height}x{self.width}")
        if not 0.0 <= self.visibility_floor < 1.0:
            raise ConfigError("visibility_floor must lie in [0, 1)")
        if self.hidden_blur < 0 or self.hidden_speckle_looks <= 0:
            raise ConfigError("hidden_blur must be >= 0 and speckle looks positive")
        if not 0.0 <= self.speckle_correlation < 1.0:
            raise ConfigError("speckle_correlation must lie in [0, 1)")
        if self.period < 8:
            raise ConfigError(f"period must be >= 8 frames, got {self.period}")
        if not 1 <= self.n_frames_min <= self.n_frames_max:
            raise ConfigError(
                f"invalid frame-count range [{self.n_frames_min}, {self.n_frames_max}]")
        if not 0.0 < self.v_key < 1.0:
            raise ConfigError(f"v_key must lie in (0, 1), got {self.v_key}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.label_noise_std < 0:
            raise ConfigError("label_noise_std must be >= 0")
        if self.key_jitter < 0:
            raise ConfigError("key_jitter must be >= 0")
        if self.pixel_spacing <= 0:
            raise ConfigError("pixel_spacing must be positive")
        if not 0 < self.length_min <= self.length_max:
            raise ConfigError("invalid ribbon length range")
        reach = (self.length_max / 2 + self.centre_jitter * math.sqrt(2) + self.motion_amplitude
                 + self.cap_radius + 1.0)
        if reach > min(self.height, self.width) / 2:
            raise ConfigError("ribbon does not fit inside the frame")
        if not 0 <= self.shrink_min <= self.shrink_max < 1:
            raise ConfigError("invalid shrink range")
        if not 0 <= self.n_distractors_min <= self.n_distractors_max:
            raise ConfigError("invalid distractor count range")
        if not 0 < self.speckle_looks[0] <= self.speckle_looks[1]:
            raise ConfigError("speckle_looks must be a positive (low, high) range")


@dataclass
class ArchConfig:
    input_size: int = 64
    levels: int = 3
    base_filters: int = 32
    kernel: int = 3
    batchnorm_momentum: float = 0.8
    p_drop: float = 0.2
    sigma_floor: float = 1e-6

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.input_size % (2 ** self.levels):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**levels={2 ** self.levels}")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1), got {self.p_drop}")
        if self.kernel % 2 != 1:
            raise ConfigError("kernel size must be odd")
        if not 0.0 < self.batchnorm_momentum < 1.0:
            raise ConfigError("batchnorm_momentum must lie in (0, 1)")


@dataclass
class AugConfig:
    shift: float = 3.0
    rotation: float = 10.0
    zoom: tuple[float, float] = (0.9, 1.1)
    gamma: tuple[float, float] = (0.8, 1.25)

    def validate(self) -> None:
        for name in ("shift", "rotation"):
            value = getattr(self, name)
            if not (value >= 0 and value < float("inf")):
                raise ConfigError(f"augment.{name} must be finite and >= 0")
        for name in ("zoom", "gamma"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi < float("inf"):
                raise ConfigError(f"augment.{name} must be an increasing positive range")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    n_mc: int = 100
    epochs: int = 100
    batch_size: int = 16
    dice_weight: float = 1.0
    wbce_weight: float = 1.0
    augment: AugConfig = field(default_factory=AugConfig)

    def validate(self) -> None:
        if self.n_mc < 1:
            raise ConfigError("train.n_mc (M_A) must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        self.augment.validate()


@dataclass
class GatingConfig:
    delta: Optional[float] = None
    tau: int = 2
    xi: float = 1.0
    lam: int = 5
    bin_threshold: float = 0.5
    percentile: float = 75.0
    n_mc: int = 30
    temporal_mode: str = "run"
    sigma_stat_floor: float = 1e-6

    def validate(self) -> None:
        if self.delta is not None and self.delta < 0:
            raise ConfigError("delta must be >= 0")
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        if self.xi <= 0:
            raise ConfigError("xi must be positive")
        if self.lam < 1:
            raise ConfigError("lam must be >= 1")
        if not 0.0 <= self.bin_threshold <= 1.0:
            raise ConfigError("bin_threshold must lie in [0, 1]")
        if not 0.0 <= self.percentile <= 100.0:
            raise ConfigError("percentile must lie in [0, 100]")
        if self.n_mc < 1:
            raise ConfigError("gating.n_mc (M_E) must be >= 1")
        if self.temporal_mode not in ("run", "centered"):
            raise ConfigError(f"unknown temporal_mode {self.temporal_mode!r}")
        if self.sigma_stat_floor <= 0:
            raise ConfigError("sigma_stat_floor must be positive")


@dataclass
class Seeds:
    corpus: int = 0
    model: int = 0
    train: int = 0
    inference: int = 0


@dataclass
class RunConfig:
    corpus: str = "corpus"
    output_dir: str = "out"
    n_videos: int = 200
    threads: int = 1
    mode: str = "cqc+al+ep"
    split: str = "test"
    semi_auto_all_keys: bool = False
    seeds: Seeds = field(default_factory=Seeds)
    generator: GenConfig = field(default_factory=GenConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gating: GatingConfig = field(default_factory=GatingConfig)

    def validate(self) -> None:
        from .gating import parse_mode

        parse_mode(self.mode)
        if self.split not in ("train", "calib", "test"):
            raise ConfigError(f"unknown split {self.split!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.n_videos < 10:
            raise ConfigError("n_videos must be >= 10")
        self.generator.validate()
        self.arch.validate()
        self.train.validate()
        self.gating.validate()
        if self.generator.height != self.arch.input_size or self.generator.width != self.arch.input_size:
            raise ConfigError("generator frame size must equal arch.input_size")

    @property
    def delta(self) -> float:
        return resolve_delta(self.gating.delta, self.arch.input_size)


def resolve_delta(delta: Optional[float], input_size: int) -> float:
    """Mask radius; defaults to the published 7 px rescaled to ``input_size``."""
    if delta is not None:
        return float(delta)
    return float(round(PAPER_DELTA * input_size / PAPER_INPUT_SIZE))


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from ``data``; missing keys keep defaults."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key: {where}")
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = from_dict(tp, value, where)
        else:
            kwargs[key] = _coerce(value, tp, where)
    return cls(**kwargs)


def _coerce(value: Any, tp: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(types, "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where}: expected a list of {len(args)} numbers")
        return tuple(_coerce(v, a, where) for v, a in zip(value, args))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def apply_overrides(data: dict, overrides: dict[str, Any]) -> dict:
    """Set dotted keys (``gating.xi``) in a nested config dict."""
    data = json.loads(json.dumps(data))
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {part} is not a section")
        node[parts[-1]] = value
    return data


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if overrides:
        data = apply_overrides(data, overrides)
    cfg = from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
