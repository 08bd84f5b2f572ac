"""Configuration records and the JSON config document.

Every dataclass here is plain data.  ``load_config`` builds a ``GlobalConfig``
from defaults, an optional JSON file, and dotted ``key=value`` overrides, in
that order of increasing precedence.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError, MissingFileError


@dataclass
class LossWeights:
    # style similarity
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    # motion loss: reconstruction, mouth, velocity
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.5
    # total loss: motion, adversarial, orthogonality, mutual info, contrastive
    beta1: float = 1.0
    beta2: float = 0.1
    beta3: float = 0.1
    beta4: float = 0.1
    beta5: float = 0.1
    # the style similarity loss is ablated in experiments but absent from the
    # printed total, so it gets its own weight
    beta_cos: float = 0.1
    lam: float = 0.5
    tau: float = 0.1
    k: int | None = None  # None -> max(2, B // 2)
    alpha_pos: float = 1.0
    beta_neg: float = 1.0
    alpha_c: float = 1.0
    grl_ramp: float = 0.2
    info_sign: float = 1.0

    def topk(self, batch_size: int) -> int:
        k = self.k if self.k is not None else max(2, batch_size // 2)
        return min(k, batch_size)

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if not math.isfinite(v):
                raise ConfigError(f"weights.{f.name} must be finite, got {v}")
            if f.name != "info_sign" and v < 0:
                raise ConfigError(f"weights.{f.name} must be >= 0, got {v}")
        if self.tau <= 0:
            raise ConfigError(f"weights.tau must be > 0, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"weights.lam must lie in [0, 1], got {self.lam}")
        if self.k is not None and self.k < 1:
            raise ConfigError(f"weights.k must be >= 1, got {self.k}")
        if self.info_sign not in (-1.0, 1.0):
            raise ConfigError(f"weights.info_sign must be +1 or -1, got {self.info_sign}")
        if not 0.0 < self.grl_ramp <= 1.0:
            raise ConfigError(f"weights.grl_ramp must lie in (0, 1], got {self.grl_ramp}")


@dataclass
class Ablations:
    disable_adv: bool = False
    disable_cos: bool = False
    disable_orth: bool = False
    disable_info: bool = False
    disable_cts: bool = False
    disable_e_g: bool = False
    disable_audio_disent: bool = False
    disable_motion_disent: bool = False

    def active(self) -> list[str]:
        return [f.name for f in dataclasses.fields(self) if getattr(self, f.name)]


@dataclass
class ModelConfig:
    sample_rate: int = 16000
    n_mels: int = 40
    frontend_channels: int = 64
    frontend_layers: int = 2
    frontend_kernel: int = 5
    d_graph: int = 64
    gat_layers: int = 2
    d_model: int = 64
    d_style: int = 64
    d_audio: int = 64
    d_motion: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ff_mult: int = 4
    tcn_layers: int = 2
    tcn_kernel: int = 3
    conv_in_layers: int = 2
    conv_in_kernel: int = 3
    classifier_hidden: int = 64
    period: int = 25
    align_slope: float = 1.0
    content_dropout: float = 0.5
    refresh_every: int | None = None  # None -> two-pass inference

    def validate(self) -> None:
        for name in ("sample_rate", "n_mels", "frontend_channels", "frontend_layers",
                     "frontend_kernel", "d_graph", "gat_layers", "d_model", "d_style",
                     "d_audio", "d_motion", "n_heads", "enc_layers", "dec_layers",
                     "ff_mult", "tcn_layers", "tcn_kernel", "conv_in_layers",
                     "conv_in_kernel", "classifier_hidden", "period"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        if self.d_audio != self.d_motion:
            raise ConfigError("model.d_audio must equal model.d_motion (contrastive alignment)")
        if self.d_style != self.d_motion:
            raise ConfigError("model.d_style must equal model.d_motion (mutual information loss)")
        if self.align_slope < 0:
            raise ConfigError("model.align_slope must be >= 0")
        if not 0.0 <= self.content_dropout < 1.0:
            raise ConfigError("model.content_dropout must lie in [0, 1)")
        if self.refresh_every is not None and self.refresh_every < 1:
            raise ConfigError("model.refresh_every must be >= 1 or null")

    @property
    def min_frames(self) -> int:
        """Shortest sequence the motion style encoder accepts."""
        return 1 + self.tcn_layers * (self.tcn_kernel - 1)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    # the style classifiers chase a moving target; a faster learner keeps the adversary honest
    classifier_lr_scale: float = 1.0
    stage1_steps: int = 300
    stage2_steps: int = 700
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 1.0
    log_every: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    ablations: Ablations = field(default_factory=Ablations)

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def validate(self) -> None:
        if self.stage1_steps <= 0 or self.stage2_steps <= 0:
            raise ConfigError("train.stage1_steps and train.stage2_steps must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        contrastive = not (self.ablations.disable_cts and self.ablations.disable_info)
        if contrastive and self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 while a contrastive loss is enabled")
        if not self.lr > 0:
            raise ConfigError("train.lr must be positive")
        if not self.classifier_lr_scale > 0:
            raise ConfigError("train.classifier_lr_scale must be positive")
        if self.weights.k is not None and self.weights.k > self.batch_size:
            raise ConfigError("weights.k must not exceed train.batch_size")
        self.weights.validate()


@dataclass
class DataConfig:
    n_styles: int = 8
    seqs_per_style: int = 200
    seconds: float = 3.0
    fps: float = 25.0
    seed: int = 0
    val_fraction: float = 0.05
    test_fraction: float = 0.1

    def validate(self) -> None:
        if self.n_styles < 1 or self.seqs_per_style < 0:
            raise ConfigError("data.n_styles must be >= 1 and data.seqs_per_style >= 0")
        if self.seconds <= 0 or self.fps <= 0:
            raise ConfigError("data.seconds and data.fps must be positive")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise ConfigError("data split fractions must be >= 0 and sum below 1")


@dataclass
class Paths:
    topology: str = "corpus/topology.json"
    manifest: str = "corpus/manifest.json"
    corpus_dir: str = "corpus"
    checkpoint_dir: str = "runs"
    output: str = "out"


@dataclass
class GlobalConfig:
    paths: Paths = field(default_factory=Paths)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "GlobalConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config field {prefix}{key}")
        sub = _nested_type(cls, key)
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{prefix}{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    GlobalConfig: {"paths": Paths, "model": ModelConfig, "train": TrainConfig, "data": DataConfig},
    TrainConfig: {"weights": LossWeights, "ablations": Ablations},
}


def _nested_type(cls, key):
    return _NESTED.get(cls, {}).get(key)


def config_from_dict(data: dict[str, Any]) -> GlobalConfig:
    cfg = _build(GlobalConfig, data, "")
    _check_types(cfg, "")
    return cfg


def _check_types(obj, prefix: str) -> None:
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            _check_types(v, f"{prefix}{f.name}.")
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if v is None or default is None:
            continue
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{prefix}{f.name} must be a boolean, got {v!r}")
        elif isinstance(default, (int, float)):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{prefix}{f.name} must be numeric, got {v!r}")
            if isinstance(default, int) and not isinstance(default, bool) and not float(v).is_integer():
                raise ConfigError(f"{prefix}{f.name} must be an integer, got {v!r}")
            if isinstance(default, int):
                setattr(obj, f.name, int(v))
            else:
                setattr(obj, f.name, float(v))
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{prefix}{f.name} must be a string, got {v!r}")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> GlobalConfig:
    """Defaults < file < overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingFileError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    apply_overrides(data, overrides or [])
    return config_from_dict(data).validate()
