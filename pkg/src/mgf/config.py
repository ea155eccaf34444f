"""Run configuration: encoder + training + objective settings, with presets.

Precedence when building a config: preset < JSON file < explicit overrides.
Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from mgf.dsp import feature_dim
from mgf.encoder import EncoderConfig
from mgf.errors import ValidationError
from mgf.objectives import LossWeights

PRESETS = ("desk", "paper")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    warmup_steps: int = 500
    decay_exponent: float = 0.3
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    drop_sample: bool = False
    drop_frame: bool = False
    drop_phoneme: bool = False
    drop_sentence: bool = False
    generative_phoneme: bool = False
    tau_phoneme: float = 0.1
    tau_sentence: float = 0.1
    negatives: int = 32
    feature_weights: Mapping[str, float] = field(default_factory=dict)
    mask_frames: int = 14
    mask_ratio: float = 0.2
    mask_mode: str = "noise"
    crop_seconds: float = 2.0
    grad_clip: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValidationError("warmup_steps must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (sentence loss needs two sentences)")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.negatives < 1:
            raise ValidationError("negatives must be >= 1")
        if self.tau_phoneme <= 0 or self.tau_sentence <= 0:
            raise ValidationError("temperatures must be positive")
        if self.mask_mode not in ("noise", "zeros"):
            raise ValidationError(f"mask_mode must be 'noise' or 'zeros', got {self.mask_mode!r}")
        if self.crop_seconds <= 0:
            raise ValidationError("crop_seconds must be positive")
        if isinstance(self.weights, Mapping):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.weights, (list, tuple)):
            object.__setattr__(self, "weights", LossWeights(*self.weights))
        object.__setattr__(self, "feature_weights", dict(self.feature_weights))
        if not any(lam > 0 for lam in self._effective()):
            raise ValidationError("every objective is dropped or has zero weight")

    def _effective(self) -> tuple[float, ...]:
        drops = (self.drop_sample, self.drop_frame, self.drop_phoneme, self.drop_sentence)
        return tuple(0.0 if d else w for d, w in zip(drops, self.weights.as_tuple()))

    def effective_weights(self) -> LossWeights:
        """Loss weights with dropped objectives zeroed."""
        return LossWeights(*self._effective())


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = {"preset": self.preset, "encoder": self.encoder.to_dict(), "train": dataclasses.asdict(self.train)}
        d["encoder"]["feature_kinds"] = list(self.encoder.feature_kinds)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        return build_config(d.get("preset", "desk"), d)


def preset_dict(name: str) -> dict:
    """Nested dict of the named preset."""
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")
    base = RunConfig().to_dict()
    # per-dimension weights so each feature contributes a mean squared error
    base["train"]["feature_weights"] = {k: 1.0 / feature_dim(k, base["encoder"]["n_ceps"])
                                        for k in base["encoder"]["feature_kinds"]}
    # the SI-SDR term is in dB and starts near 50, so it gets the grid's 0.1
    base["train"]["weights"] = {"sample": 0.1, "frame": 1.0, "phoneme": 1.0, "sentence": 1.0}
    if name == "paper":
        base["encoder"].update(stem_channels=512, d_model=768, heads=12, encoder_blocks=6, decoder_blocks=4)
        base["train"].update(warmup_steps=10000, batch_size=120, base_lr=1e-3, epochs=300)
    base["preset"] = name
    return base


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise ValidationError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k not in ("feature_weights",) and isinstance(v, Mapping):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def build_config(preset: str = "desk", *overrides: Mapping[str, Any]) -> RunConfig:
    d = preset_dict(preset)
    for ov in overrides:
        ov = {k: v for k, v in ov.items() if k != "preset"}
        d = _merge(d, ov)
    try:
        enc = EncoderConfig.from_dict(d["encoder"])
        tr = dict(d["train"])
        tr["weights"] = LossWeights(**tr["weights"])
        train = TrainConfig(**tr)
    except TypeError as exc:
        raise ValidationError(f"bad config: {exc}") from None
    return RunConfig(preset, enc, train)


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Preset, then the JSON file at ``path``, then ``overrides``."""
    file_d: dict = {}
    if path is not None:
        try:
            file_d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(file_d, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
    name = preset or file_d.get("preset", "desk")
    return build_config(name, file_d, overrides or {})
