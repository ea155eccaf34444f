"""Conv stem + bidirectional Transformer encoder, waveform decoder and heads.

Parameters live in a flat ``dict[str, np.ndarray]``.  Forward functions take
the same dict with :class:`~mgf.autodiff.Tensor` values (leaves created per
step by :func:`as_leaves`), so the arrays themselves are never mutated.

Tensors are channels-last: waveforms ``[B, L]``, frame sequences ``[B, T, C]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from mgf import autodiff as ad
from mgf.autodiff import Tensor
from mgf.dsp import FEATURE_KINDS, N_CEPS, feature_dim
from mgf.errors import ValidationError

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    stem_kernel: int = 320
    stem_stride: int = 160
    stem_pad: int = 80
    stem_channels: int = 64
    d_model: int = 64
    d_ff: int | None = None  # defaults to 4 * d_model
    heads: int = 4
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    head_hidden: int | None = None  # frame-head conv width, defaults to d_model
    sentence_dim: int | None = None  # defaults to d_model
    feature_kinds: tuple[str, ...] = FEATURE_KINDS
    n_ceps: int = N_CEPS
    normalize_sentence: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("stem_kernel", "stem_stride", "stem_channels", "d_model", "heads",
                     "encoder_blocks", "decoder_blocks"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.stem_pad < 0:
            raise ValidationError("stem_pad must be >= 0")
        if self.d_model % self.heads:
            raise ValidationError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        for k in self.feature_kinds:
            if k not in FEATURE_KINDS:
                raise ValidationError(f"unknown feature kind {k!r}")
        object.__setattr__(self, "feature_kinds", tuple(self.feature_kinds))

    @property
    def ff(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.d_model

    @property
    def proj_dim(self) -> int:
        return self.sentence_dim or self.d_model

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        d = dict(d)
        if "feature_kinds" in d:
            d["feature_kinds"] = tuple(d["feature_kinds"])
        return cls(**d)


PAPER_ENCODER = EncoderConfig(stem_channels=512, d_model=768, heads=12, encoder_blocks=6, decoder_blocks=4)


# -- parameters ---------------------------------------------------------------

def _block_shapes(prefix: str, d: int, ff: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for ln in ("ln1", "ln2"):
        shapes[f"{prefix}.{ln}.g"] = (d,)
        shapes[f"{prefix}.{ln}.b"] = (d,)
    for w in ("wq", "wk", "wv", "wo"):
        shapes[f"{prefix}.attn.{w}"] = (d, d)
        shapes[f"{prefix}.attn.b{w[1]}"] = (d,)
    shapes[f"{prefix}.ff.w1"] = (d, ff)
    shapes[f"{prefix}.ff.b1"] = (ff,)
    shapes[f"{prefix}.ff.w2"] = (ff, d)
    shapes[f"{prefix}.ff.b2"] = (d,)
    return shapes


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    c, d = cfg.stem_channels, cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "stem.conv1.w": (c, 1, cfg.stem_kernel),
        "stem.conv1.b": (c,),
        "stem.conv2.w": (c, c),
        "stem.conv2.b": (c,),
        "enc.proj.w": (c, d),
        "enc.proj.b": (d,),
    }
    for i in range(cfg.encoder_blocks):
        shapes.update(_block_shapes(f"enc.block{i}", d, cfg.ff))
    for i in range(cfg.decoder_blocks):
        shapes.update(_block_shapes(f"dec.block{i}", d, cfg.ff))
    shapes["dec.out.w"] = (d, 1, cfg.stem_kernel)
    shapes["dec.out.b"] = (1,)
    for kind in cfg.feature_kinds:
        dim = feature_dim(kind, cfg.n_ceps)
        shapes[f"head.{kind}.conv1.w"] = (cfg.hidden, d, 3)
        shapes[f"head.{kind}.conv1.b"] = (cfg.hidden,)
        shapes[f"head.{kind}.conv2.w"] = (dim, cfg.hidden, 3)
        shapes[f"head.{kind}.conv2.b"] = (dim,)
    shapes["sent.w1"] = (d, cfg.proj_dim)
    shapes["sent.b1"] = (cfg.proj_dim,)
    shapes["sent.w2"] = (cfg.proj_dim, cfg.proj_dim)
    shapes["sent.b2"] = (cfg.proj_dim,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name == "dec.out.w":  # transposed conv: each output sample sees d * K / stride inputs
        return shape[0] * 2
    if len(shape) == 3:
        return shape[1] * shape[2]
    return shape[0]


def init_params(cfg: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Scaled-normal weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng([seed, 0xE4C])
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(_fan_in(name, shape)), shape)
        params[name] = arr
    return params


def as_leaves(params: Mapping[str, np.ndarray], trainable: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable) for k, v in params.items()}


# -- building blocks ------------------------------------------------------

def _layer_norm(p: Params, prefix: str, x: Tensor, eps: float) -> Tensor:
    return ad.layer_norm(x, axis=-1, eps=eps) * p[f"{prefix}.g"] + p[f"{prefix}.b"]


def _attention(p: Params, prefix: str, x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads

    def split(name):
        y = x @ p[f"{prefix}.w{name}"] + p[f"{prefix}.b{name}"]
        return ad.transpose(ad.reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q") * (1.0 / np.sqrt(dh)), split("k"), split("v")
    scores = q @ ad.swapaxes(k, -1, -2)
    ctx = ad.softmax(scores, axis=-1) @ v
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def transformer_block(p: Params, prefix: str, x: Tensor, cfg: EncoderConfig) -> Tensor:
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + ff(ln(x))``."""
    x = x + _attention(p, f"{prefix}.attn", _layer_norm(p, f"{prefix}.ln1", x, cfg.ln_eps), cfg.heads)
    h = _layer_norm(p, f"{prefix}.ln2", x, cfg.ln_eps)
    h = ad.gelu(h @ p[f"{prefix}.ff.w1"] + p[f"{prefix}.ff.b1"]) @ p[f"{prefix}.ff.w2"] + p[f"{prefix}.ff.b2"]
    return x + h


def positional_encoding(n_frames: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_frames)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / (10000.0 ** (i / d_model))
    pe = np.zeros((n_frames, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def n_frames_for(n_samples: int, cfg: EncoderConfig) -> int:
    return (n_samples + 2 * cfg.stem_pad - cfg.stem_kernel) // cfg.stem_stride + 1


# -- public forward functions -----------------------------------------------

def stem_forward(p: Params, waves, cfg: EncoderConfig) -> Tensor:
    """``[B, L]`` waveforms to ``[B, T, stem_channels]`` frame embeddings.

    conv(kernel 320, stride 160, pad 80) then a pointwise conv with ReLU.
    """
    w = ad.constant(waves)
    if w.ndim == 1:
        w = ad.reshape(w, (1, w.shape[0]))
    if w.shape[1] < cfg.stem_kernel - 2 * cfg.stem_pad:
        raise ValidationError(f"input too short: {w.shape[1]} samples")
    x = ad.reshape(w, (w.shape[0], w.shape[1], 1))
    x = ad.conv1d(x, p["stem.conv1.w"], stride=cfg.stem_stride, padding=cfg.stem_pad) + p["stem.conv1.b"]
    return ad.relu(x @ p["stem.conv2.w"] + p["stem.conv2.b"])


def encode(p: Params, emb: Tensor, cfg: EncoderConfig) -> Tensor:
    """Frame embeddings to the ``[B, T, d_model]`` representation."""
    x = emb @ p["enc.proj.w"] + p["enc.proj.b"]
    x = x + positional_encoding(x.shape[1], cfg.d_model)
    for i in range(cfg.encoder_blocks):
        x = transformer_block(p, f"enc.block{i}", x, cfg)
    return x


def represent(p: Params, waves, cfg: EncoderConfig) -> Tensor:
    return encode(p, stem_forward(p, waves, cfg), cfg)


def decode_waveform(p: Params, rep: Tensor, cfg: EncoderConfig) -> Tensor:
    """Reconstruct ``[B, stride * T]`` samples from a representation."""
    x = rep
    for i in range(cfg.decoder_blocks):
        x = transformer_block(p, f"dec.block{i}", x, cfg)
    y = ad.conv_transpose1d(x, p["dec.out.w"], stride=cfg.stem_stride, padding=cfg.stem_pad) + p["dec.out.b"]
    return ad.reshape(y, (y.shape[0], y.shape[1]))


def head_frame_features(p: Params, rep: Tensor, kind: str, cfg: EncoderConfig) -> Tensor:
    """Two same-padded kernel-3 convs (ReLU between) predicting feature ``kind`` per frame."""
    if kind not in cfg.feature_kinds:
        raise ValidationError(f"unknown feature kind {kind!r}")
    h = ad.relu(ad.conv1d(rep, p[f"head.{kind}.conv1.w"], padding=1) + p[f"head.{kind}.conv1.b"])
    return ad.conv1d(h, p[f"head.{kind}.conv2.w"], padding=1) + p[f"head.{kind}.conv2.b"]


def head_sentence(p: Params, rep: Tensor, cfg: EncoderConfig) -> Tensor:
    """Mean-pool frames, two pointwise maps with ReLU, then L2-normalise: ``[B, proj_dim]``."""
    if rep.shape[1] == 0:
        raise ValidationError("empty representation")
    pooled = ad.mean(rep, axis=1)
    z = ad.relu(pooled @ p["sent.w1"] + p["sent.b1"]) @ p["sent.w2"] + p["sent.b2"]
    if cfg.normalize_sentence:
        z = z / ad.sqrt(ad.sum_(z * z, axis=-1, keepdims=True) + 1e-12)
    return z
