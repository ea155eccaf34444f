"""The four time-scale objectives, mask planning, cropping and augmentation.

Loss functions accept :class:`~mgf.autodiff.Tensor` (or array) inputs and
return scalar Tensors so they can be differentiated; ``.item()`` gives the
value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from mgf import autodiff as ad
from mgf.autodiff import Tensor
from mgf.corpus import NoiseBank, Utterance, noise_sample
from mgf.dsp import EPS_SDR, HOP, SAMPLE_RATE, SDR_CLAMP, Waveform
from mgf.errors import NumericError, ValidationError

MASK_FRAMES = 14  # 140 ms
MASK_RATIO = 0.20
MAX_PLACEMENT_FAILURES = 100
LOSS_NAMES = ("sample", "frame", "phoneme", "sentence")


# -- masking ----------------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    n_frames: int
    segments: tuple[tuple[int, int], ...]
    seed: object = None
    warning: str | None = None

    @property
    def masked(self) -> np.ndarray:
        """Sorted masked frame indices."""
        if not self.segments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(s, e) for s, e in sorted(self.segments)])

    @property
    def unmasked(self) -> np.ndarray:
        keep = np.ones(self.n_frames, dtype=bool)
        keep[self.masked] = False
        return np.flatnonzero(keep)

    @property
    def coverage(self) -> float:
        return self.masked.size / self.n_frames if self.n_frames else 0.0


def plan_masks(
    n_frames: int,
    seed,
    segment: int = MASK_FRAMES,
    ratio: float = MASK_RATIO,
    max_failures: int = MAX_PLACEMENT_FAILURES,
) -> MaskPlan:
    """Place non-overlapping ``segment``-frame masks at uniform random starts.

    Placement stops once another segment would push coverage past ``ratio``
    or after ``max_failures`` overlapping draws.  Abutting segments are allowed.
    """
    if n_frames < segment:
        return MaskPlan(n_frames, (), seed, warning=f"{n_frames} frames is shorter than one mask segment")
    rng = np.random.default_rng(seed)
    taken = np.zeros(n_frames, dtype=bool)
    segments: list[tuple[int, int]] = []
    failures = 0
    budget = ratio * n_frames + 1e-9
    while segment * (len(segments) + 1) <= budget and failures < max_failures:
        start = int(rng.integers(0, n_frames - segment + 1))
        if taken[start : start + segment].any():
            failures += 1
            continue
        taken[start : start + segment] = True
        segments.append((start, start + segment))
    return MaskPlan(n_frames, tuple(sorted(segments)), seed)


def apply_masks(
    crop: Waveform | np.ndarray,
    plan: MaskPlan,
    bank: NoiseBank,
    seed,
    hop: int = HOP,
    mode: str = "noise",
) -> np.ndarray:
    """Replace samples ``[hop*s, hop*e)`` of every masked segment with noise (or zeros)."""
    x = np.array(crop.samples if isinstance(crop, Waveform) else crop, dtype=np.float64)
    if plan.n_frames * hop > x.size:
        raise ValidationError(f"mask plan of {plan.n_frames} frames does not fit {x.size} samples")
    for k, (s, e) in enumerate(plan.segments):
        lo, hi = s * hop, e * hop
        if mode == "zeros":
            x[lo:hi] = 0.0
        elif mode == "noise":
            x[lo:hi] = noise_sample(bank, hi - lo, [*_seed_list(seed), k]).samples
        else:
            raise ValidationError(f"unknown mask mode {mode!r}")
    return x


def _seed_list(seed) -> list[int]:
    if seed is None:
        return [0]
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


# -- crops and augmentation -------------------------------------------------

@dataclass(frozen=True, eq=False)
class CropPair:
    crop_a: np.ndarray
    crop_b: np.ndarray
    offsets: tuple[int, int]
    padded: bool = False


def sample_crops(utt: Utterance | Waveform | np.ndarray, crop_len: int, seed, align: int = 1) -> CropPair:
    """Two crops of ``crop_len`` samples at independent uniform offsets.

    Offsets are multiples of ``align``.  Utterances shorter than ``crop_len``
    are cyclically padded and flagged.  ``crop_a`` is the one used by the
    sample, frame and phoneme objectives.
    """
    if isinstance(utt, Utterance):
        x = utt.wave.samples
    elif isinstance(utt, Waveform):
        x = utt.samples
    else:
        x = np.asarray(utt, dtype=np.float64)
    padded = x.size < crop_len
    if padded:
        x = np.take(x, np.arange(crop_len), mode="wrap")
    rng = np.random.default_rng(seed)
    if align < 1:
        raise ValidationError("align must be >= 1")
    hi = (x.size - crop_len) // align
    oa, ob = (align * int(rng.integers(0, hi + 1)) for _ in range(2))
    return CropPair(x[oa : oa + crop_len].copy(), x[ob : ob + crop_len].copy(), (oa, ob), padded)


@dataclass(frozen=True, eq=False)
class Augmented:
    samples: np.ndarray
    snr_db: float
    mask_start: int
    mask_len: int
    noise: np.ndarray = field(repr=False, default=None)


def augment(
    crop: Waveform | np.ndarray,
    bank: NoiseBank,
    seed,
    mask_ms: tuple[float, float] = (100.0, 200.0),
    snr_db: tuple[float, float] = (5.0, 20.0),
) -> Augmented:
    """Zero one random 100-200 ms span, then add noise at an SNR drawn from [5, 20] dB.

    Passing ``mask_ms=(0, 0)`` disables the temporal mask and
    ``snr_db=(inf, inf)`` disables the noise.
    """
    x = np.array(crop.samples if isinstance(crop, Waveform) else crop, dtype=np.float64)
    rng = np.random.default_rng(seed)
    lo, hi = (int(round(m * SAMPLE_RATE / 1000)) for m in mask_ms)
    mlen = min(int(rng.integers(lo, hi + 1)), x.size)
    mstart = int(rng.integers(0, x.size - mlen + 1))
    x[mstart : mstart + mlen] = 0.0
    snr = float(rng.uniform(*snr_db)) if math.isfinite(snr_db[0]) else math.inf
    noise = np.zeros_like(x)
    if math.isfinite(snr):
        raw = noise_sample(bank, x.size, [*_seed_list(seed), 1]).samples
        ps, pn = float(x @ x), float(raw @ raw)
        if ps > 0 and pn > 0:
            noise = raw * math.sqrt(ps / (pn * 10 ** (snr / 10)))
        else:
            noise = raw
        x = x + noise
    return Augmented(x, snr, mstart, mlen, noise)


# -- weights and report -----------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    sample: float = 1.0
    frame: float = 1.0
    phoneme: float = 1.0
    sentence: float = 1.0

    def __post_init__(self):
        vals = self.as_tuple()
        if any(v < 0 for v in vals):
            raise ValidationError("loss weights must be nonnegative")
        if not any(v > 0 for v in vals):
            raise ValidationError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.sample, self.frame, self.phoneme, self.sentence)

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(*(c * v for v in self.as_tuple()))


TUNING_GRID = (0.03, 0.1, 0.3, 1.0)


@dataclass
class LossReport:
    sample: float
    frame: float
    phoneme: float
    sentence: float
    total: float
    weights: LossWeights
    trace: dict = field(default_factory=dict)

    def parts(self) -> tuple[float, float, float, float]:
        return (self.sample, self.frame, self.phoneme, self.sentence)


# -- sample scale -------------------------------------------------------------

def loss_sample(x, x_hat, trace: dict | None = None) -> Tensor:
    """Negative SI-SDR in dB, averaged over a batch of ``[B, L]`` (or ``[L]``) signals.

    The power ratio is clamped to [1e-10, 1e10] (i.e. +-100 dB) and the
    distortion energy floored at 1e-12.  ``trace['alpha']`` receives the
    per-item scale factors.
    """
    xr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xh = ad.constant(x_hat) if not isinstance(x_hat, Tensor) else x_hat
    if xr.ndim == 1:
        xr = xr[None]
        xh = ad.reshape(xh, (1, -1)) if xh.ndim == 1 else xh
    if xr.shape != xh.shape:
        raise ValidationError(f"length mismatch: {xr.shape} vs {xh.shape}")
    energy = (xr * xr).sum(axis=1, keepdims=True)
    if (energy == 0).any():
        raise ValidationError("degenerate reference: all-zero signal")
    alpha = ad.sum_(xh * xr, axis=1, keepdims=True) / energy
    target = alpha * xr
    dist = target - xh
    num = ad.sum_(target * target, axis=1)
    den = ad.clip(ad.sum_(dist * dist, axis=1), EPS_SDR, np.inf)
    lim = 10.0 ** (SDR_CLAMP / 10)
    ratio = ad.clip(num / den, 1.0 / lim, lim)
    sdr = ad.log(ratio) * (10.0 / math.log(10.0))
    if trace is not None:
        trace["alpha"] = alpha.data.reshape(-1).copy()
        trace["si_sdr"] = sdr.data.copy()
    return -ad.mean(sdr)


# -- frame scale ----------------------------------------------------------------

@dataclass(eq=False)
class FeatureTargets:
    """Ground truth ``[B, T, D]`` arrays and predictions per feature kind."""

    truth: Mapping[str, np.ndarray]
    pred: Mapping[str, Tensor]
    weights: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for k, u in self.truth.items():
            if k not in self.pred:
                raise ValidationError(f"no prediction for feature {k}")
            if tuple(np.shape(u)) != tuple(self.pred[k].shape):
                raise ValidationError(f"feature {k}: target {np.shape(u)} vs prediction {self.pred[k].shape}")
            if self.weights.get(k, 1.0) < 0:
                raise ValidationError(f"feature {k}: negative weight")

    def weight(self, kind: str) -> float:
        return float(self.weights.get(kind, 1.0))


def loss_frame(targets: FeatureTargets, unmasked: np.ndarray, trace: dict | None = None) -> Tensor:
    """Mean over unmasked frames of ``sum_h w_h * ||u_h - u_hat_h||^2``.

    ``unmasked`` is a boolean ``[B, T]`` (or ``[T]``) array selecting the frames
    that count; the per-kind weighted terms go to ``trace['frame_terms']``.
    """
    keep = np.asarray(unmasked, dtype=np.float64)
    count = keep.sum()
    if count == 0:
        raise ValidationError("no unmasked frames")
    total = None
    terms = {}
    for kind, truth in targets.truth.items():
        pred = ad.constant(targets.pred[kind])
        diff = pred - np.asarray(truth, dtype=np.float64)
        per_frame = ad.sum_(diff * diff, axis=-1)
        if per_frame.shape != keep.shape:
            raise ValidationError(f"feature {kind}: frame mask {keep.shape} vs {per_frame.shape}")
        term = ad.sum_(per_frame * keep) * (targets.weight(kind) / count)
        terms[kind] = term.item()
        total = term if total is None else total + term
    if total is None:
        raise ValidationError("no feature targets")
    if trace is not None:
        trace["frame_terms"] = terms
    return total


# -- phoneme scale ---------------------------------------------------------------

def loss_phoneme(anchors, positives, negatives, tau: float = 0.1) -> Tensor:
    """InfoNCE: mean over anchors of ``-log(e^{v.v+/t} / (sum_k e^{v.v_k/t} + e^{v.v+/t}))``.

    Shapes: anchors and positives ``[M, D]``, negatives ``[M, K, D]``.
    """
    v, vp, vn = ad.constant(anchors), ad.constant(positives), ad.constant(negatives)
    if vn.ndim != 3 or vn.shape[1] < 1:
        raise ValidationError("need at least one negative per anchor (K >= 1)")
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    if v.shape != vp.shape or vn.shape[0] != v.shape[0] or vn.shape[2] != v.shape[1]:
        raise ValidationError(f"shape mismatch: anchors {v.shape}, positives {vp.shape}, negatives {vn.shape}")
    m, d = v.shape
    pos = ad.sum_(v * vp, axis=1, keepdims=True) * (1.0 / tau)
    neg = ad.reshape(ad.reshape(v, (m, 1, d)) @ ad.swapaxes(vn, 1, 2), (m, vn.shape[1])) * (1.0 / tau)
    logits = ad.concat([pos, neg], axis=1)
    return ad.mean(ad.logsumexp(logits, axis=1) - ad.reshape(pos, (m,)))


def loss_phoneme_generative(anchors, positives) -> Tensor:
    """Mean absolute error between masked-pass and clean-pass frame vectors."""
    v, vp = ad.constant(anchors), ad.constant(positives)
    if v.shape != vp.shape:
        raise ValidationError(f"shape mismatch: {v.shape} vs {vp.shape}")
    return ad.mean(ad.abs_(v - vp))


def sample_negatives(
    sentence_of_anchor: np.ndarray, n_sentences: int, n_frames: int, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Flat frame indices ``[M, K]`` into a ``[n_sentences * n_frames]`` pool.

    Each anchor's negatives are uniform over frames of the *other* sentences.
    """
    if n_sentences < 2:
        raise ValidationError("negatives from other sentences need at least 2 sentences")
    m = sentence_of_anchor.size
    other = rng.integers(0, n_sentences - 1, size=(m, k))
    other = other + (other >= sentence_of_anchor[:, None])
    frame = rng.integers(0, n_frames, size=(m, k))
    return other * n_frames + frame


# -- sentence scale ---------------------------------------------------------------

def partner_index(n: int) -> np.ndarray:
    """Positive of row ``i`` when the 2N rows are ``[a_0..a_{N-1}, b_0..b_{N-1}]``."""
    return (np.arange(2 * n) + n) % (2 * n)


def loss_sentence(z, tau: float = 0.1) -> Tensor:
    """NT-Xent over ``2N`` projections ordered ``[a_0..a_{N-1}, b_0..b_{N-1}]``.

    The denominator runs over the other ``2N - 1`` rows (positive included,
    self excluded); the loss is averaged over all ``2N`` anchors.
    """
    z = ad.constant(z)
    if z.ndim != 2 or z.shape[0] % 2:
        raise ValidationError(f"expected [2N, D] projections, got {z.shape}")
    n2 = z.shape[0]
    n = n2 // 2
    if n < 2:
        raise ValidationError("need >=2 sentences")
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    sim = (z @ ad.transpose(z)) * (1.0 / tau)
    flat = ad.reshape(sim, (n2 * n2,))
    rows = np.arange(n2)
    off = np.array([[i * n2 + k for k in range(n2) if k != i] for i in range(n2)])
    pos = ad.take(flat, rows * n2 + partner_index(n))
    return ad.mean(ad.logsumexp(ad.take(flat, off), axis=1) - pos)


# -- combination ----------------------------------------------------------------

def total_loss(parts: Mapping[str, Tensor | float | None], weights: LossWeights,
               trace: dict | None = None) -> tuple[Tensor, LossReport]:
    """``sum_i lambda_i L_i`` over the four objectives; missing parts count as zero."""
    values = {}
    total: Tensor | None = None
    for name, lam in zip(LOSS_NAMES, weights.as_tuple()):
        part = parts.get(name)
        if part is None:
            values[name] = 0.0
            continue
        val = part.item() if isinstance(part, Tensor) else float(part)
        if not math.isfinite(val):
            raise NumericError(f"non-finite {name} loss")
        values[name] = val
        if lam == 0:
            continue
        term = ad.constant(part) * lam
        total = term if total is None else total + term
    if total is None:
        total = ad.constant(0.0)
    tot = sum(lam * values[n] for n, lam in zip(LOSS_NAMES, weights.as_tuple()))
    report = LossReport(values["sample"], values["frame"], values["phoneme"], values["sentence"],
                        tot, weights, dict(trace or {}))
    return total, report
