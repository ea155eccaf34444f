"""Pretraining: batch assembly, Adam with warmup + power decay, checkpoints, logs."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mgf import autodiff as ad
from mgf import checkpoint as ckpt
from mgf import encoder as enc
from mgf.config import RunConfig, TrainConfig
from mgf.corpus import Corpus, NoiseBank, Utterance
from mgf.dsp import SAMPLE_RATE, frame_features
from mgf.errors import CheckpointError, MGFError, NumericError, ValidationError
from mgf.objectives import (
    FeatureTargets,
    LossReport,
    apply_masks,
    augment,
    loss_frame,
    loss_phoneme,
    loss_phoneme_generative,
    loss_sample,
    loss_sentence,
    plan_masks,
    sample_crops,
    sample_negatives,
    total_loss,
)

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "lr", "l_sample", "l_frame", "l_phoneme", "l_sentence", "l_total")
CHECKPOINT_NAME = "checkpoint.mgf"
LOG_NAME = "train_log.csv"


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("MGF_THREADS", "")))
    except ValueError:
        return max(1, min(4, os.cpu_count() or 1))


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr``, then ``base_lr * (step / warmup) ** -decay_exponent``."""
    if step < 1:
        raise ValidationError("step must be >= 1")
    if step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    return cfg.base_lr * (step / cfg.warmup_steps) ** (-cfg.decay_exponent)


# -- state ------------------------------------------------------------------

@dataclass(eq=False)
class TrainState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    feature_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


class FeatureCache:
    """Frame targets of whole utterances, keyed by utterance id.

    Crops start on the frame grid, so a crop's targets are a row slice of its
    utterance's targets.  Entries are pure functions of the audio, so sharing
    one cache between runs never changes results.
    """

    def __init__(self, kinds: Sequence[str], n_ceps: int):
        self.kinds = tuple(kinds)
        self.n_ceps = n_ceps
        self._store: dict[str, dict[str, np.ndarray]] = {}
        self._lock = threading.Lock()

    def get(self, utt_id: str, samples: np.ndarray) -> dict[str, np.ndarray]:
        with self._lock:
            hit = self._store.get(utt_id)
        if hit is None:
            hit = {k: frame_features(samples, k, n_ceps=self.n_ceps) for k in self.kinds}
            with self._lock:
                self._store.setdefault(utt_id, hit)
        return hit


def source_signal(utt: Utterance, crop_len: int) -> np.ndarray:
    """The utterance samples, cyclically extended when shorter than a crop."""
    x = utt.wave.samples
    return np.take(x, np.arange(crop_len), mode="wrap") if x.size < crop_len else x


def feature_stats(corpus: Corpus, cache: FeatureCache, crop_len: int, max_utts: int = 32) -> dict:
    """Per-dimension mean/std of each frame target over the first ``max_utts`` utterances."""
    utts = corpus.utterances[:max_utts]
    feats = [cache.get(u.id, source_signal(u, crop_len)) for u in utts]
    stats = {}
    for kind in cache.kinds:
        stacked = np.concatenate([f[kind] for f in feats], axis=0)
        stats[kind] = (stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-3))
    return stats


def crop_samples(run: RunConfig) -> int:
    """Crop length rounded to whole frames."""
    hop = run.encoder.stem_stride
    return hop * max(1, int(round(run.train.crop_seconds * SAMPLE_RATE / hop)))


def init_state(run: RunConfig, corpus: Corpus | None = None, seed: int | None = None,
               cache: FeatureCache | None = None) -> TrainState:
    """Fresh parameters and zero moments; target statistics come from ``corpus``."""
    seed = run.train.seed if seed is None else seed
    params = enc.init_params(run.encoder, seed)
    stats = {}
    if corpus is not None:
        cache = cache or FeatureCache(run.encoder.feature_kinds, run.encoder.n_ceps)
        stats = feature_stats(corpus, cache, crop_samples(run))
    return TrainState(
        params=params,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        rng=np.random.default_rng([seed, 0x7A1]),
        feature_stats=stats,
    )


# -- optimiser --------------------------------------------------------------

def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_update(params, grads, m, v, t: int, lr: float, cfg: TrainConfig):
    """One Adam step (bias-corrected); returns new (params, m, v) dicts."""
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    new_p, new_m, new_v = {}, {}, {}
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new_p[k], new_m[k], new_v[k] = p, m[k], v[k]
            continue
        mk = b1 * m[k] + (1.0 - b1) * g
        vk = b2 * v[k] + (1.0 - b2) * g * g
        new_p[k] = p - lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
        new_m[k], new_v[k] = mk, vk
    return new_p, new_m, new_v


# -- batch preparation ------------------------------------------------------

@dataclass(eq=False)
class PreparedItem:
    raw: np.ndarray  # crop_a before augmentation: reconstruction / feature target source
    clean: np.ndarray  # augmented crop_a
    masked: np.ndarray  # augmented crop_a with masked segments replaced
    other: np.ndarray  # augmented crop_b
    masked_frames: np.ndarray
    unmasked: np.ndarray  # bool [T]
    targets: dict[str, np.ndarray]


def prepare_item(utt: Utterance, seed: Sequence[int], run: RunConfig, bank: NoiseBank,
                 stats: dict, cache: FeatureCache | None) -> PreparedItem:
    """Crops, augmentation, masks and (when ``cache`` is given) frame targets for one sentence."""
    tc, hop = run.train, run.encoder.stem_stride
    crop_len = crop_samples(run)
    src = source_signal(utt, crop_len)
    pair = sample_crops(src, crop_len, [*seed, 0], align=hop)
    aug_a = augment(pair.crop_a, bank, [*seed, 1])
    aug_b = augment(pair.crop_b, bank, [*seed, 2])
    n = enc.n_frames_for(crop_len, run.encoder)
    plan = plan_masks(n, [*seed, 3], segment=tc.mask_frames, ratio=tc.mask_ratio)
    masked = apply_masks(aug_a.samples, plan, bank, [*seed, 4], hop=hop, mode=tc.mask_mode)
    unmasked = np.ones(n, dtype=bool)
    unmasked[plan.masked] = False
    targets = {}
    if cache is not None:
        first = pair.offsets[0] // hop
        full = cache.get(utt.id, src)
        for kind in run.encoder.feature_kinds:
            mu, sd = stats[kind]
            targets[kind] = (full[kind][first : first + n] - mu) / sd
    return PreparedItem(pair.crop_a, aug_a.samples, masked, aug_b.samples, plan.masked, unmasked, targets)


def prepare_batch(batch: Sequence[Utterance], step_seed: int, run: RunConfig, bank: NoiseBank,
                  stats: dict, cache: FeatureCache | None) -> list[PreparedItem]:
    jobs = [(u, (step_seed, i)) for i, u in enumerate(batch)]
    threads = min(worker_threads(), len(jobs))
    if threads <= 1:
        return [prepare_item(u, s, run, bank, stats, cache) for u, s in jobs]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda j: prepare_item(j[0], j[1], run, bank, stats, cache), jobs))


# -- the step -----------------------------------------------------------------

def compute_losses(params: dict[str, ad.Tensor], items: Sequence[PreparedItem], run: RunConfig,
                   rng: np.random.Generator) -> tuple[ad.Tensor, LossReport]:
    """Forward the enabled objectives for a prepared batch."""
    tc, ec = run.train, run.encoder
    lam = tc.effective_weights()
    use_sample, use_frame, use_phon, use_sent = (w > 0 for w in lam.as_tuple())
    n = len(items)
    need_masked = use_sample or use_frame or use_phon
    need_clean = use_phon or use_sent

    waves, slots = [], {}
    for name, need, attr in (("clean", need_clean, "clean"), ("masked", need_masked, "masked"),
                             ("other", use_sent, "other")):
        if need:
            slots[name] = len(waves)
            waves.extend(getattr(it, attr) for it in items)
    rep = enc.represent(params, np.stack(waves), ec)
    t, d = rep.shape[1], rep.shape[2]

    def part(name):
        s = slots[name]
        return rep[s : s + n]

    parts: dict[str, ad.Tensor] = {}
    trace: dict = {}
    if use_sample:
        recon = enc.decode_waveform(params, part("masked"), ec)
        parts["sample"] = loss_sample(np.stack([it.raw for it in items]), recon, trace)
    if use_frame:
        rm = part("masked")
        preds = {k: enc.head_frame_features(params, rm, k, ec) for k in ec.feature_kinds}
        truth = {k: np.stack([it.targets[k] for it in items]) for k in ec.feature_kinds}
        targets = FeatureTargets(truth, preds, tc.feature_weights)
        parts["frame"] = loss_frame(targets, np.stack([it.unmasked for it in items]), trace)
    if use_phon:
        owner = np.concatenate([np.full(it.masked_frames.size, i) for i, it in enumerate(items)])
        idx = np.concatenate([i * t + it.masked_frames for i, it in enumerate(items)])
        if idx.size:
            masked_flat = ad.reshape(part("masked"), (n * t, d))
            clean_flat = ad.reshape(part("clean"), (n * t, d))
            anchors = ad.take(masked_flat, idx)
            positives = ad.take(clean_flat, idx)
            if tc.generative_phoneme:
                parts["phoneme"] = loss_phoneme_generative(anchors, positives)
            else:
                neg_idx = sample_negatives(owner, n, t, tc.negatives, rng)
                negatives = ad.reshape(ad.take(clean_flat, neg_idx.reshape(-1)), (idx.size, tc.negatives, d))
                parts["phoneme"] = loss_phoneme(anchors, positives, negatives, tc.tau_phoneme)
    if use_sent:
        z = enc.head_sentence(params, ad.concat([part("clean"), part("other")], axis=0), ec)
        parts["sentence"] = loss_sentence(z, tc.tau_sentence)
    return total_loss(parts, lam, trace)


def train_step(batch: Sequence[Utterance], state: TrainState, run: RunConfig,
               bank: NoiseBank | None = None, cache: FeatureCache | None = None) -> tuple[TrainState, LossReport]:
    """One optimisation step on ``batch``; ``state`` itself is never modified.

    On a non-finite loss or gradient a :class:`NumericError` naming the
    component is raised and the caller's state is untouched.
    """
    if len(batch) < 2:
        raise ValidationError("a training step needs at least 2 utterances")
    bank = bank if bank is not None else NoiseBank.synthetic_bank()
    tc = run.train
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng.bit_generator.state
    step_seed = int(rng.integers(2**62))
    if tc.effective_weights().frame > 0:
        if not state.feature_stats:
            raise ValidationError("frame objective enabled but the state has no target statistics")
        cache = cache or FeatureCache(run.encoder.feature_kinds, run.encoder.n_ceps)
    else:
        cache = None
    items = prepare_batch(batch, step_seed, run, bank, state.feature_stats, cache)

    leaves = enc.as_leaves(state.params)
    neg_rng = np.random.default_rng([step_seed, 0x9E6])
    try:
        total, report = compute_losses(leaves, items, run, neg_rng)
    except NumericError as exc:
        raise NumericError(f"step {state.step + 1}: {exc}") from None
    names = list(leaves)
    grads = dict(zip(names, ad.backward(total, [leaves[k] for k in names])))
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"step {state.step + 1}: non-finite gradient for {k}")
    grads, gnorm = clip_global_norm(grads, tc.grad_clip)
    t = state.step + 1
    lr = lr_schedule(t, tc)
    params, m, v = adam_update(state.params, grads, state.m, state.v, t, lr, tc)
    report.trace["lr"] = lr
    report.trace["grad_norm"] = gnorm
    new_state = TrainState(params, m, v, t, state.epoch, rng, state.feature_stats)
    return new_state, report


# -- checkpoints --------------------------------------------------------------

def _jsonable_rng(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(state: TrainState, run: RunConfig, path: str | Path) -> Path:
    arrays = {}
    for k, p in state.params.items():
        arrays[f"param/{k}"] = p
        arrays[f"adam_m/{k}"] = state.m[k]
        arrays[f"adam_v/{k}"] = state.v[k]
    for kind, (mu, sd) in state.feature_stats.items():
        arrays[f"stats/{kind}/mean"] = mu
        arrays[f"stats/{kind}/std"] = sd
    meta = {
        "format": "mgf-train-state",
        "config": run.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "seed": run.train.seed,
        "loss_weights": list(run.train.effective_weights().as_tuple()),
        "rng_state": _jsonable_rng(state.rng),
    }
    return ckpt.write(path, meta, arrays)


def load_checkpoint(path: str | Path) -> tuple[TrainState, RunConfig]:
    meta, arrays = ckpt.read(path)
    try:
        run = RunConfig.from_dict(meta["config"])
        params, m, v, stats = {}, {}, {}, {}
        for name, arr in arrays.items():
            group, _, key = name.partition("/")
            if group == "param":
                params[key] = arr
            elif group == "adam_m":
                m[key] = arr
            elif group == "adam_v":
                v[key] = arr
            elif group == "stats":
                kind, _, which = key.rpartition("/")
                stats.setdefault(kind, [None, None])[0 if which == "mean" else 1] = arr
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        state = TrainState(params, m, v, int(meta["step"]), int(meta["epoch"]), rng,
                           {k: (a, b) for k, (a, b) in stats.items()})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: bad metadata ({exc})") from None
    order = list(enc.param_shapes(run.encoder))
    if set(params) != set(order) or set(m) != set(order) or set(v) != set(order):
        raise CheckpointError("corrupt checkpoint: parameter set does not match config")
    # Summation order in the gradient norm follows dict order, so restore it.
    state.params = {k: params[k] for k in order}
    state.m = {k: m[k] for k in order}
    state.v = {k: v[k] for k in order}
    kinds = [k for k in run.encoder.feature_kinds if k in state.feature_stats]
    state.feature_stats = {k: state.feature_stats[k] for k in kinds}
    return state, run


# -- the loop -------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def log_row(step: int, report: LossReport) -> list[str]:
    return [str(step), _fmt(report.trace.get("lr", 0.0)), _fmt(report.sample), _fmt(report.frame),
            _fmt(report.phoneme), _fmt(report.sentence), _fmt(report.total)]


def epoch_batches(n_utts: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n_utts)
    batches = [order[i : i + batch_size] for i in range(0, n_utts, batch_size)]
    return [b for b in batches if b.size >= 2]


def pretrain(corpus: Corpus, run: RunConfig, out_dir: str | Path, bank: NoiseBank | None = None,
             resume: bool = False, progress: Callable[[int, LossReport], None] | None = None) -> Path:
    """Train for ``run.train.epochs`` epochs; returns the checkpoint path.

    Writes ``checkpoint.mgf`` after every epoch and ``train_log.csv``.  With
    ``resume=True`` an existing checkpoint in ``out_dir`` is continued.
    """
    if len(corpus) == 0:
        raise ValidationError("empty corpus")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck_path, log_path = out / CHECKPOINT_NAME, out / LOG_NAME
    bank = bank if bank is not None else NoiseBank.synthetic_bank()
    rows: list[list[str]] = []
    if resume and ck_path.exists():
        state, saved = load_checkpoint(ck_path)
        if saved.to_dict() != run.to_dict():
            if replace(saved, train=replace(saved.train, epochs=run.train.epochs)) != run:
                raise ValidationError("checkpoint config does not match the requested run")
            run = replace(saved, train=replace(saved.train, epochs=run.train.epochs))
        if log_path.exists():
            with open(log_path, newline="") as fh:
                rows = list(csv.reader(fh))[1 : state.step + 1]
    cache = FeatureCache(run.encoder.feature_kinds, run.encoder.n_ceps)
    if not (resume and ck_path.exists()):
        state = init_state(run, corpus, cache=cache)
    save_checkpoint(state, run, ck_path)
    _write_log(log_path, rows)
    utts = corpus.utterances
    while state.epoch < run.train.epochs:
        epoch_rng = np.random.default_rng([run.train.seed, 0x5F, state.epoch])
        for idx in epoch_batches(len(utts), run.train.batch_size, epoch_rng):
            state, report = train_step([utts[i] for i in idx], state, run, bank, cache)
            rows.append(log_row(state.step, report))
            if progress is not None:
                progress(state.step, report)
        state = replace(state, epoch=state.epoch + 1)
        save_checkpoint(state, run, ck_path)
        _write_log(log_path, rows)
    return ck_path


def _write_log(path: Path, rows: list[list[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    w.writerows(rows)
    tmp = path.with_suffix(".csv.tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def read_log(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- gradient check of the combined objective ----------------------------------

TINY_OVERRIDES = {
    "encoder": {"stem_channels": 8, "d_model": 16, "heads": 2, "encoder_blocks": 1, "decoder_blocks": 1},
    "train": {"crop_seconds": 0.75, "batch_size": 2, "negatives": 4},
}


def loss_gradcheck(run: RunConfig, corpus: Corpus, seed: int = 0, max_coords: int = 300,
                   bank: NoiseBank | None = None, eps: float = 1e-3) -> ad.GradCheckResult:
    """Finite-difference check of the weighted total loss on one fixed batch.

    Crops, masks, noise and negatives are drawn once, so the loss is a
    deterministic function of the parameters.
    """
    bank = bank if bank is not None else NoiseBank.synthetic_bank()
    state = init_state(run, corpus, seed=seed)
    batch = corpus.utterances[: run.train.batch_size]
    cache = FeatureCache(run.encoder.feature_kinds, run.encoder.n_ceps)
    items = prepare_batch(batch, seed, run, bank, state.feature_stats, cache)
    names = sorted(state.params)

    def f(tensors):
        params = dict(zip(names, tensors))
        return compute_losses(params, items, run, np.random.default_rng([seed, 0x9E6]))[0]

    return ad.finite_diff_check(f, [state.params[k] for k in names], eps=eps, max_coords=max_coords, seed=seed)
