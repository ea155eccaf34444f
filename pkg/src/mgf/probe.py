"""Downstream evaluation: linear probes, one-shot speaker split, data-efficiency
sweep and the drop-one ablation harness.

Representation cache layout: ``<cache_dir>/<checkpoint sha256>/<utterance id>.arr``
where an ``.arr`` file is ``b"MGFA"``, ``u8 ndim``, ``ndim x u64`` shape, then
little-endian float64 data.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from mgf import autodiff as ad
from mgf import encoder as enc
from mgf import trainer
from mgf.config import RunConfig
from mgf.corpus import Corpus, NoiseBank, Utterance
from mgf.encoder import EncoderConfig
from mgf.errors import MGFError, ValidationError

log = logging.getLogger(__name__)

ARR_MAGIC = b"MGFA"
PROBE_EPOCHS = 100
SWEEP_HEADER = ("fraction", "init", "train_frames", "probe_accuracy", "finetune_accuracy", "dataset")
ABLATION_HEADER = ("variant", "frame_class", "one_shot_speaker", "delta_frame_class",
                   "delta_one_shot_speaker", "status", "dataset")
ABLATION_VARIANTS = {
    "full": {},
    "drop_sample": {"drop_sample": True},
    "drop_frame": {"drop_frame": True},
    "drop_phoneme": {"drop_phoneme": True},
    "drop_sentence": {"drop_sentence": True},
    "generative_phoneme": {"generative_phoneme": True},
}


class TaskKind(str, Enum):
    FRAME_CLASS = "frame_class"
    SPEAKER = "speaker"
    ONE_SHOT_SPEAKER = "one_shot_speaker"


@dataclass(frozen=True)
class ProbeTask:
    kind: TaskKind = TaskKind.FRAME_CLASS
    label_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValidationError(f"label_fraction must be in (0, 1], got {self.label_fraction}")


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    train_size: int
    test_size: int
    checkpoint_id: str = ""
    degenerate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError(f"accuracy {self.accuracy} outside [0, 1]")


# -- models and representations ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class Model:
    """Encoder parameters plus an identifier used to key the representation cache."""

    params: Mapping[str, np.ndarray]
    encoder: EncoderConfig
    id: str


def load_model(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    state, run = trainer.load_checkpoint(path)
    return Model(state.params, run.encoder, hashlib.sha256(raw).hexdigest())


def random_model(encoder: EncoderConfig, seed: int) -> Model:
    """An untrained encoder (the random-init baseline)."""
    params = enc.init_params(encoder, seed)
    digest = hashlib.sha256()
    for k in sorted(params):
        digest.update(k.encode())
        digest.update(params[k].tobytes())
    return Model(params, encoder, "init-" + digest.hexdigest())


def _as_model(model: Model | str | Path) -> Model:
    return model if isinstance(model, Model) else load_model(model)


def write_arr(path: Path, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype="<f8")
    body = ARR_MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes()
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(body)
    tmp.replace(path)


def read_arr(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:4] != ARR_MAGIC or len(raw) < 5:
        raise ValidationError(f"{path}: not an array cache file")
    ndim = raw[4]
    shape = struct.unpack_from(f"<{ndim}Q", raw, 5)
    offset = 5 + 8 * ndim
    n = int(np.prod(shape)) if ndim else 1
    if len(raw) != offset + 8 * n:
        raise ValidationError(f"{path}: truncated array cache file")
    return np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def _forward(params: Mapping[str, np.ndarray], waves: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    with ad.no_grad():
        return enc.represent(enc.as_leaves(params, trainable=False), waves, cfg).data


def extract_representations(model: Model | str | Path, corpus: Corpus | Sequence[Utterance],
                            cache_dir: str | Path | None = None, batch: int = 8) -> dict[str, np.ndarray]:
    """Clean forward pass per utterance: ``{utterance id: [T, d_model]}``.

    Utterances of equal length are batched; batches run on up to
    ``MGF_THREADS`` worker threads.
    """
    model = _as_model(model)
    utts = list(corpus)
    out: dict[str, np.ndarray] = {}
    cdir = Path(cache_dir) / model.id if cache_dir is not None else None
    todo = []
    for u in utts:
        if cdir is not None and (cdir / f"{u.id}.arr").exists():
            out[u.id] = read_arr(cdir / f"{u.id}.arr")
        else:
            todo.append(u)
    groups: dict[int, list[Utterance]] = {}
    for u in todo:
        groups.setdefault(len(u.wave), []).append(u)
    chunks = [g[i : i + batch] for g in groups.values() for i in range(0, len(g), batch)]

    def run(chunk):
        reps = _forward(model.params, np.stack([u.wave.samples for u in chunk]), model.encoder)
        return [(u, reps[i].copy()) for i, u in enumerate(chunk)]

    threads = min(trainer.worker_threads(), len(chunks))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = [r for part in pool.map(run, chunks) for r in part]
    else:
        results = [r for c in chunks for r in run(c)]
    if cdir is not None and results:
        cdir.mkdir(parents=True, exist_ok=True)
    for u, rep in results:
        if u.frame_labels is not None and rep.shape[0] != u.frame_labels.size:
            raise ValidationError(
                f"utterance {u.id}: {rep.shape[0]} representation frames vs {u.frame_labels.size} labels "
                "(encoder stride does not match the label frame rate)")
        if cdir is not None:
            write_arr(cdir / f"{u.id}.arr", rep)
        out[u.id] = rep
    return {u.id: out[u.id] for u in utts}


# -- the probe itself ---------------------------------------------------------------

def _standardize(train: np.ndarray, *others: np.ndarray):
    mu = train.mean(axis=0)
    sd = np.maximum(train.std(axis=0), 1e-8)
    return [(a - mu) / sd for a in (train, *others)]


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_softmax(x: np.ndarray, y: np.ndarray, n_classes: int, seed: int, epochs: int = PROBE_EPOCHS,
                lr: float = 3e-3, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Affine softmax regression trained with minibatch Adam; returns ``(W, b)``."""
    rng = np.random.default_rng([seed, 0x9B0])
    n, d = x.shape
    w, b = np.zeros((d, n_classes)), np.zeros(n_classes)
    mw, vw, mb, vb = np.zeros_like(w), np.zeros_like(w), np.zeros_like(b), np.zeros_like(b)
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            p = _softmax_rows(x[idx] @ w + b)
            p[np.arange(idx.size), y[idx]] -= 1.0
            p /= idx.size
            gw, gb = x[idx].T @ p, p.sum(axis=0)
            t += 1
            mw = b1 * mw + (1 - b1) * gw
            vw = b2 * vw + (1 - b2) * gw * gw
            mb = b1 * mb + (1 - b1) * gb
            vb = b2 * vb + (1 - b2) * gb * gb
            c1, c2 = 1 - b1 ** t, 1 - b2 ** t
            w = w - lr * (mw / c1) / (np.sqrt(vw / c2) + eps)
            b = b - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
    return w, b


def _score(pred: np.ndarray, y: np.ndarray) -> tuple[float, dict[int, float]]:
    per_class = {int(c): float((pred[y == c] == c).mean()) for c in np.unique(y)}
    return float((pred == y).mean()), per_class


def train_linear_probe(features: np.ndarray, labels: np.ndarray, task: ProbeTask,
                       held_out: tuple[np.ndarray, np.ndarray] | None = None,
                       n_classes: int | None = None, checkpoint_id: str = "",
                       epochs: int = PROBE_EPOCHS) -> ProbeResult:
    """Fit one affine layer with softmax cross-entropy on frozen ``features``.

    Without ``held_out`` a seeded 20 % of the rows is held out.  Features are
    standardised with training statistics.  If every label is the same class
    the result is flagged ``degenerate`` (accuracy 1.0); a training split with
    one class but a test split with others is an error.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValidationError(f"features {x.shape} and labels {y.shape} are not aligned")
    if held_out is None:
        perm = np.random.default_rng([task.seed, 0x5B1]).permutation(y.size)
        cut = max(1, int(math.ceil(0.2 * y.size)))
        held_out = (x[perm[:cut]], y[perm[:cut]])
        x, y = x[perm[cut:]], y[perm[cut:]]
    tx, ty = np.asarray(held_out[0], dtype=np.float64), np.asarray(held_out[1], dtype=np.int64)
    if y.size == 0 or ty.size == 0:
        raise ValidationError("empty training or test split")
    classes = np.unique(np.concatenate([y, ty]))
    if classes.size == 1:
        return ProbeResult(1.0, {int(classes[0]): 1.0}, int(y.size), int(ty.size), checkpoint_id, True)
    if np.unique(y).size == 1:
        raise ValidationError(f"degenerate split: training labels are all class {int(y[0])}")
    n_classes = int(n_classes or classes.max() + 1)
    xs, txs = _standardize(x, tx)
    w, b = fit_softmax(xs, y, n_classes, task.seed, epochs)
    acc, per_class = _score(np.argmax(txs @ w + b, axis=1), ty)
    return ProbeResult(acc, per_class, int(y.size), int(ty.size), checkpoint_id)


# -- splits -----------------------------------------------------------------------

def _by_speaker(utts: Sequence[Utterance]) -> dict[int, list[Utterance]]:
    groups: dict[int, list[Utterance]] = {}
    for u in utts:
        groups.setdefault(u.speaker_id, []).append(u)
    return dict(sorted(groups.items()))


def one_shot_split(corpus: Corpus | Sequence[Utterance], seed: int) -> tuple[list[Utterance], list[Utterance]]:
    """One training utterance per speaker; ``ceil(0.2 * rest)`` of the others go to test."""
    train, test = [], []
    for spk, group in _by_speaker(list(corpus)).items():
        if len(group) < 2:
            warnings.warn(f"speaker {spk} has a single utterance; excluded from the one-shot split")
            continue
        order = np.random.default_rng([seed, 0x1540, spk]).permutation(len(group))
        rest = order[1:]
        train.append(group[order[0]])
        test.extend(group[i] for i in rest[: int(math.ceil(0.2 * rest.size))])
    return train, test


def holdout_split(corpus: Corpus | Sequence[Utterance], seed: int, ratio: float = 0.25):
    """Per speaker, ``ceil(ratio * n)`` utterances to test and the rest to train."""
    train, test = [], []
    for spk, group in _by_speaker(list(corpus)).items():
        order = np.random.default_rng([seed, 0x401D, spk]).permutation(len(group))
        cut = min(len(group) - 1, int(math.ceil(ratio * len(group))))
        test.extend(group[i] for i in order[:cut])
        train.extend(group[i] for i in order[cut:])
    return train, test


def stratified_subsample(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices keeping ``round(fraction * n_c)`` items of every class ``c``."""
    labels = np.asarray(labels)
    if fraction >= 1.0:
        return np.arange(labels.size)
    rng = np.random.default_rng([seed, 0x57A])
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = int(round(fraction * idx.size))
        if k == 0:
            raise ValidationError(f"label fraction {fraction} leaves no examples of class {int(c)}")
        keep.append(rng.choice(idx, size=k, replace=False))
    return np.sort(np.concatenate(keep))


# -- task runners -------------------------------------------------------------------

def frame_arrays(reps: Mapping[str, np.ndarray], utts: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    for u in utts:
        if u.frame_labels is None:
            raise ValidationError(f"utterance {u.id} has no frame labels")
    return (np.concatenate([reps[u.id] for u in utts]), np.concatenate([u.frame_labels for u in utts]))


def pooled_arrays(reps: Mapping[str, np.ndarray], utts: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([reps[u.id].mean(axis=0) for u in utts]), np.array([u.speaker_id for u in utts]))


def run_probe(model: Model | str | Path, corpus: Corpus, task: ProbeTask,
              cache_dir: str | Path | None = None, reps: Mapping[str, np.ndarray] | None = None) -> ProbeResult:
    """Extract (or reuse) frozen representations and probe them for ``task``."""
    model = _as_model(model)
    if reps is None:
        reps = extract_representations(model, corpus, cache_dir)
    if task.kind is TaskKind.FRAME_CLASS:
        train, test = holdout_split(corpus, task.seed)
        x, y = frame_arrays(reps, train)
        keep = stratified_subsample(y, task.label_fraction, task.seed)
        return train_linear_probe(x[keep], y[keep], task, frame_arrays(reps, test), corpus.class_count, model.id)
    if task.kind is TaskKind.SPEAKER:
        train, test = holdout_split(corpus, task.seed)
    else:
        train, test = one_shot_split(corpus, task.seed)
    return train_linear_probe(*pooled_arrays(reps, train), task, pooled_arrays(reps, test),
                              corpus.speaker_count, model.id)


# -- full fine-tuning ---------------------------------------------------------------

ENCODER_PREFIXES = ("stem.", "enc.")


def finetune_frame_class(params: Mapping[str, np.ndarray], cfg: EncoderConfig, corpus: Corpus,
                         task: ProbeTask, epochs: int = 10, lr: float = 1e-3, batch: int = 8) -> float:
    """Train encoder and a linear frame classifier together; returns test accuracy.

    Only the frames kept by the class-stratified ``task.label_fraction``
    subsample contribute to the loss.
    """
    train, test = holdout_split(corpus, task.seed)
    labels = np.concatenate([u.frame_labels for u in train])
    keep = np.zeros(labels.size, dtype=bool)
    keep[stratified_subsample(labels, task.label_fraction, task.seed)] = True
    bounds = np.cumsum([0] + [u.frame_labels.size for u in train])
    masks = [keep[bounds[i] : bounds[i + 1]] for i in range(len(train))]

    c = corpus.class_count
    p = {k: v for k, v in params.items() if k.startswith(ENCODER_PREFIXES)}
    p["probe.w"] = np.zeros((cfg.d_model, c))
    p["probe.b"] = np.zeros(c)
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(a) for k, a in p.items()}
    rng = np.random.default_rng([task.seed, 0xF17E])
    b1, b2, eps, t = 0.9, 0.999, 1e-8, 0
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for s in range(0, len(order), batch):
            idx = [i for i in order[s : s + batch] if masks[i].any()]
            if not idx:
                continue
            groups: dict[int, list[int]] = {}
            for i in idx:
                groups.setdefault(len(train[i].wave), []).append(i)
            leaves = enc.as_leaves(p)
            losses, count = [], 0
            for members in groups.values():
                rep = enc.represent(leaves, np.stack([train[i].wave.samples for i in members]), cfg)
                n, t_frames, d = rep.shape
                sel = np.concatenate([j * t_frames + np.flatnonzero(masks[i]) for j, i in enumerate(members)])
                y = np.concatenate([train[i].frame_labels[masks[i]] for i in members])
                logits = ad.take(ad.reshape(rep, (n * t_frames, d)), sel) @ leaves["probe.w"] + leaves["probe.b"]
                picked = ad.take(ad.reshape(logits, (-1,)), np.arange(y.size) * c + y)
                losses.append(ad.sum_(ad.logsumexp(logits, axis=1) - picked))
                count += y.size
            loss = losses[0]
            for extra in losses[1:]:
                loss = loss + extra
            loss = loss * (1.0 / count)
            names = list(leaves)
            grads = ad.backward(loss, [leaves[k] for k in names])
            t += 1
            c1, c2 = 1 - b1 ** t, 1 - b2 ** t
            for k, g in zip(names, grads):
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                p[k] = p[k] - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
    correct = total = 0
    for u in test:
        rep = _forward(p, u.wave.samples[None], cfg)[0]
        pred = np.argmax(rep @ p["probe.w"] + p["probe.b"], axis=1)
        correct += int((pred == u.frame_labels).sum())
        total += u.frame_labels.size
    return correct / total


# -- sweeps and ablations -----------------------------------------------------------

def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_csv_text(header, rows))
    return path


def data_efficiency_sweep(model: Model | str | Path, corpus: Corpus, fractions: Sequence[float],
                          seed: int = 0, out_path: str | Path | None = None, finetune_epochs: int = 10,
                          dataset: str = "synthetic", cache_dir: str | Path | None = None) -> list[dict]:
    """Frozen-probe and full fine-tune accuracy per label fraction, pretrained vs scratch.

    One row per (fraction, init); the scratch encoder is a fresh
    initialisation with ``seed``.
    """
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValidationError(f"fraction {f} outside (0, 1]")
    pre = _as_model(model)
    inits = {"pretrained": pre, "scratch": random_model(pre.encoder, seed)}
    reps = {name: extract_representations(m, corpus, cache_dir) for name, m in inits.items()}
    rows = []
    for f in fractions:
        task = ProbeTask(TaskKind.FRAME_CLASS, f, seed)
        for name, m in inits.items():
            probe = run_probe(m, corpus, task, reps=reps[name])
            ft = finetune_frame_class(m.params, m.encoder, corpus, task, epochs=finetune_epochs)
            rows.append({"fraction": float(f), "init": name, "train_frames": probe.train_size,
                         "probe_accuracy": probe.accuracy, "finetune_accuracy": ft, "dataset": dataset})
    if out_path is not None:
        write_csv(out_path, SWEEP_HEADER, [[r[k] for k in SWEEP_HEADER] for r in rows])
    return rows


def one_shot_accuracy(model: Model, corpus: Corpus, seed: int, splits: int = 5,
                      reps: Mapping[str, np.ndarray] | None = None) -> float:
    """Mean one-shot speaker accuracy over ``splits`` seeded splits."""
    reps = reps if reps is not None else extract_representations(model, corpus)
    accs = [run_probe(model, corpus, ProbeTask(TaskKind.ONE_SHOT_SPEAKER, 1.0, seed * 1000 + k), reps=reps).accuracy
            for k in range(splits)]
    return float(np.mean(accs))


def ablation_suite(corpus: Corpus, base: RunConfig, out_dir: str | Path, bank: NoiseBank | None = None,
                   variants: Mapping[str, Mapping] | None = None, dataset: str = "synthetic",
                   one_shot_splits: int = 5) -> list[dict]:
    """Pretrain and probe the full model and each drop-one / generative variant.

    Writes ``ablation.csv`` under ``out_dir``; a failing variant gets a
    ``failed: ...`` status and empty accuracies instead of aborting the table.
    """
    out = Path(out_dir)
    variants = dict(variants if variants is not None else ABLATION_VARIANTS)
    variants.setdefault("full", {})
    results: dict[str, dict] = {}
    for name in ["full"] + [k for k in variants if k != "full"]:
        try:
            run = replace(base, train=replace(base.train, **variants[name]))
            ck = trainer.pretrain(corpus, run, out / name, bank=bank)
            model = load_model(ck)
            reps = extract_representations(model, corpus)
            frame = run_probe(model, corpus, ProbeTask(TaskKind.FRAME_CLASS, 1.0, base.train.seed), reps=reps)
            shot = one_shot_accuracy(model, corpus, base.train.seed, one_shot_splits, reps)
            results[name] = {"frame_class": frame.accuracy, "one_shot_speaker": shot, "status": "ok"}
        except MGFError as exc:
            log.warning("variant %s failed: %s", name, exc)
            results[name] = {"frame_class": None, "one_shot_speaker": None, "status": f"failed: {exc}"}
    full = results["full"]
    rows = []
    for name, r in results.items():
        row = {"variant": name, **r, "dataset": dataset}
        for task in ("frame_class", "one_shot_speaker"):
            ok = r[task] is not None and full[task] is not None
            row[f"delta_{task}"] = r[task] - full[task] if ok else None
        rows.append(row)
    write_csv(out / "ablation.csv", ABLATION_HEADER,
              [["" if row[k] is None else row[k] for k in ABLATION_HEADER] for row in rows])
    return rows
