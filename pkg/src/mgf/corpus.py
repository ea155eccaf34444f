"""Audio I/O, manifests, the synthetic labelled corpus and the noise bank."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mgf.dsp import HOP, SAMPLE_RATE, Waveform
from mgf.errors import ValidationError

log = logging.getLogger(__name__)

PCM_SCALE = 32768.0


class WavError(ValidationError):
    """Unreadable or unsupported WAV file; ``code`` says which check failed."""

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    wave: Waveform
    speaker_id: int
    frame_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.frame_labels is not None:
            labels = np.asarray(self.frame_labels, dtype=np.int64)
            if labels.size != n_frames(len(self.wave)):
                raise ValidationError(
                    f"utterance {self.id}: {labels.size} labels for {n_frames(len(self.wave))} frames"
                )
            labels.flags.writeable = False
            object.__setattr__(self, "frame_labels", labels)


@dataclass(frozen=True, eq=False)
class Corpus:
    utterances: tuple[Utterance, ...]
    class_count: int
    speaker_count: int

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        for u in self.utterances:
            if not 0 <= u.speaker_id < self.speaker_count:
                raise ValidationError(f"utterance {u.id}: speaker {u.speaker_id} out of range")
            if u.frame_labels is not None and u.frame_labels.size and (
                u.frame_labels.min() < 0 or u.frame_labels.max() >= self.class_count
            ):
                raise ValidationError(f"utterance {u.id}: frame label out of range")

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def subset(self, utts: Sequence[Utterance]) -> "Corpus":
        return Corpus(tuple(utts), self.class_count, self.speaker_count)


def n_frames(n_samples: int) -> int:
    """Frames on the 10 ms encoder grid for a signal of ``n_samples``."""
    return n_samples // HOP


# -- WAV --------------------------------------------------------------------

def read_wav(path: str | Path) -> Waveform:
    """Read a RIFF/WAVE PCM16 mono file, scaling samples by 1/32768."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError("malformed header", f"{path} is not RIFF/WAVE")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid, size = raw[pos : pos + 4], struct.unpack("<I", raw[pos + 4 : pos + 8])[0]
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavError("malformed header", f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise WavError("malformed header", f"{path}: short fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavError("malformed header", f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag != 1:
        raise WavError("unsupported format", f"{path}: format tag {tag}, need PCM")
    if channels != 1:
        raise WavError("unsupported channel count", f"{path}: {channels} channels")
    if bits != 16:
        raise WavError("unsupported sample width", f"{path}: {bits} bits")
    if rate <= 0:
        raise WavError("malformed header", f"{path}: sample rate {rate}")
    pcm = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2")
    return Waveform(pcm.astype(np.float64) / PCM_SCALE, sample_rate=rate)


def write_wav(path: str | Path, wave: Waveform) -> None:
    pcm = np.clip(np.round(wave.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, wave.sample_rate, wave.sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(data))
    Path(path).write_bytes(header + data)


# -- manifests --------------------------------------------------------------

def read_labels(path: str | Path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return np.array([int(ln) for ln in lines if ln], dtype=np.int64)


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def load_manifest(path: str | Path, class_count: int | None = None, speaker_count: int | None = None) -> Corpus:
    """Load a JSONL manifest of ``{id, wav_path, speaker_id, labels_path?}`` records.

    Relative paths resolve against the manifest's directory.  Class and
    speaker counts default to one more than the largest id seen.
    """
    path = Path(path)
    root = path.parent
    utts = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            uid, wav_path, spk = str(rec["id"]), rec["wav_path"], int(rec["speaker_id"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{lineno}: bad manifest record ({exc})") from None
        wav_file = root / wav_path
        if not wav_file.is_file():
            raise ValidationError(f"utterance {uid}: missing file {wav_file}")
        wave = read_wav(wav_file)
        labels = None
        if rec.get("labels_path"):
            lab_file = root / rec["labels_path"]
            if not lab_file.is_file():
                raise ValidationError(f"utterance {uid}: missing file {lab_file}")
            labels = read_labels(lab_file)
            if labels.size != n_frames(len(wave)):
                raise ValidationError(
                    f"utterance {uid}: label/frame count mismatch ({labels.size} labels, "
                    f"{n_frames(len(wave))} frames)"
                )
        utts.append(Utterance(uid, wave, spk, labels))
    if not utts:
        raise ValidationError("empty corpus")
    if speaker_count is None:
        speaker_count = max(u.speaker_id for u in utts) + 1
    if class_count is None:
        labelled = [u.frame_labels.max() for u in utts if u.frame_labels is not None and u.frame_labels.size]
        class_count = int(max(labelled)) + 1 if labelled else 1
    return Corpus(tuple(utts), class_count, speaker_count)


def save_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Write WAVs, label CSVs and ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for u in corpus:
        write_wav(out / "wav" / f"{u.id}.wav", u.wave)
        rec = {"id": u.id, "wav_path": f"wav/{u.id}.wav", "speaker_id": u.speaker_id}
        if u.frame_labels is not None:
            write_labels(out / "labels" / f"{u.id}.csv", u.frame_labels)
            rec["labels_path"] = f"labels/{u.id}.csv"
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# -- synthetic corpus -------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 8
    speaker_count: int = 8
    utterances_per_speaker: int = 8
    utterance_seconds: float = 3.0
    seed: int = 0
    min_segment_ms: float = 50.0
    max_segment_ms: float = 300.0

    def __post_init__(self):
        for name in ("class_count", "speaker_count", "utterances_per_speaker"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.utterance_seconds <= 0:
            raise ValidationError("utterance_seconds must be positive")
        if not 0 < self.min_segment_ms <= self.max_segment_ms:
            raise ValidationError("bad segment length range")


FORMANT_RANGES = ((300.0, 900.0), (950.0, 2400.0), (2500.0, 3800.0))
FORMANT_GAINS = np.array([1.0, 0.6, 0.4])


def class_formants(class_count: int, seed: int) -> np.ndarray:
    """Formant triples ``[class_count, 3]`` in Hz.

    First formants sit on a jittered even grid so every pair of classes has a
    distinct dominant spectral peak; the upper two are uniform in their range.
    """
    rng = np.random.default_rng([seed, 1])
    lo, hi = FORMANT_RANGES[0]
    step = (hi - lo) / class_count
    f1 = lo + step * (np.arange(class_count) + 0.5 + rng.uniform(-0.2, 0.2, class_count))
    f1 = rng.permutation(f1)
    f2 = rng.uniform(*FORMANT_RANGES[1], size=class_count)
    f3 = rng.uniform(*FORMANT_RANGES[2], size=class_count)
    return np.stack([f1, f2, f3], axis=1)


def speaker_traits(speaker_count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-speaker (pitch factor, spectral tilt)."""
    rng = np.random.default_rng([seed, 2])
    pitch = rng.uniform(0.9, 1.1, speaker_count)
    tilt = rng.uniform(-0.4, 0.4, speaker_count)
    return pitch, tilt


def synth_utterance(
    n_samples: int,
    formants: np.ndarray,
    pitch: float,
    tilt: float,
    rng: np.random.Generator,
    min_segment: int,
    max_segment: int,
) -> tuple[np.ndarray, np.ndarray]:
    """One utterance as concatenated phone segments; returns (samples, per-sample class)."""
    x = np.zeros(n_samples)
    cls = np.zeros(n_samples, dtype=np.int64)
    gains = FORMANT_GAINS * np.exp(tilt * np.arange(3))
    ramp = min(80, min_segment // 4)
    pos = 0
    while pos < n_samples:
        length = min(int(rng.integers(min_segment, max_segment + 1)), n_samples - pos)
        c = int(rng.integers(len(formants)))
        t = np.arange(length) / SAMPLE_RATE
        phases = rng.uniform(0, 2 * np.pi, 3)
        seg = sum(gains[k] * np.sin(2 * np.pi * pitch * formants[c, k] * t + phases[k]) for k in range(3))
        env = np.ones(length)
        r = min(ramp, length // 2)
        if r:
            env[:r] = np.linspace(0.0, 1.0, r, endpoint=False)
            env[length - r :] = np.linspace(1.0, 0.0, r, endpoint=False)
        x[pos : pos + length] = 0.25 * rng.uniform(0.5, 1.0) * env * seg
        cls[pos : pos + length] = c
        pos += length
    x += rng.normal(0.0, 0.003, n_samples)
    return x, cls


def majority_labels(sample_classes: np.ndarray, class_count: int) -> np.ndarray:
    """Class generating the most samples of each 10 ms frame."""
    nf = n_frames(sample_classes.size)
    blocks = sample_classes[: nf * HOP].reshape(nf, HOP)
    counts = np.stack([(blocks == c).sum(axis=1) for c in range(class_count)], axis=1)
    return counts.argmax(axis=1)


def synth_corpus(spec: SynthSpec) -> Corpus:
    """Generate a labelled corpus: formant-triple classes under speaker pitch/tilt transforms."""
    formants = class_formants(spec.class_count, spec.seed)
    pitch, tilt = speaker_traits(spec.speaker_count, spec.seed)
    n = int(round(spec.utterance_seconds * SAMPLE_RATE))
    lo = int(round(spec.min_segment_ms * SAMPLE_RATE / 1000))
    hi = int(round(spec.max_segment_ms * SAMPLE_RATE / 1000))
    utts = []
    for s in range(spec.speaker_count):
        for u in range(spec.utterances_per_speaker):
            rng = np.random.default_rng([spec.seed, 3, s, u])
            x, cls = synth_utterance(n, formants, pitch[s], tilt[s], rng, lo, hi)
            utts.append(Utterance(f"spk{s:03d}_utt{u:03d}", Waveform(x), s, majority_labels(cls, spec.class_count)))
    return Corpus(tuple(utts), spec.class_count, spec.speaker_count)


# -- noise ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseBank:
    """Non-speech noise for masking and augmentation.

    ``synthetic=True`` ignores ``clips`` and produces seeded Gaussian noise
    with RMS ``10 ** (level_db / 20)``.
    """

    clips: tuple[Waveform, ...] = field(default_factory=tuple)
    synthetic: bool = False
    level_db: float = -20.0

    @classmethod
    def synthetic_bank(cls, level_db: float = -20.0) -> "NoiseBank":
        return cls((), True, level_db)

    @classmethod
    def from_dir(cls, path: str | Path) -> "NoiseBank":
        clips = tuple(read_wav(p) for p in sorted(Path(path).glob("*.wav")))
        if not clips:
            raise ValidationError(f"no noise available: no .wav files in {path}")
        return cls(clips)

    def __bool__(self) -> bool:
        return self.synthetic or bool(self.clips)


def noise_sample(bank: NoiseBank, length: int, seed) -> Waveform:
    """``length`` samples of noise; clips are picked and offset uniformly and wrap cyclically."""
    rng = np.random.default_rng(seed)
    if bank.synthetic:
        return Waveform(rng.normal(0.0, 10 ** (bank.level_db / 20), length))
    if not bank.clips:
        raise ValidationError("no noise available")
    clip = bank.clips[int(rng.integers(len(bank.clips)))].samples
    offset = int(rng.integers(clip.size))
    return Waveform(np.take(clip, offset + np.arange(length), mode="wrap"))
