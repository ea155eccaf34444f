"""``mgf`` command line: synth, pretrain, probe, sweep, ablate, features, maskplan, gradcheck.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from mgf import __version__
from mgf import autodiff as ad
from mgf import probe, trainer
from mgf.config import PRESETS, build_config, load_config
from mgf.corpus import Corpus, NoiseBank, SynthSpec, load_manifest, read_wav, save_corpus, synth_corpus
from mgf.dsp import FEATURE_KINDS, frame_features
from mgf.errors import MGFError, ValidationError
from mgf.objectives import MASK_FRAMES, MASK_RATIO, plan_masks

log = logging.getLogger("mgf")
HELP_WIDTH = 88


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH)


# -- SVG line chart ---------------------------------------------------------------

def svg_line_chart(series: dict[str, Sequence[tuple[float, float]]], title: str, x_label: str,
                   y_label: str, width: int = 480, height: int = 320) -> str:
    """A minimal dependency-free SVG line chart; one polyline per series."""
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValidationError("nothing to plot")
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(1.0, max(ys))
    x1 = x1 if x1 > x0 else x0 + 1.0
    left, right, top, bottom = 56, 16, 32, 44
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for k in range(6):
        yv = y0 + (y1 - y0) * k / 5
        out.append(f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.2f}</text>')
    for xv in sorted(set(xs)):
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(y_label)}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = colors[i % len(colors)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(s))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        for x, y in s:
            out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        ly = top + 14 * (i + 1)
        out.append(f'<text x="{left + pw - 4}" y="{ly}" text-anchor="end" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- helpers ----------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus(args) -> Corpus:
    if args.data:
        return load_manifest(args.data)
    return synth_corpus(SynthSpec(seed=args.seed))


def _bank(args) -> NoiseBank:
    return NoiseBank.from_dir(args.noise_dir) if getattr(args, "noise_dir", None) else NoiseBank.synthetic_bank()


def _run_config(args):
    train = {"seed": args.seed}
    for flag in ("epochs", "batch_size", "warmup_steps", "base_lr", "crop_seconds"):
        value = getattr(args, flag, None)
        if value is not None:
            train[flag] = value
    for flag in ("drop_sample", "drop_frame", "drop_phoneme", "drop_sentence", "generative_phoneme"):
        if getattr(args, flag, False):
            train[flag] = True
    return load_config(args.config, args.preset, {"train": train})


def _common(p: argparse.ArgumentParser, out_default: str = "out") -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")


def _data_flag(p):
    p.add_argument("--data", help="corpus manifest (JSONL); default: the synthetic corpus for --seed")


def _config_flags(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", choices=PRESETS, help="built-in preset (default desk)")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="override train.batch_size")
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int, help="override train.warmup_steps")
    p.add_argument("--base-lr", dest="base_lr", type=float, help="override train.base_lr")
    p.add_argument("--crop-seconds", dest="crop_seconds", type=float, help="override train.crop_seconds")
    p.add_argument("--noise-dir", dest="noise_dir", help="directory of noise WAVs (default synthetic noise)")


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(args.classes, args.speakers, args.utt, args.seconds, args.seed)
    manifest = save_corpus(synth_corpus(spec), _out_dir(args))
    print(f"wrote {spec.speaker_count * spec.utterances_per_speaker} utterances; manifest {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    run = _run_config(args)
    corpus = _corpus(args)
    out = _out_dir(args)
    (out / "config.json").write_text(json.dumps(run.to_dict(), sort_keys=True, indent=2) + "\n")

    def progress(step, report):
        if args.verbose:
            print(f"step {step} total {report.total:.4f}", file=sys.stderr)

    ck = trainer.pretrain(corpus, run, out, bank=_bank(args), resume=args.resume, progress=progress)
    print(f"checkpoint {ck}")
    return 0


def cmd_probe(args) -> int:
    corpus = _corpus(args)
    if args.checkpoint:
        model = probe.load_model(args.checkpoint)
    else:
        model = probe.random_model(build_config(args.preset or "desk").encoder, args.seed)
    task = probe.ProbeTask(args.task, args.fraction, args.seed)
    res = probe.run_probe(model, corpus, task, cache_dir=args.cache)
    rows = [[task.kind.value, task.label_fraction, res.accuracy, res.train_size, res.test_size,
             int(res.degenerate), res.checkpoint_id]]
    probe.write_csv(_out_dir(args) / "probe.csv",
                    ("task", "fraction", "accuracy", "train_size", "test_size", "degenerate", "checkpoint"), rows)
    print(f"{task.kind.value} accuracy {res.accuracy:.4f} (train {res.train_size}, test {res.test_size})")
    return 0


def cmd_sweep(args) -> int:
    corpus = _corpus(args)
    fractions = [float(f) for f in args.fractions.split(",")]
    out = _out_dir(args)
    rows = probe.data_efficiency_sweep(args.checkpoint, corpus, fractions, args.seed, out / "sweep.csv",
                                       finetune_epochs=args.finetune_epochs, cache_dir=args.cache)
    series = {}
    for r in rows:
        series.setdefault(r["init"], []).append((r["fraction"], r["finetune_accuracy"]))
    (out / "sweep.svg").write_text(svg_line_chart(series, "Frame-class accuracy vs labeled fraction",
                                                  "label fraction", "accuracy"))
    for r in rows:
        print(f"{r['fraction']:g} {r['init']}: probe {r['probe_accuracy']:.4f} finetune {r['finetune_accuracy']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    run = _run_config(args)
    rows = probe.ablation_suite(_corpus(args), run, _out_dir(args), bank=_bank(args))
    for r in rows:
        print(f"{r['variant']}: frame {r['frame_class']} one-shot {r['one_shot_speaker']} [{r['status']}]")
    return 0 if rows[0]["status"] == "ok" else 2


def cmd_features(args) -> int:
    wave = read_wav(args.wav)
    feats = frame_features(wave, args.kind)
    out = _out_dir(args) / f"features_{args.kind}.csv"
    np.savetxt(out, feats, delimiter=",", fmt="%.9g")
    print(f"{feats.shape[0]} frames x {feats.shape[1]} dims -> {out}")
    return 0


def cmd_maskplan(args) -> int:
    plan = plan_masks(args.frames, args.seed, segment=args.segment, ratio=args.ratio)
    if plan.warning:
        print(f"warning: {plan.warning}", file=sys.stderr)
    for s, e in plan.segments:
        print(f"segment {s} {e}")
    print(f"segments {len(plan.segments)} coverage {100 * plan.coverage:.0f}%")
    if args.save:
        probe.write_csv(_out_dir(args) / "maskplan.csv", ("start", "end"), plan.segments)
    return 0


def cmd_gradcheck(args) -> int:
    if args.scale == "tiny":
        run = build_config("desk", trainer.TINY_OVERRIDES, {"train": {"seed": args.seed}})
        corpus = synth_corpus(SynthSpec(class_count=4, speaker_count=2, utterances_per_speaker=1,
                                        utterance_seconds=1.0, seed=args.seed))
        res = trainer.loss_gradcheck(run, corpus, args.seed, args.coords)
    else:
        res = primitive_gradcheck(args.seed)
    ok = res.passed(args.tol)
    print(f"max relative error {res.max_rel_error:.3e} over {res.checked} coordinates "
          f"({res.skipped} skipped) {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def primitive_gradcheck(seed: int) -> ad.GradCheckResult:
    """Check a composite exercising every primitive at a random point."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 3))
    w = rng.normal(size=(4, 3, 3)) * 0.5
    wt = rng.normal(size=(4, 2, 4)) * 0.5

    def f(t):
        a, b, c = t
        h = ad.conv1d(a, b, stride=2, padding=1)
        h = ad.layer_norm(ad.gelu(h)) + ad.tanh(h) * ad.softmax(h, axis=-1)
        h = ad.conv_transpose1d(h, c, stride=2, padding=1)
        y = ad.sum_(ad.exp(ad.clip(h, -3, 3)) * ad.sqrt(ad.abs_(h) + 1.0))
        y = y + ad.mean(ad.logsumexp(ad.reshape(h, (-1, 2)), axis=1)) - ad.log(ad.sum_(ad.relu(h)) + 1.0)
        z = ad.swapaxes(a, 0, 1)[1:3] @ ad.transpose(ad.take(b, [0, 2], axis=0)[:, :, 0])
        return y + ad.sum_(ad.concat([z, z * z], axis=0) / 3.0) ** 1.0 - ad.sum_(a) ** 2 * 0.01

    return ad.finite_diff_check(f, [x, w, wt], seed=seed)


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgf", description="Multi-granularity self-supervised speech representation learning.",
                     formatter_class=_formatter)
    parser.add_argument("--version", action="version", version=f"mgf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=_formatter)
        return p

    p = add("synth", "write a synthetic labeled corpus (WAVs, labels, manifest)")
    p.add_argument("--classes", type=int, default=8, help="number of frame classes (default 8)")
    p.add_argument("--speakers", type=int, default=8, help="number of speakers (default 8)")
    p.add_argument("--utt", type=int, default=8, help="utterances per speaker (default 8)")
    p.add_argument("--seconds", type=float, default=3.0, help="utterance length in seconds (default 3.0)")
    _common(p, "data")
    p.set_defaults(func=cmd_synth)

    p = add("pretrain", "pretrain an encoder; writes checkpoint.mgf and train_log.csv")
    _data_flag(p)
    _config_flags(p)
    for flag in ("sample", "frame", "phoneme", "sentence"):
        p.add_argument(f"--drop-{flag}", dest=f"drop_{flag}", action="store_true", help=f"disable the {flag} objective")
    p.add_argument("--generative-phoneme", dest="generative_phoneme", action="store_true",
                   help="use the L1 generative phoneme objective instead of InfoNCE")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.mgf if present")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = add("probe", "linear probe on frozen representations; writes probe.csv")
    p.add_argument("--checkpoint", help="checkpoint to probe (default: random initialisation)")
    p.add_argument("--preset", choices=PRESETS, help="encoder preset for the random baseline")
    _data_flag(p)
    p.add_argument("--task", choices=[k.value for k in probe.TaskKind], default="frame_class", help="probe task")
    p.add_argument("--fraction", type=float, default=1.0, help="labeled fraction in (0, 1] (default 1.0)")
    p.add_argument("--cache", help="representation cache directory")
    _common(p)
    p.set_defaults(func=cmd_probe)

    p = add("sweep", "data-efficiency sweep; writes sweep.csv and sweep.svg")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    _data_flag(p)
    p.add_argument("--fractions", default="0.01,0.1,1.0", help="comma-separated label fractions")
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int, default=10,
                   help="epochs of full fine-tuning (default 10)")
    p.add_argument("--cache", help="representation cache directory")
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = add("ablate", "pretrain and probe drop-one variants; writes ablation.csv")
    _data_flag(p)
    _config_flags(p)
    _common(p)
    p.set_defaults(func=cmd_ablate)

    p = add("features", "dump frame features of a WAV file as CSV")
    p.add_argument("--wav", required=True, help="input WAV (PCM16 mono 16 kHz)")
    p.add_argument("--kind", choices=FEATURE_KINDS, default="LPS-25", help="feature kind (default LPS-25)")
    _common(p)
    p.set_defaults(func=cmd_features)

    p = add("maskplan", "print a seeded mask plan")
    p.add_argument("--frames", type=int, default=200, help="number of frames (default 200)")
    p.add_argument("--segment", type=int, default=MASK_FRAMES, help=f"segment length (default {MASK_FRAMES})")
    p.add_argument("--ratio", type=float, default=MASK_RATIO, help=f"coverage budget (default {MASK_RATIO})")
    p.add_argument("--save", action="store_true", help="also write OUT/maskplan.csv")
    _common(p)
    p.set_defaults(func=cmd_maskplan)

    p = add("gradcheck", "finite-difference check of the autodiff gradients")
    p.add_argument("--scale", choices=("tiny", "primitives"), default="tiny",
                   help="tiny: full loss on a tiny model; primitives: every op (default tiny)")
    p.add_argument("--coords", type=int, default=300, help="coordinates sampled for --scale tiny")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error threshold (default 1e-4)")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MGFError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
