"""End-to-end acceptance checks, one test per criterion.

Each test prints ``criterion N: PASS|FAIL ...``; the lines are gathered and
repeated in the pytest terminal summary.  Criteria 4 to 7 share one set of
desk-preset pretraining runs (three seeds on the default synthetic corpus),
built once per session.  Expect well over an hour on a single core.
"""

from __future__ import annotations

import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from test_autodiff import PRIMITIVES
from mgf import autodiff as ad
from mgf import cli, dsp, objectives as obj, probe, trainer
from mgf.config import build_config
from mgf.corpus import NoiseBank, SynthSpec, synth_corpus

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
VARIANTS = {
    "full": {},
    "drop_phoneme": {"drop_phoneme": True},
    "drop_sentence": {"drop_sentence": True},
    "generative_phoneme": {"generative_phoneme": True},
}
RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1 --------------------------------------------------------------------------

def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    prim = cli.primitive_gradcheck(seed=0)
    each = {}
    for name, (f, shapes) in PRIMITIVES.items():
        r = np.random.default_rng(len(name))
        arrays = [r.normal(size=s) for s in shapes]
        each[name] = ad.finite_diff_check(f, arrays).max_rel_error
    corpus = synth_corpus(SynthSpec(class_count=4, speaker_count=2, utterances_per_speaker=1, utterance_seconds=1.0))
    run = build_config("desk", trainer.TINY_OVERRIDES)
    full = trainer.loss_gradcheck(run, corpus, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(prim.max_rel_error, full.max_rel_error, *each.values())
    ok = prim.checked > 0 and full.checked > 0 and worst < 1e-4 and elapsed < 120
    report(1, ok, f"{len(each)} primitives <= {max(each.values()):.2e}, composite {prim.max_rel_error:.2e}, "
                  f"tiny model {full.max_rel_error:.2e} "
                  f"over {full.checked} coords ({full.skipped} skipped), {elapsed:.0f}s")


# -- 2 --------------------------------------------------------------------------

def test_criterion_2_loss_identities():
    k, n = 32, 3
    v = np.full((4, 8), 0.3)
    nce = obj.loss_phoneme(v, v, np.full((4, k, 8), 0.3)).item()
    nt = obj.loss_sentence(np.full((2 * n, 5), 0.2)).item()
    u = {"MFCC-25": np.random.default_rng(0).normal(size=(1, 7, 13))}
    frame = obj.loss_frame(obj.FeatureTargets(u, {"MFCC-25": ad.constant(u["MFCC-25"])}), np.ones((1, 7))).item()
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(2, 800))
    sdr = [obj.loss_sample(x, c * y).item() for c in (1.0, 3.7, -0.02, 1e4)]
    parts = {"sample": -12.5, "frame": 3.25, "phoneme": 0.75, "sentence": 1.5}
    lam = obj.LossWeights(0.1, 1.0, 0.3, 0.03)
    total, rep = obj.total_loss(parts, lam)
    linear = sum(a * parts[name] for name, a in zip(obj.LOSS_NAMES, lam.as_tuple()))
    checks = {
        "InfoNCE ln(K+1)": abs(nce - math.log(k + 1)) <= 1e-9,
        "NT-Xent ln(2N-1)": abs(nt - math.log(2 * n - 1)) <= 1e-9,
        "frame zero": frame == 0.0,
        "SI-SDR scale invariance": max(sdr) - min(sdr) <= 1e-6,
        "total linearity": abs(total.item() - linear) <= 1e-12 and abs(rep.total - linear) <= 1e-12,
    }
    bad = [name for name, ok in checks.items() if not ok]
    report(2, not bad, f"{len(checks) - len(bad)}/{len(checks)} identities hold" + (f"; failed {bad}" if bad else ""))


# -- 3 --------------------------------------------------------------------------

def test_criterion_3_mask_plans():
    failures = 0
    for seed in range(10_000):
        n = 14 + (seed * 7919) % 600
        plan = obj.plan_masks(n, seed)
        segs = plan.segments
        ok = all(e - s == 14 for s, e in segs)
        ok &= all(a[1] <= b[0] for a, b in zip(segs, segs[1:]))
        ok &= plan.coverage <= 0.20 + 1e-12
        ok &= plan == obj.plan_masks(n, seed)
        ok &= len(obj.plan_masks(200, seed).segments) == 2
        failures += not ok
    report(3, failures == 0, f"{10_000 - failures}/10000 seeded plans satisfy all properties")


# -- shared desk-scale runs for 4 to 7 ----------------------------------------

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    corpus = synth_corpus(SynthSpec())
    bank = NoiseBank.synthetic_bank()
    res = {"corpus": corpus, "timing": {}, "scores": {}, "models": {}}
    for seed in SEEDS:
        for name, flags in VARIANTS.items():
            t0 = time.perf_counter()
            run = build_config("desk", {"train": {"seed": seed, **flags}})
            ck = trainer.pretrain(corpus, run, out / f"{name}_{seed}", bank=bank)
            model = probe.load_model(ck)
            reps = probe.extract_representations(model, corpus)
            frame = probe.run_probe(model, corpus, probe.ProbeTask("frame_class", 1.0, seed), reps=reps).accuracy
            shot = probe.one_shot_accuracy(model, corpus, seed, reps=reps)
            res["scores"][name, seed] = {"frame": frame, "one_shot": shot}
            res["timing"][name, seed] = time.perf_counter() - t0
            if name == "full":
                res["models"][seed] = model
        t0 = time.perf_counter()
        rand = probe.random_model(res["models"][seed].encoder, seed)
        frame = probe.run_probe(rand, corpus, probe.ProbeTask("frame_class", 1.0, seed)).accuracy
        res["scores"]["random", seed] = {"frame": frame}
        res["timing"]["random", seed] = time.perf_counter() - t0
    for (name, seed), s in sorted(res["scores"].items()):
        print(f"{name:>18} seed {seed}: " + ", ".join(f"{k} {v:.3f}" for k, v in s.items()))
    return res


def test_criterion_4_pretraining_benefit(desk):
    gaps = [desk["scores"]["full", s]["frame"] - desk["scores"]["random", s]["frame"] for s in SEEDS]
    elapsed = sum(desk["timing"][name, s] for name in ("full", "random") for s in SEEDS)
    gap = statistics.median(gaps)
    report(4, gap >= 0.10 and elapsed < 1800,
           f"median frame-class gain {100 * gap:.1f} points (per seed "
           + ", ".join(f"{100 * g:.1f}" for g in gaps) + f"), {elapsed / 60:.1f} min")


def test_criterion_5_ablation_directions(desk):
    sc = desk["scores"]
    phon = sum(sc["drop_phoneme", s]["frame"] < sc["full", s]["frame"] for s in SEEDS)
    sent = sum(sc["drop_sentence", s]["one_shot"] < sc["full", s]["one_shot"] for s in SEEDS)
    report(5, phon >= 2 and sent >= 2,
           f"drop_phoneme lowers frame-class in {phon}/3 seeds, drop_sentence lowers one-shot speaker in {sent}/3")


def test_criterion_6_discriminative_vs_generative(desk):
    sc = desk["scores"]
    nce = statistics.median(sc["full", s]["frame"] for s in SEEDS)
    gen = statistics.median(sc["generative_phoneme", s]["frame"] for s in SEEDS)
    report(6, nce >= gen, f"median frame-class InfoNCE {nce:.3f} vs L1 generative {gen:.3f}")


def test_criterion_7_data_efficiency(desk):
    wins, detail = 0, []
    for s in SEEDS:
        rows = probe.data_efficiency_sweep(desk["models"][s], desk["corpus"], [0.1], seed=s)
        acc = {r["init"]: r["finetune_accuracy"] for r in rows}
        wins += acc["pretrained"] > acc["scratch"]
        detail.append(f"{acc['pretrained']:.3f}/{acc['scratch']:.3f}")
    report(7, wins >= 2, f"pretrained beats scratch at 10% labels in {wins}/3 seeds "
                         f"(fine-tune pretrained/scratch: {', '.join(detail)})")


# -- 8 --------------------------------------------------------------------------

def test_criterion_8_dsp_oracles():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        frame = rng.normal(size=400)
        fast = dsp.power_spectrum(dsp.FrameGrid(frame[None], dsp.HOP, 400), 512)[0]
        slow = np.array(oracles.dft_power(frame.tolist(), 512))
        worst = max(worst, float(np.max(np.abs(fast - slow) / np.maximum(np.abs(slow), 1e-300))))
    d = dsp.dct_matrix(dsp.N_MELS)
    ortho = float(np.max(np.abs(d @ d.T - np.eye(dsp.N_MELS))))
    hand = dsp.si_sdr([1.0, 0.0], [1.0, 1.0])
    ok = worst < 1e-6 and ortho < 1e-9 and hand == 0.0
    report(8, ok, f"LPS vs DFT {worst:.1e}, DCT orthonormality {ortho:.1e}, SI-SDR hand case {hand!r} dB")


# -- 9 --------------------------------------------------------------------------

def test_criterion_9_reproducibility(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = cli.run(["pretrain", "--seed", "5", "--epochs", "2", "--crop-seconds", "1.0",
                        "--config", str(_small_config(tmp_path)), "--out", str(out)])
        assert code == 0
        outs.append(out)
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
               for n in (trainer.LOG_NAME, trainer.CHECKPOINT_NAME))
    report(9, same, "training log and checkpoint byte-identical across two runs" if same else "outputs differ")


def _small_config(tmp_path: Path) -> Path:
    path = tmp_path / "small.json"
    path.write_text('{"encoder": {"stem_channels": 16, "d_model": 16, "heads": 2}}')
    return path
