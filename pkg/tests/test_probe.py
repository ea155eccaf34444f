import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgf import probe, trainer
from mgf.config import build_config
from mgf.corpus import SynthSpec, synth_corpus
from mgf.errors import ValidationError

ENC = build_config("desk", trainer.TINY_OVERRIDES).encoder


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(SynthSpec(class_count=4, speaker_count=4, utterances_per_speaker=4,
                                  utterance_seconds=0.5, seed=7))


@pytest.fixture(scope="module")
def model():
    return probe.random_model(ENC, seed=2)


def test_one_hot_features_are_probed_almost_perfectly():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 5, size=1500)
    x = np.eye(5)[y] + 0.05 * rng.standard_normal((y.size, 5))
    res = probe.train_linear_probe(x, y, probe.ProbeTask(seed=1), n_classes=5)
    assert res.accuracy >= 0.99
    assert res.train_size + res.test_size == y.size and res.test_size == 300


def test_uninformative_features_score_at_chance():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 4, size=4000)
    x = rng.standard_normal((y.size, 6))
    res = probe.train_linear_probe(x, y, probe.ProbeTask(seed=0), n_classes=4)
    # 800 test rows: 4 binomial standard deviations around 1/4
    assert abs(res.accuracy - 0.25) < 4 * math.sqrt(0.25 * 0.75 / 800)


def test_degenerate_labels():
    x = np.ones((10, 2))
    res = probe.train_linear_probe(x, np.zeros(10, dtype=int), probe.ProbeTask())
    assert res.degenerate and res.accuracy == 1.0
    with pytest.raises(ValidationError, match="degenerate"):
        probe.train_linear_probe(x, np.zeros(10, dtype=int), probe.ProbeTask(),
                                 held_out=(np.ones((2, 2)), np.array([0, 1])))


def test_probe_input_validation():
    with pytest.raises(ValidationError, match="aligned"):
        probe.train_linear_probe(np.ones((4, 2)), np.zeros(3), probe.ProbeTask())
    with pytest.raises(ValidationError, match="label_fraction"):
        probe.ProbeTask(label_fraction=0.0)
    with pytest.raises(ValidationError, match="outside"):
        probe.ProbeResult(1.5, {}, 1, 1)


def test_one_shot_split_sizes(corpus):
    train, test = probe.one_shot_split(corpus, seed=0)
    assert len(train) == 4 and len(test) == 4
    assert sorted(u.speaker_id for u in train) == [0, 1, 2, 3]
    assert not {u.id for u in train} & {u.id for u in test}


def test_one_shot_split_skips_single_utterance_speakers(corpus):
    utts = [u for u in corpus.utterances if u.speaker_id != 0 or u.id.endswith("utt000")]
    with pytest.warns(UserWarning, match="speaker 0"):
        train, _ = probe.one_shot_split(utts, seed=0)
    assert 0 not in {u.speaker_id for u in train}


def test_holdout_split_per_speaker(corpus):
    train, test = probe.holdout_split(corpus, seed=4)
    assert len(test) == 4 and len(train) == 12
    assert sorted(u.speaker_id for u in test) == [0, 1, 2, 3]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=8, max_size=200), st.floats(0.05, 1.0), st.integers(0, 99))
def test_stratified_subsample_keeps_class_proportions(labels, fraction, seed):
    labels = np.array(labels)
    counts = np.bincount(labels, minlength=4)
    if any(c and round(fraction * c) == 0 for c in counts) and fraction < 1.0:
        with pytest.raises(ValidationError):
            probe.stratified_subsample(labels, fraction, seed)
        return
    idx = probe.stratified_subsample(labels, fraction, seed)
    assert np.all(np.diff(idx) > 0)
    kept = np.bincount(labels[idx], minlength=4)
    expected = counts if fraction >= 1.0 else np.array([round(fraction * c) for c in counts])
    assert np.array_equal(kept, expected)


def test_representation_shapes(corpus, model):
    reps = probe.extract_representations(model, corpus)
    assert list(reps) == [u.id for u in corpus]
    for u in corpus:
        assert reps[u.id].shape == (u.frame_labels.size, ENC.d_model)


def test_representation_cache_is_bit_identical(tmp_path, corpus, model):
    first = probe.extract_representations(model, corpus.utterances[:3], cache_dir=tmp_path)
    files = sorted((tmp_path / model.id).glob("*.arr"))
    assert len(files) == 3
    again = probe.extract_representations(model, corpus.utterances[:3], cache_dir=tmp_path)
    for k in first:
        assert first[k].tobytes() == again[k].tobytes()


def test_arr_file_round_trip_and_guards(tmp_path):
    a = np.arange(12.0).reshape(3, 4) / 7
    probe.write_arr(tmp_path / "a.arr", a)
    assert np.array_equal(probe.read_arr(tmp_path / "a.arr"), a)
    raw = (tmp_path / "a.arr").read_bytes()
    (tmp_path / "b.arr").write_bytes(raw[:-3])
    with pytest.raises(ValidationError, match="truncated"):
        probe.read_arr(tmp_path / "b.arr")
    (tmp_path / "c.arr").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValidationError, match="not an array"):
        probe.read_arr(tmp_path / "c.arr")


def test_probing_leaves_parameters_frozen(corpus, model):
    before = {k: v.copy() for k, v in model.params.items()}
    probe.run_probe(model, corpus, probe.ProbeTask(probe.TaskKind.FRAME_CLASS, 0.5, 0))
    probe.run_probe(model, corpus, probe.ProbeTask(probe.TaskKind.SPEAKER, 1.0, 0))
    for k, v in before.items():
        assert np.array_equal(model.params[k], v)


def test_random_model_id_is_deterministic():
    assert probe.random_model(ENC, 5).id == probe.random_model(ENC, 5).id
    assert probe.random_model(ENC, 5).id != probe.random_model(ENC, 6).id


def test_sweep_rows_and_csv(tmp_path, corpus, model):
    out = tmp_path / "sweep.csv"
    rows = probe.data_efficiency_sweep(model, corpus, [0.5, 1.0], seed=0, out_path=out, finetune_epochs=1)
    assert [(r["fraction"], r["init"]) for r in rows] == [
        (0.5, "pretrained"), (0.5, "scratch"), (1.0, "pretrained"), (1.0, "scratch")]
    for r in rows:
        assert 0.0 <= r["probe_accuracy"] <= 1.0 and 0.0 <= r["finetune_accuracy"] <= 1.0
    assert rows[0]["train_frames"] < rows[2]["train_frames"]
    with open(out, newline="") as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == probe.SWEEP_HEADER and len(table) == 5
    with pytest.raises(ValidationError, match="outside"):
        probe.data_efficiency_sweep(model, corpus, [1.5])
