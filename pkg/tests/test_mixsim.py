import numpy as np
import pytest

from corfsep.audio_io import Waveform, load_entry_audio, load_manifest, write_wav
from corfsep.mixsim import (
    CorpusIndex,
    SimulationError,
    active_power,
    assert_disjoint,
    build_dataset,
    ingest_corpus,
    mix,
    segment_utterance,
)
from corfsep.synth import make_corpus

SR = 8000


def ramp(seconds):
    n = int(seconds * SR)
    return Waveform(np.linspace(-0.5, 0.5, n))


def test_segment_six_seconds():
    w = ramp(6)
    segs = segment_utterance(w)
    assert len(segs) == 2
    np.testing.assert_array_equal(segs[0].samples, w.samples[:32000])
    np.testing.assert_array_equal(segs[1].samples, w.samples[16000:48000])


def test_segment_three_seconds_padded():
    w = ramp(3)
    (seg,) = segment_utterance(w)
    assert len(seg) == 32000
    np.testing.assert_array_equal(seg.samples[:24000], w.samples)
    assert np.all(seg.samples[24000:] == 0)


def test_segment_short_discarded():
    assert segment_utterance(ramp(1.5)) == []


def test_segment_boundaries():
    assert len(segment_utterance(ramp(2))) == 1
    assert len(segment_utterance(ramp(4))) == 1
    # 7 s: windows at 0, 2 and a padded one at 4 s
    segs = segment_utterance(ramp(7))
    assert len(segs) == 3
    assert np.all(segs[2].samples[24000:] == 0)


def test_segment_wrong_rate():
    with pytest.raises(SimulationError):
        segment_utterance(Waveform(np.zeros(40000), 16000))


@pytest.mark.parametrize("seconds", [2.0, 3.3, 4.0, 5.5, 6.0, 7.9, 10.25])
def test_segments_reconstruct(seconds):
    w = Waveform(np.random.default_rng(0).standard_normal(int(seconds * SR)))
    segs = segment_utterance(w)
    hop = 16000
    pieces = [segs[0].samples] + [s.samples[-hop:] for s in segs[1:]]
    rebuilt = np.concatenate(pieces)[: len(w)]
    np.testing.assert_array_equal(rebuilt, w.samples)


def unit_power(rng, n=4000):
    x = rng.standard_normal(n)
    return Waveform(0.1 * x / np.sqrt(np.mean(x**2)))


def test_mix_zero_db_unit_gain():
    rng = np.random.default_rng(0)
    a, b = unit_power(rng), unit_power(rng)
    ex = mix([a, b], snrs_db=[0.0, 0.0])
    np.testing.assert_allclose(ex.sources[1].samples, b.samples, rtol=1e-12)
    ratio = 10 * np.log10(active_power(ex.sources[0].samples) / active_power(ex.sources[1].samples))
    assert abs(ratio) <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_mix_snr_and_sum(seed):
    rng = np.random.default_rng(seed)
    srcs = [Waveform(rng.uniform(0.1, 2.0) * rng.standard_normal(3000) * 0.05) for _ in range(4)]
    ex = mix(srcs, rng_seed=seed)
    for i in range(1, 4):
        measured = 10 * np.log10(active_power(ex.sources[0].samples) / active_power(ex.sources[i].samples))
        assert abs(measured - ex.gains_db[i]) <= 0.01
        assert 0.0 <= ex.gains_db[i] <= 5.0
    total = np.sum([s.samples for s in ex.sources], axis=0)
    assert np.linalg.norm(total - ex.mixture.samples) <= 1e-6 * np.linalg.norm(total)


def test_mix_peak_rescale():
    rng = np.random.default_rng(1)
    srcs = [Waveform(0.9 * np.sign(rng.standard_normal(1000))) for _ in range(3)]
    ex = mix(srcs, rng_seed=0)
    assert np.max(np.abs(ex.mixture.samples)) == pytest.approx(0.9)
    for i in range(1, 3):
        measured = 10 * np.log10(active_power(ex.sources[0].samples) / active_power(ex.sources[i].samples))
        assert abs(measured - ex.gains_db[i]) <= 0.01


def test_mix_single_source():
    w = unit_power(np.random.default_rng(2))
    ex = mix([w], rng_seed=0)
    np.testing.assert_array_equal(ex.mixture.samples, w.samples)


def test_mix_errors():
    with pytest.raises(SimulationError):
        mix([Waveform(np.zeros(10)), Waveform(np.ones(10))])
    with pytest.raises(SimulationError):
        mix([Waveform(np.ones(10)), Waveform(np.ones(11))])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    make_corpus(root / "train", 4, 3, 0.3, seed=0, prefix="tr")
    make_corpus(root / "test", 3, 2, 0.3, seed=1, prefix="te")
    return root


def test_ingest(tmp_path):
    for spk, n in [("A", 2), ("B", 3)]:
        (tmp_path / spk).mkdir()
        for k in range(n):
            write_wav(tmp_path / spk / f"{k}.wav", Waveform(np.zeros(10)))
    idx = ingest_corpus(tmp_path)
    assert sorted(idx.speakers) == ["A", "B"]
    assert idx.num_utterances == 5
    assert ingest_corpus(tmp_path) == idx


def test_ingest_errors(tmp_path):
    with pytest.raises(SimulationError):
        ingest_corpus(tmp_path)
    (tmp_path / "A").mkdir()
    write_wav(tmp_path / "A" / "x.wav", Waveform(np.zeros(10)))
    with pytest.raises(SimulationError, match="at least 2"):
        ingest_corpus(tmp_path)


def test_disjoint_splits(corpus):
    tr = ingest_corpus(corpus / "train", "train")
    te = ingest_corpus(corpus / "test", "test")
    assert_disjoint(tr, te)
    clash = CorpusIndex({"tr000": ["x.wav"]}, "test")
    with pytest.raises(SimulationError):
        assert_disjoint(tr, clash)


def test_build_dataset(corpus, tmp_path):
    idx = ingest_corpus(corpus / "train")
    man = build_dataset(idx, 3, 10, seed=7, out_dir=tmp_path / "a")
    entries = load_manifest(man)
    assert len(entries) == 10
    for e in entries:
        assert len(e.source_paths) == 3
        assert len(set(e.speaker_ids)) == 3
        mixture, sources = load_entry_audio(e)
        total = np.sum([s.samples for s in sources], axis=0)
        np.testing.assert_allclose(total, mixture.samples, rtol=0, atol=1e-12)
        for i in range(1, 3):
            measured = 10 * np.log10(active_power(sources[0].samples) / active_power(sources[i].samples))
            assert abs(measured - e.gains_db[i]) <= 0.01


def test_build_dataset_deterministic(corpus, tmp_path):
    idx = ingest_corpus(corpus / "train")
    a = build_dataset(idx, 2, 6, seed=3, out_dir=tmp_path / "a", manifest_name="m.tsv")
    b = build_dataset(idx, 2, 6, seed=3, out_dir=tmp_path / "b", manifest_name="m.tsv", workers=3)
    assert a.read_bytes() == b.read_bytes()
    for ea, eb in zip(load_manifest(a), load_manifest(b)):
        assert open(ea.mixture_path, "rb").read() == open(eb.mixture_path, "rb").read()


def test_build_dataset_too_few_speakers(corpus, tmp_path):
    idx = ingest_corpus(corpus / "train")
    with pytest.raises(SimulationError):
        build_dataset(idx, 5, 1, seed=0, out_dir=tmp_path)
