import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from corfsep.audio_io import (
    ChannelCountError,
    InvalidWaveformError,
    ManifestEntry,
    ManifestError,
    MissingAudioFileError,
    UnsupportedEncodingError,
    Waveform,
    load_manifest,
    read_wav,
    save_manifest,
    write_wav,
)


def test_one_second_file(tmp_path):
    p = tmp_path / "a.wav"
    write_wav(p, Waveform(np.zeros(8000), 8000))
    w = read_wav(p)
    assert len(w) == 8000
    assert w.rate == 8000
    assert np.all(w.samples == 0)


def test_clipping_to_max_code(tmp_path):
    p = tmp_path / "c.wav"
    write_wav(p, Waveform(np.array([1.5, -1.5, 0.0])))
    with wave.open(str(p), "rb") as wf:
        codes = np.frombuffer(wf.readframes(3), dtype="<i2")
    assert codes.tolist() == [32767, -32768, 0]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 400), elements=st.floats(-1.0, 1.0 - 2**-15)))
def test_wav_round_trip(tmp_path_factory, x):
    p = tmp_path_factory.mktemp("wav") / "r.wav"
    write_wav(p, Waveform(x))
    back = read_wav(p)
    assert back.rate == 8000
    assert np.max(np.abs(back.samples - x)) <= 2**-15


def test_stereo_rejected(tmp_path):
    p = tmp_path / "s.wav"
    with wave.open(str(p), "wb") as wf:
        wf.setnchannels(2)
        wf.setsampwidth(2)
        wf.setframerate(8000)
        wf.writeframes(np.zeros(20, dtype="<i2").tobytes())
    with pytest.raises(ChannelCountError):
        read_wav(p)


def test_8bit_rejected(tmp_path):
    p = tmp_path / "b.wav"
    with wave.open(str(p), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(1)
        wf.setframerate(8000)
        wf.writeframes(bytes(10))
    with pytest.raises(UnsupportedEncodingError):
        read_wav(p)


def test_missing_file(tmp_path):
    with pytest.raises(MissingAudioFileError):
        read_wav(tmp_path / "nope.wav")


def test_nan_rejected():
    with pytest.raises(InvalidWaveformError):
        Waveform(np.array([0.0, np.nan]))


def _entry(tmp_path, k, n=2):
    return ManifestEntry(
        mixture_path=str(tmp_path / "mix" / f"{k}.wav"),
        source_paths=[str(tmp_path / f"s{i}" / f"{k}.wav") for i in range(n)],
        speaker_ids=[f"spk{i}" for i in range(n)],
        gains_db=[0.0] + [1.25 * i for i in range(1, n)],
        seed=k,
    )


def test_manifest_round_trip(tmp_path):
    entries = [_entry(tmp_path, k, n) for k, n in enumerate([2, 3, 1])]
    p = tmp_path / "m.tsv"
    save_manifest(p, entries)
    assert load_manifest(p) == entries
    # paths are stored relative to the manifest
    assert str(tmp_path) not in p.read_text()


def test_manifest_single_entry(tmp_path):
    p = tmp_path / "m.tsv"
    save_manifest(p, [_entry(tmp_path, 0)])
    loaded = load_manifest(p)
    assert len(loaded) == 1
    assert len(loaded[0].source_paths) == 2


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("")
    assert load_manifest(p) == []


def test_count_mismatch():
    with pytest.raises(ManifestError):
        ManifestEntry("m.wav", ["a.wav", "b.wav", "c.wav"], ["a", "b", "c"], [0.0, 1.0], 0)


def test_duplicate_speakers():
    with pytest.raises(ManifestError):
        ManifestEntry("m.wav", ["a.wav", "b.wav"], ["a", "a"], [0.0, 1.0], 0)


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "m.tsv"
    good = "mix/0.wav\ta.wav;b.wav\tx;y\t0.00;1.00\t3\n"
    p.write_text(good + "mix/1.wav\ta.wav;b.wav\tx;y;z\t0.00;1.00\t3\n")
    with pytest.raises(ManifestError) as err:
        load_manifest(p)
    assert err.value.line == 2
    p.write_text(good + "only\ttwo\n")
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(p)


def test_dangling_paths_not_checked(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("missing.wav\tnone.wav\ta\t0.00\t0\n")
    assert load_manifest(p)[0].mixture_path == str(tmp_path / "missing.wav")
