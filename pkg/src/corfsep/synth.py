"""Synthetic voiced-speech corpus for desk-scale experiments.

Each speaker is a mean pitch plus a small vowel inventory (formant
triples). An utterance is a chain of syllables: a gliding harmonic source
shaped by the vowel's formant envelope under a raised-cosine amplitude
envelope, with short pauses in between. The output directory layout
(``<root>/<speaker>/<utt>.wav``) is what :func:`mixsim.ingest_corpus` reads.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Tuple

import numpy as np

from .audio_io import SAMPLE_RATE, PathLike, Waveform, write_wav


F0_RANGE = (80.0, 400.0)


def _speaker_profile(rng: np.random.Generator, f0: float) -> dict:
    vowels = []
    for _ in range(4):
        f1 = rng.uniform(300.0, 850.0)
        f2 = rng.uniform(900.0, 2300.0)
        f3 = rng.uniform(2400.0, 3300.0)
        vowels.append((f1, f2, f3))
    return {
        "f0": f0,
        "vowels": np.array(vowels),
        "tilt": float(rng.uniform(0.6, 1.2)),
        "rate": float(rng.uniform(3.0, 6.0)),
    }


def _formant_gain(freqs: np.ndarray, formants: np.ndarray, bandwidth: float = 120.0) -> np.ndarray:
    gain = np.zeros_like(freqs)
    for i, fc in enumerate(formants):
        gain += (0.7**i) / (1.0 + ((freqs - fc) / bandwidth) ** 2)
    return gain


def synth_utterance(
    profile: dict, duration: float, rng: np.random.Generator, rate: int = SAMPLE_RATE
) -> np.ndarray:
    n = int(round(duration * rate))
    out = np.zeros(n)
    pos = 0
    while pos < n:
        syl = int(rate / profile["rate"] * rng.uniform(0.7, 1.3))
        syl = min(syl, n - pos)
        if syl < 16:
            break
        t = np.arange(syl) / rate
        f0_start = profile["f0"] * rng.uniform(0.96, 1.04)
        f0_end = f0_start * rng.uniform(0.95, 1.05)
        f0 = np.linspace(f0_start, f0_end, syl)
        f0 = f0 * (1.0 + 0.01 * np.sin(2 * np.pi * 5.5 * t))
        phase = 2 * np.pi * np.cumsum(f0) / rate + rng.uniform(0, 2 * np.pi)
        formants = profile["vowels"][rng.integers(len(profile["vowels"]))]
        sig = np.zeros(syl)
        for k in range(1, int(3600.0 / f0.max()) + 1):
            amp = _formant_gain(k * f0, formants) / k ** profile["tilt"]
            sig += amp * np.sin(k * phase)
        env = np.sin(np.pi * np.arange(syl) / syl) ** 2
        out[pos : pos + syl] = sig * env
        pos += syl + int(rng.uniform(0.0, 0.08) * rate)
    out += 0.003 * rng.standard_normal(n)
    return 0.3 * out / (np.max(np.abs(out)) + 1e-12)


def make_corpus(
    root: PathLike,
    num_speakers: int,
    utts_per_speaker: int,
    duration: Tuple[float, float] | float,
    seed: int = 0,
    prefix: str = "spk",
) -> List[str]:
    """Write a synthetic corpus; returns the speaker ids.

    Mean pitches sit on a log grid over ``F0_RANGE`` (shuffled, lightly
    jittered) so that no two speakers share a pitch.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    if isinstance(duration, (int, float)):
        duration = (float(duration), float(duration))
    f0s = np.geomspace(*F0_RANGE, num_speakers)[rng.permutation(num_speakers)]
    f0s *= rng.uniform(0.97, 1.03, num_speakers)
    ids = []
    for s in range(num_speakers):
        spk = f"{prefix}{s:03d}"
        ids.append(spk)
        profile = _speaker_profile(rng, float(f0s[s]))
        (root / spk).mkdir(parents=True, exist_ok=True)
        for u in range(utts_per_speaker):
            dur = float(rng.uniform(*duration))
            x = synth_utterance(profile, dur, rng)
            write_wav(root / spk / f"{spk}_{u:03d}.wav", Waveform(x))
    return ids
