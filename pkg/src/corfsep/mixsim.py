"""Corpus indexing, utterance segmentation and N-speaker mixture simulation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audio_io import (
    SAMPLE_RATE,
    ManifestEntry,
    PathLike,
    Waveform,
    dequantize,
    quantize,
    read_wav,
    save_manifest,
    write_wav,
)

log = logging.getLogger(__name__)

PEAK_TARGET = 0.9


class SimulationError(ValueError):
    pass


@dataclass
class CorpusIndex:
    speakers: Dict[str, List[str]]
    split: str = "train"

    def __post_init__(self):
        for spk, utts in self.speakers.items():
            if not utts:
                raise SimulationError(f"speaker {spk!r} has no utterances")

    @property
    def num_utterances(self) -> int:
        return sum(len(u) for u in self.speakers.values())


@dataclass
class MixtureExample:
    mixture: Waveform
    sources: List[Waveform]
    gains_db: List[float]
    speaker_ids: List[str] = field(default_factory=list)
    seed: int = 0

    @property
    def num_speakers(self) -> int:
        return len(self.sources)


def ingest_corpus(root: PathLike, split: str = "train") -> CorpusIndex:
    """Index ``root/<speaker>/**/*.wav`` in sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise SimulationError(f"corpus root {root} is not a directory")
    speakers = {}
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        utts = sorted(str(p) for p in spk_dir.rglob("*.wav"))
        if utts:
            speakers[spk_dir.name] = utts
    if not speakers:
        raise SimulationError(f"no speakers with .wav files under {root}")
    if len(speakers) < 2:
        raise SimulationError(f"need at least 2 speakers, found {len(speakers)} under {root}")
    return CorpusIndex(speakers, split)


def assert_disjoint(*indices: CorpusIndex) -> None:
    seen: Dict[str, str] = {}
    for idx in indices:
        for spk in idx.speakers:
            if spk in seen and seen[spk] != idx.split:
                raise SimulationError(
                    f"speaker {spk!r} appears in both {seen[spk]!r} and {idx.split!r} splits"
                )
            seen[spk] = idx.split


def segment_bounds(n: int, seg: int, hop: int) -> List[Tuple[int, int]]:
    """Window start/stop pairs (stop may exceed ``n``; the tail is zero padded)."""
    min_keep = seg - hop
    if n < min_keep:
        return []
    if n <= seg:
        return [(0, seg)]
    bounds = []
    start = 0
    while start + seg <= n:
        bounds.append((start, start + seg))
        start += hop
    # padded trailing window for the uncovered tail (always >= seg - hop long)
    if bounds[-1][1] < n and n - start >= min_keep:
        bounds.append((start, start + seg))
    return bounds


def segment_utterance(
    w: Waveform, seg_len: float = 4.0, hop: float = 2.0
) -> List[Waveform]:
    """Cut ``w`` into ``seg_len``-second windows with ``hop``-second hop.

    Utterances (and trailing windows) between ``seg_len - hop`` and
    ``seg_len`` seconds are zero padded; anything shorter is dropped.
    """
    if w.rate != SAMPLE_RATE:
        raise SimulationError(f"expected {SAMPLE_RATE} Hz audio, got {w.rate} Hz")
    seg = int(round(seg_len * w.rate))
    hop_n = int(round(hop * w.rate))
    if not 0 < hop_n <= seg:
        raise SimulationError("hop must be in (0, seg_len]")
    out = []
    for a, b in segment_bounds(len(w), seg, hop_n):
        piece = np.zeros(seg)
        chunk = w.samples[a:b]
        piece[: len(chunk)] = chunk
        out.append(Waveform(piece, w.rate))
    return out


def active_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def mix(
    sources: Sequence[Waveform],
    snr_range_db: Tuple[float, float] = (0.0, 5.0),
    rng_seed=None,
    speaker_ids: Optional[Sequence[str]] = None,
    snrs_db: Optional[Sequence[float]] = None,
) -> MixtureExample:
    """Scale sources relative to source 0 and sum them.

    Each source ``i >= 1`` gets ``10*log10(P_0 / P_i)`` equal to an SNR drawn
    uniformly from ``snr_range_db`` (rounded to 0.01 dB so the manifest value
    is exact). ``snrs_db`` bypasses the draw.
    """
    if not sources:
        raise SimulationError("need at least one source")
    lengths = {len(s) for s in sources}
    if len(lengths) != 1:
        raise SimulationError(f"sources differ in length: {sorted(lengths)}")
    powers = [active_power(s.samples) for s in sources]
    if any(p == 0.0 for p in powers):
        raise SimulationError("silent source")
    rng = np.random.default_rng(rng_seed)
    n = len(sources)
    if snrs_db is None:
        lo, hi = snr_range_db
        snrs = [0.0] + [round(float(rng.uniform(lo, hi)), 2) for _ in range(n - 1)]
    else:
        snrs = [float(g) for g in snrs_db]
        if len(snrs) != n:
            raise SimulationError("one SNR value per source required")
    scaled = []
    for i, s in enumerate(sources):
        gain = 1.0 if i == 0 else np.sqrt(powers[0] / (powers[i] * 10.0 ** (snrs[i] / 10.0)))
        scaled.append(s.samples * gain)
    mixture = np.sum(scaled, axis=0)
    peak = float(np.max(np.abs(mixture)))
    if peak > 1.0:
        factor = PEAK_TARGET / peak
        scaled = [x * factor for x in scaled]
        mixture = mixture * factor
    rate = sources[0].rate
    return MixtureExample(
        mixture=Waveform(mixture, rate),
        sources=[Waveform(x, rate) for x in scaled],
        gains_db=snrs,
        speaker_ids=list(speaker_ids) if speaker_ids is not None else [str(i) for i in range(n)],
        seed=0 if rng_seed is None else int(rng_seed),
    )


def sub_seed(seed: int, k: int) -> int:
    """Per-example seed, independent of generation order."""
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _draw_example(
    index: CorpusIndex, n_speakers: int, seed: int, max_seconds: Optional[float]
) -> MixtureExample:
    rng = np.random.default_rng(seed)
    names = sorted(index.speakers)
    picked = [names[i] for i in rng.choice(len(names), size=n_speakers, replace=False)]
    waves = []
    for spk in picked:
        utts = index.speakers[spk]
        waves.append(read_wav(utts[int(rng.integers(len(utts)))]))
    # truncate to the shortest utterance
    length = min(len(w) for w in waves)
    if max_seconds is not None:
        length = min(length, int(round(max_seconds * waves[0].rate)))
    waves = [Waveform(w.samples[:length], w.rate) for w in waves]
    example = mix(waves, rng_seed=int(rng.integers(2**31)), speaker_ids=picked)
    example.seed = seed
    return example


def _quantized(example: MixtureExample) -> MixtureExample:
    # sources are snapped to the 16-bit grid first so the stored mixture is
    # exactly the sum of the stored sources
    codes = [quantize(s.samples).astype(np.int64) for s in example.sources]
    total = np.clip(np.sum(codes, axis=0), -32768, 32767)
    rate = example.mixture.rate
    return MixtureExample(
        mixture=Waveform(dequantize(total), rate),
        sources=[Waveform(dequantize(c), rate) for c in codes],
        gains_db=example.gains_db,
        speaker_ids=example.speaker_ids,
        seed=example.seed,
    )


def build_dataset(
    index: CorpusIndex,
    n_speakers: int,
    count: int,
    seed: int,
    out_dir: PathLike,
    max_seconds: Optional[float] = None,
    workers: int = 1,
    manifest_name: Optional[str] = None,
) -> Path:
    """Write ``count`` simulated mixtures plus a manifest under ``out_dir``.

    Example ``k`` is generated from ``sub_seed(seed, k)`` so the output does
    not depend on ``workers``. Returns the manifest path.
    """
    if n_speakers < 1:
        raise SimulationError("n_speakers must be >= 1")
    if len(index.speakers) < n_speakers:
        raise SimulationError(
            f"corpus has {len(index.speakers)} speakers, {n_speakers} requested"
        )
    out_dir = Path(out_dir)
    for sub in ["mix", *(f"s{i + 1}" for i in range(n_speakers))]:
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    def job(k: int) -> ManifestEntry:
        ex = _quantized(_draw_example(index, n_speakers, sub_seed(seed, k), max_seconds))
        name = f"{k:06d}.wav"
        mix_path = out_dir / "mix" / name
        write_wav(mix_path, ex.mixture)
        src_paths = []
        for i, s in enumerate(ex.sources):
            p = out_dir / f"s{i + 1}" / name
            write_wav(p, s)
            src_paths.append(str(p))
        return ManifestEntry(str(mix_path), src_paths, ex.speaker_ids, ex.gains_db, ex.seed)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            entries = list(pool.map(job, range(count)))
    else:
        entries = [job(k) for k in range(count)]
    manifest = out_dir / (manifest_name or f"{index.split}_{n_speakers}mix.tsv")
    save_manifest(manifest, entries)
    log.info("wrote %d %d-speaker mixtures to %s", count, n_speakers, manifest)
    return manifest
