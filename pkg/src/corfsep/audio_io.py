"""Waveform container, 16-bit WAV I/O and tab-separated dataset manifests."""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

PathLike = Union[str, Path]

SAMPLE_RATE = 8000
_PCM_SCALE = 32768.0
_PCM_MAX = 32767


class AudioError(Exception):
    """Base class for audio I/O failures."""


class MissingAudioFileError(AudioError, FileNotFoundError):
    pass


class ChannelCountError(AudioError, ValueError):
    pass


class UnsupportedEncodingError(AudioError, ValueError):
    pass


class InvalidWaveformError(AudioError, ValueError):
    pass


class ManifestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(eq=False)
class Waveform:
    """Mono signal with amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.rate <= 0:
            raise InvalidWaveformError(f"sample rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidWaveformError("waveform contains NaN or Inf")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.rate

    def __eq__(self, other) -> bool:
        if not isinstance(other, Waveform):
            return NotImplemented
        return self.rate == other.rate and np.array_equal(self.samples, other.samples)


def quantize(samples: np.ndarray) -> np.ndarray:
    """Map float samples to int16 codes, clipping to [-1, 1)."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, _PCM_MAX / _PCM_SCALE)
    return np.round(x * _PCM_SCALE).astype(np.int16)


def dequantize(codes: np.ndarray) -> np.ndarray:
    return codes.astype(np.float64) / _PCM_SCALE


def read_wav(path: PathLike) -> Waveform:
    path = Path(path)
    if not path.is_file():
        raise MissingAudioFileError(f"no such audio file: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise UnsupportedEncodingError(f"{path}: {exc}") from exc
    if channels != 1:
        raise ChannelCountError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    codes = np.frombuffer(raw, dtype="<i2")
    return Waveform(dequantize(codes), rate)


def write_wav(path: PathLike, w: Waveform) -> None:
    if not np.all(np.isfinite(w.samples)):
        raise InvalidWaveformError("refusing to write NaN/Inf samples")
    codes = quantize(w.samples)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(w.rate))
        wf.writeframes(codes.astype("<i2").tobytes())


@dataclass
class ManifestEntry:
    mixture_path: str
    source_paths: List[str]
    speaker_ids: List[str]
    gains_db: List[float]
    seed: int = 0

    def __post_init__(self):
        n = len(self.source_paths)
        if n < 1:
            raise ManifestError("entry needs at least one source")
        if len(self.speaker_ids) != n or len(self.gains_db) != n:
            raise ManifestError(
                f"field count mismatch: {n} sources, {len(self.speaker_ids)} speaker ids, "
                f"{len(self.gains_db)} gains"
            )
        if len(set(self.speaker_ids)) != n:
            raise ManifestError(f"duplicate speaker ids {self.speaker_ids}")

    @property
    def num_speakers(self) -> int:
        return len(self.source_paths)


def _parse_line(text: str, base: Path, lineno: int) -> ManifestEntry:
    fields = text.split("\t")
    if len(fields) != 5:
        raise ManifestError(f"expected 5 tab-separated fields, got {len(fields)}", lineno)
    mix, sources, speakers, gains, seed = fields

    def resolve(p: str) -> str:
        return os.path.normpath(os.path.join(base, p))

    try:
        gain_values = [float(g) for g in gains.split(";")]
        seed_value = int(seed)
    except ValueError as exc:
        raise ManifestError(str(exc), lineno) from None
    try:
        return ManifestEntry(
            mixture_path=resolve(mix),
            source_paths=[resolve(p) for p in sources.split(";")],
            speaker_ids=speakers.split(";"),
            gains_db=gain_values,
            seed=seed_value,
        )
    except ManifestError as exc:
        raise ManifestError(str(exc), lineno) from None


def load_manifest(path: PathLike) -> List[ManifestEntry]:
    """Read a manifest; relative paths are resolved against its directory.

    File existence is not checked here.
    """
    path = Path(path)
    base = path.parent.absolute()
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            entries.append(_parse_line(line, base, lineno))
    return entries


def save_manifest(path: PathLike, entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    base = path.parent.absolute()

    def rel(p: str) -> str:
        return os.path.relpath(os.path.abspath(p), base)

    lines = []
    for e in entries:
        for token in [e.mixture_path, *e.source_paths, *e.speaker_ids]:
            if "\t" in token or ";" in token or "\n" in token:
                raise ManifestError(f"field contains a reserved separator: {token!r}")
        lines.append(
            "\t".join(
                [
                    rel(e.mixture_path),
                    ";".join(rel(p) for p in e.source_paths),
                    ";".join(e.speaker_ids),
                    ";".join(f"{g:.2f}" for g in e.gains_db),
                    str(int(e.seed)),
                ]
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))


def load_entry_audio(entry: ManifestEntry) -> tuple[Waveform, List[Waveform]]:
    """Read the mixture and reference sources of one manifest entry."""
    return read_wav(entry.mixture_path), [read_wav(p) for p in entry.source_paths]
