"""Recursive coarse-to-fine inference and dataset-level evaluation."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audio_io import PathLike, Waveform, load_entry_audio, load_manifest
from .extractor import TargetExtractor, extract
from .metrics import best_permutation_alignment, best_subset_alignment, si_snr
from .separator import CueExtractor, GeometryError, separate2
from .stop import StopClassifier, should_continue

log = logging.getLogger(__name__)

TERMINAL_MODES = ("residual", "pass")


class PipelineError(RuntimeError):
    pass


@dataclass
class SeparationResult:
    fine_sources: List[Waveform]
    coarse_cues: List[Waveform]
    residual_trace: List[Waveform]
    stop_decisions: List[Tuple[bool, float]]
    iterations: int
    truncated: bool = False

    def to_record(self) -> dict:
        return {
            "iterations": self.iterations,
            "truncated": self.truncated,
            "stop_decisions": [
                {"continue": bool(c), "confidence": round(float(p), 6)} for c, p in self.stop_decisions
            ],
        }


@dataclass
class Models:
    stage1: CueExtractor
    stop: StopClassifier
    stage2: Optional[TargetExtractor]

    def check_compatible(self) -> None:
        s1 = self.stage1.config
        geoms = {"stage1": (s1.encoder_window, s1.encoder_stride, s1.feature_dim)}
        sc = self.stop.sep_cfg
        geoms["stop"] = (sc.encoder_window, sc.encoder_stride, sc.feature_dim)
        if self.stage2 is not None:
            c = self.stage2.config.separator
            geoms["stage2"] = (c.encoder_window, c.encoder_stride, c.feature_dim)
        if len(set(geoms.values())) != 1:
            raise GeometryError(f"incompatible encoder geometries (window, stride, features): {geoms}")


def separate(
    x: Waveform,
    models: Models,
    max_iterations: int = 10,
    terminal: str = "residual",
    threshold: Optional[float] = None,
    stage2_hook: Optional[Callable[[Waveform, Waveform], None]] = None,
) -> SeparationResult:
    """Peel off one coarse cue per pass, then refine every cue against ``x``.

    After each pass the stop classifier inspects the residual. On STOP the
    residual itself becomes the final cue (``terminal="residual"``) or one
    more pass supplies it (``terminal="pass"``). ``max_iterations`` caps the
    number of sources; hitting it with material left sets ``truncated``.
    ``stage2_hook`` sees every (mixture, cue) handed to the extractor.
    """
    if terminal not in TERMINAL_MODES:
        raise ValueError(f"terminal must be one of {TERMINAL_MODES}")
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    models.check_compatible()
    cues: List[Waveform] = []
    trace = [x]
    decisions: List[Tuple[bool, float]] = []
    truncated = False
    residual = x
    while True:
        cue, residual = separate2(residual, models.stage1)
        cues.append(cue)
        trace.append(residual)
        go_on, conf = should_continue(residual, models.stop, threshold)
        decisions.append((go_on, conf))
        if len(cues) >= max_iterations:
            truncated = True
            break
        if not go_on:
            if terminal == "residual":
                cues.append(residual)
            else:
                cues.append(separate2(residual, models.stage1)[0])
            break
    fine = []
    for cue in cues:
        if models.stage2 is None:
            fine.append(cue)
            continue
        if stage2_hook is not None:
            stage2_hook(x, cue)
        fine.append(extract(x, cue, models.stage2))
    return SeparationResult(fine, cues, trace, decisions, len(cues), truncated)


# -- evaluation ----------------------------------------------------------------


@dataclass
class MixtureScore:
    key: str
    num_speakers: int
    iterations: int
    fine: List[float]  # per iteration index; NaN where unmatched
    coarse: List[float]


@dataclass
class EvalReport:
    per_num_speakers: Dict[int, float]
    per_iteration: Dict[Tuple[int, int], float]
    counting_accuracy: float
    coarse_per_num_speakers: Dict[int, float] = field(default_factory=dict)
    coarse_per_iteration: Dict[Tuple[int, int], float] = field(default_factory=dict)
    num_mixtures: int = 0


def _score_iterations(ests: Sequence[Waveform], refs: Sequence[Waveform]) -> List[float]:
    est = [e.samples for e in ests]
    ref = [r.samples for r in refs]
    scores = [math.nan] * len(est)
    if len(est) == len(ref):
        rep = best_permutation_alignment(est, ref)
        for i, v in enumerate(rep.per_source_si_snr_db):
            scores[i] = v
    else:
        pairs, mat = best_subset_alignment(est, ref)
        for i, j in pairs:
            scores[i] = float(mat[i, j])
    return scores


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else math.nan


def aggregate(scores: Sequence[MixtureScore], with_coarse: bool) -> EvalReport:
    # sorted by key so the result does not depend on manifest order
    scores = sorted(scores, key=lambda s: s.key)

    def collect(attr: str):
        per_n: Dict[int, List[float]] = {}
        per_it: Dict[Tuple[int, int], List[float]] = {}
        for s in scores:
            vals = getattr(s, attr)
            matched = [v for v in vals if not math.isnan(v)]
            per_n.setdefault(s.num_speakers, []).append(_mean(matched))
            for j, v in enumerate(vals, start=1):
                if not math.isnan(v):
                    per_it.setdefault((s.num_speakers, j), []).append(v)
        return (
            {n: _mean(v) for n, v in sorted(per_n.items())},
            {k: _mean(v) for k, v in sorted(per_it.items())},
        )

    fine_n, fine_it = collect("fine")
    report = EvalReport(
        per_num_speakers=fine_n,
        per_iteration=fine_it,
        counting_accuracy=_mean([float(s.iterations == s.num_speakers) for s in scores]),
        num_mixtures=len(scores),
    )
    if with_coarse:
        report.coarse_per_num_speakers, report.coarse_per_iteration = collect("coarse")
    return report


def evaluate(
    manifest: PathLike,
    models: Models,
    max_iterations: int = 10,
    terminal: str = "residual",
    score_coarse: bool = True,
    workers: int = 1,
    separate_fn: Optional[Callable[[Waveform], SeparationResult]] = None,
) -> Tuple[EvalReport, List[MixtureScore]]:
    """Separate every manifest mixture and aggregate best-permutation SI-SNR.

    ``separate_fn`` replaces the model pipeline (used for oracle bounds).
    """
    entries = load_manifest(manifest)
    if not entries:
        raise PipelineError(f"manifest {manifest} is empty")
    if separate_fn is None:

        def separate_fn(x: Waveform) -> SeparationResult:
            return separate(x, models, max_iterations, terminal)

    def job(entry) -> MixtureScore:
        x, refs = load_entry_audio(entry)
        res = separate_fn(x)
        return MixtureScore(
            key=entry.mixture_path,
            num_speakers=len(refs),
            iterations=res.iterations,
            fine=_score_iterations(res.fine_sources, refs),
            coarse=_score_iterations(res.coarse_cues, refs) if score_coarse else [],
        )

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(job, entries))
    else:
        scores = [job(e) for e in entries]
    return aggregate(scores, score_coarse), scores


def _fmt(v: float) -> str:
    return "-" if v is None or math.isnan(v) else f"{v:.2f}"


def report_records(report: EvalReport) -> List[dict]:
    rows = []
    for n, v in report.per_num_speakers.items():
        row = {"num_speakers": n, "stage": "two-stage", "mean_si_snr_db": round(v, 6)}
        rows.append(row)
        if report.coarse_per_num_speakers:
            rows.append(
                {"num_speakers": n, "stage": "stage1-only", "mean_si_snr_db": round(report.coarse_per_num_speakers[n], 6)}
            )
    for (n, j), v in report.per_iteration.items():
        rows.append({"num_speakers": n, "iteration": j, "stage": "two-stage", "mean_si_snr_db": round(v, 6)})
    for (n, j), v in report.coarse_per_iteration.items():
        rows.append({"num_speakers": n, "iteration": j, "stage": "stage1-only", "mean_si_snr_db": round(v, 6)})
    rows.append({"counting_accuracy": round(report.counting_accuracy, 6), "num_mixtures": report.num_mixtures})
    return rows


def format_table(report: EvalReport) -> str:
    """Aligned text table: one row per (speaker count, stage), one column per iteration."""
    max_it = max((j for _, j in report.per_iteration), default=0)
    header = ["#spk", "stage", "mean"] + [f"it{j}" for j in range(1, max_it + 1)]
    rows = []
    stages = [("two-stage", report.per_num_speakers, report.per_iteration)]
    if report.coarse_per_num_speakers:
        stages.insert(0, ("stage1-only", report.coarse_per_num_speakers, report.coarse_per_iteration))
    for n in report.per_num_speakers:
        for name, per_n, per_it in stages:
            rows.append(
                [str(n), name, _fmt(per_n.get(n, math.nan))]
                + [_fmt(per_it.get((n, j), math.nan)) for j in range(1, max_it + 1)]
            )
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header, *rows]]
    lines.append(f"counting accuracy: {report.counting_accuracy:.4f} over {report.num_mixtures} mixtures")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir: PathLike) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl = out_dir / "report.jsonl"
    with open(jsonl, "w", encoding="utf-8") as fh:
        for row in report_records(report):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    table = out_dir / "report.txt"
    table.write_text(format_table(report), encoding="utf-8")
    return jsonl, table
