"""Scale-invariant SNR and permutation-aligned scoring (double precision)."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

# relative floor on the noise energy; bounds scores to [-CAP_DB, CAP_DB]
EPS = 1e-8
CAP_DB = -10.0 * math.log10(EPS)
EXHAUSTIVE_MAX_N = 6


class MetricError(ValueError):
    pass


def mean_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise MetricError("cannot mean-normalize an empty sequence")
    return x - x.mean()


def si_snr(est, ref) -> float:
    """SI-SNR in dB, capped at +/-80 dB.

    The projection of the zero-mean estimate onto the zero-mean reference is
    the target part; the remainder is noise. ``EPS * |target|^2`` is added to
    the noise energy so a perfect estimate scores +80 dB, and the target
    energy is floored at ``EPS * |noise|^2`` so an orthogonal one scores -80.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 1:
        raise MetricError(f"length mismatch: {est.shape} vs {ref.shape}")
    s_hat = mean_normalize(est)
    s = mean_normalize(ref)
    ref_energy = float(np.dot(s, s))
    if ref_energy == 0.0:
        raise MetricError("reference has zero energy after mean normalization")
    target = (np.dot(s_hat, s) / ref_energy) * s
    noise = s_hat - target
    t2 = float(np.dot(target, target))
    e2 = float(np.dot(noise, noise))
    if t2 == 0.0 and e2 == 0.0:
        return -CAP_DB
    return 10.0 * math.log10(max(t2, EPS * e2) / (e2 + EPS * t2))


def si_snr_improvement(est, ref, mix) -> float:
    return si_snr(est, ref) - si_snr(mix, ref)


@dataclass
class AlignmentReport:
    permutation: List[int]
    per_source_si_snr_db: List[float]
    mean_si_snr_db: float
    per_source_improvement_db: Optional[List[float]] = None
    mean_si_snr_improvement_db: Optional[float] = None


def pairwise_si_snr(ests: Sequence, refs: Sequence) -> np.ndarray:
    """Matrix ``M[i, j] = si_snr(ests[i], refs[j])``."""
    return np.array([[si_snr(e, r) for r in refs] for e in ests], dtype=np.float64)


def _exhaustive(scores: np.ndarray) -> tuple:
    n = scores.shape[0]
    best, best_total = None, -math.inf
    for perm in itertools.permutations(range(n)):
        total = math.fsum(scores[i, perm[i]] for i in range(n))
        if total > best_total:
            best, best_total = perm, total
    return best


def _assignment(scores: np.ndarray) -> tuple:
    rows, cols = linear_sum_assignment(scores, maximize=True)
    perm = [0] * scores.shape[0]
    for r, c in zip(rows, cols):
        perm[r] = int(c)
    return tuple(perm)


def best_permutation_alignment(ests, refs, mix=None, method: str = "auto") -> AlignmentReport:
    """Find the estimate-to-reference bijection with the highest mean SI-SNR.

    ``method`` is ``"exhaustive"``, ``"assignment"`` or ``"auto"`` (exhaustive
    up to six sources, assignment solver beyond).
    """
    n = len(ests)
    if n < 1 or n != len(refs):
        raise MetricError(f"need equal nonzero counts, got {n} estimates and {len(refs)} references")
    lengths = {len(np.asarray(x)) for x in [*ests, *refs]}
    if len(lengths) != 1:
        raise MetricError(f"all sequences must share one length, got {sorted(lengths)}")
    scores = pairwise_si_snr(ests, refs)
    if method == "auto":
        method = "exhaustive" if n <= EXHAUSTIVE_MAX_N else "assignment"
    if method == "exhaustive":
        perm = _exhaustive(scores)
    elif method == "assignment":
        perm = _assignment(scores)
    else:
        raise ValueError(f"unknown alignment method {method!r}")
    per_source = [float(scores[i, perm[i]]) for i in range(n)]
    report = AlignmentReport(
        permutation=list(perm),
        per_source_si_snr_db=per_source,
        mean_si_snr_db=math.fsum(per_source) / n,
    )
    if mix is not None:
        base = [si_snr(mix, refs[perm[i]]) for i in range(n)]
        improvements = [per_source[i] - base[i] for i in range(n)]
        report.per_source_improvement_db = improvements
        report.mean_si_snr_improvement_db = math.fsum(improvements) / n
    return report


def best_subset_alignment(ests, refs) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Match ``min(len(ests), len(refs))`` pairs maximizing total SI-SNR.

    Returns ``(pairs, scores)`` with ``pairs`` sorted by estimate index.
    """
    if not ests or not refs:
        return [], np.zeros((len(ests), len(refs)))
    scores = pairwise_si_snr(ests, refs)
    rows, cols = linear_sum_assignment(scores, maximize=True)
    pairs = sorted((int(r), int(c)) for r, c in zip(rows, cols))
    return pairs, scores
