"""Differentiable SI-SNR and the one-and-rest permutation-invariant loss."""

from __future__ import annotations

import math
from typing import Sequence, Tuple, Union

import numpy as np
import torch

from .metrics import EPS, MetricError

ArrayLike = Union[torch.Tensor, np.ndarray, Sequence[float]]


def _tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def si_snr_torch(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Batched SI-SNR in dB over the last axis, same capping as ``metrics.si_snr``."""
    if est.shape != ref.shape:
        raise MetricError(f"length mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    est = est - est.mean(dim=-1, keepdim=True)
    ref = ref - ref.mean(dim=-1, keepdim=True)
    ref_energy = (ref * ref).sum(dim=-1, keepdim=True)
    if bool((ref_energy == 0).any()):
        raise MetricError("reference has zero energy after mean normalization")
    target = (est * ref).sum(dim=-1, keepdim=True) / ref_energy * ref
    noise = est - target
    t2 = (target * target).sum(dim=-1)
    e2 = (noise * noise).sum(dim=-1)
    num = torch.maximum(t2, EPS * e2)
    den = e2 + EPS * t2
    # all-zero estimate: 0/0 -> floor
    tiny = torch.finfo(est.dtype).tiny
    value = 10.0 * torch.log10((num + tiny) / (den + tiny))
    return torch.clamp(value, -10.0 * math.log10(1 / EPS), 10.0 * math.log10(1 / EPS))


def neg_si_snr(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return -si_snr_torch(est, ref)


def orpit_candidates(cue_est: torch.Tensor, res_est: torch.Tensor, refs: torch.Tensor) -> torch.Tensor:
    """Loss for every choice of the extracted speaker.

    ``cue_est``/``res_est``: ``(..., L)``; ``refs``: ``(..., N, L)``.
    Returns ``(..., N)`` with entry ``i`` equal to
    ``l(cue, refs[i]) + l(res, sum_{n != i} refs[n]) / (N - 1)``.
    """
    n = refs.shape[-2]
    if n < 2:
        raise ValueError(f"one-and-rest loss needs at least 2 references, got {n}")
    total = refs.sum(dim=-2, keepdim=True)
    rest = total - refs
    one = neg_si_snr(cue_est.unsqueeze(-2).expand_as(refs), refs)
    others = neg_si_snr(res_est.unsqueeze(-2).expand_as(refs), rest)
    return one + others / (n - 1)


def orpit_loss(
    cue_est: ArrayLike, res_est: ArrayLike, refs: ArrayLike
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Minimum over candidate speakers of the one-and-rest loss.

    Returns ``(loss, argmin)``; batched inputs give per-example values and
    ``argmin`` indexes the caller's ``refs`` order. References are put in a
    canonical order (by energy) before any reduction so the loss is bitwise
    invariant to permuting them.
    """
    cue = _tensor(cue_est)
    res = _tensor(res_est, cue)
    r = _tensor(refs, cue)
    lengths = {cue.shape[-1], res.shape[-1], r.shape[-1]}
    if len(lengths) != 1:
        raise MetricError(f"sequences differ in length: {sorted(lengths)}")
    with torch.no_grad():
        order = torch.argsort((r * r).sum(dim=-1), dim=-1, stable=True)
    canon = torch.gather(r, -2, order.unsqueeze(-1).expand_as(r))
    cands = orpit_candidates(cue, res, canon)
    loss, idx = cands.min(dim=-1)
    return loss, torch.gather(order, -1, idx.unsqueeze(-1)).squeeze(-1)
