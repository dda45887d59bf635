"""Training harness and stage-1 (cue extractor) training."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .audio_io import PathLike, load_entry_audio, load_manifest
from .checkpoint import Checkpoint, from_module, load_into
from .losses import orpit_loss
from .metrics import si_snr
from .mixsim import segment_bounds
from .separator import CueExtractor, SeparatorConfig

log = logging.getLogger(__name__)

CACHE_ENV = "CORFSEP_CACHE"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    initial_lr: float = 5e-4
    lr_halving_patience: int = 5
    grad_clip_l2: float = 5.0
    betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    max_epochs: int = 100
    max_steps: Optional[int] = None
    seed: int = 0
    segment_seconds: float = 4.0
    segment_hop: float = 2.0
    deterministic: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.initial_lr <= 0 or self.grad_clip_l2 <= 0:
            raise ValueError("learning rate and clip norm must be positive")
        if self.lr_halving_patience < 1:
            raise ValueError("lr_halving_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def set_determinism(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


class HalvingSchedule:
    """Halve the learning rate after ``patience`` consecutive epochs without
    a new best validation score (higher is better)."""

    def __init__(self, initial_lr: float, patience: int):
        self.lr = initial_lr
        self.patience = patience
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs == self.patience:
                self.lr /= 2.0
                self.bad_epochs = 0
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad_epochs": self.bad_epochs}


def clip_gradients(params, max_norm: float) -> float:
    """Rescale gradients to global L2 norm ``max_norm``; returns the norm before clipping."""
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


@dataclass
class Example:
    mixture: np.ndarray
    refs: np.ndarray  # (N, L)
    key: str = ""

    @property
    def num_speakers(self) -> int:
        return self.refs.shape[0]


def segment_example(mixture: np.ndarray, refs: np.ndarray, seg: int, hop: int, key: str) -> List[Example]:
    out = []
    for k, (a, b) in enumerate(segment_bounds(len(mixture), seg, hop)):
        m = np.zeros(seg)
        r = np.zeros((refs.shape[0], seg))
        m[: min(b, len(mixture)) - a] = mixture[a:b]
        r[:, : min(b, len(mixture)) - a] = refs[:, a:b]
        # OR-PIT is undefined with a silent reference
        if np.all(np.var(r, axis=1) > 0):
            out.append(Example(m, r, f"{key}#{k}"))
    return out


def load_examples(manifest: PathLike, seg_seconds: float = 4.0, hop_seconds: float = 2.0) -> List[Example]:
    examples = []
    for entry in load_manifest(manifest):
        mix, sources = load_entry_audio(entry)
        seg = int(round(seg_seconds * mix.rate))
        hop = int(round(hop_seconds * mix.rate))
        refs = np.stack([s.samples for s in sources])
        examples.extend(segment_example(mix.samples, refs, seg, hop, entry.mixture_path))
    return examples


def group_by_speakers(examples: Sequence[Example]) -> Dict[int, List[Example]]:
    groups: Dict[int, List[Example]] = {}
    for ex in examples:
        groups.setdefault(ex.num_speakers, []).append(ex)
    return dict(sorted(groups.items()))


def epoch_batches(
    examples: Sequence[Example], batch_size: int, rng: np.random.Generator
) -> List[List[Example]]:
    """Batches homogeneous in speaker count, interleaved at random.

    Each group contributes batches in proportion to its size.
    """
    batches = []
    for _, group in group_by_speakers(examples).items():
        order = rng.permutation(len(group))
        for i in range(0, len(group), batch_size):
            batches.append([group[j] for j in order[i : i + batch_size]])
    return [batches[i] for i in rng.permutation(len(batches))]


def stack(batch: Sequence[Example], dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(np.stack([b.mixture for b in batch]), dtype=dtype)
    refs = torch.as_tensor(np.stack([b.refs for b in batch]), dtype=dtype)
    return x, refs


def fit(
    model: torch.nn.Module,
    train: Sequence[Example],
    loss_fn: Callable[[torch.nn.Module, List[Example]], torch.Tensor],
    valid_fn: Callable[[torch.nn.Module], float],
    cfg: TrainConfig,
    log_path: Optional[PathLike] = None,
) -> Tuple[dict, List[dict]]:
    """Adam with plateau halving and global-norm clipping.

    Returns the best-validation state dict and the per-epoch records. A
    non-finite loss stops training; the best finite state is returned.
    """
    if not train:
        raise TrainingError("empty training set")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.initial_lr, betas=cfg.betas)
    sched = HalvingSchedule(cfg.initial_lr, cfg.lr_halving_patience)
    rng = np.random.default_rng(cfg.seed)
    best_state = copy.deepcopy(model.state_dict())
    best_metric = -math.inf
    history: List[dict] = []
    steps = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            losses = []
            diverged = False
            for batch in epoch_batches(train, cfg.batch_size, rng):
                loss = loss_fn(model, batch)
                if not torch.isfinite(loss):
                    diverged = True
                    break
                opt.zero_grad()
                loss.backward()
                clip_gradients(params, cfg.grad_clip_l2)
                opt.step()
                losses.append(float(loss.detach()))
                steps += 1
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
            if diverged:
                log.warning("non-finite loss at epoch %d; keeping the best finite state", epoch)
                history.append({"epoch": epoch, "diverged": True})
                break
            model.eval()
            metric = valid_fn(model)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "valid_si_snr_db": metric,
                "lr": sched.lr,
            }
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.4f valid %.3f dB lr %.2e", epoch, record["train_loss"], metric, sched.lr)
            if metric > best_metric:
                best_metric = metric
                best_state = copy.deepcopy(model.state_dict())
            new_lr = sched.step(metric)
            for g in opt.param_groups:
                g["lr"] = new_lr
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    return best_state, history


# -- stage 1 -----------------------------------------------------------------


def build_cue_extractor(ckpt: Checkpoint) -> CueExtractor:
    if ckpt.kind != "stage1":
        raise TrainingError(f"expected a stage1 checkpoint, got {ckpt.kind}")
    model = CueExtractor(SeparatorConfig(**ckpt.config["separator"]))
    load_into(model, ckpt)
    model.eval()
    return model


def orpit_batch_loss(model: torch.nn.Module, batch: List[Example]) -> torch.Tensor:
    x, refs = stack(batch, next(model.parameters()).dtype)
    y = model(x)
    loss, _ = orpit_loss(y[:, 0], y[:, 1], refs)
    return loss.mean()


def cue_si_snr(model: CueExtractor, examples: Sequence[Example], batch_size: int = 8) -> float:
    """Mean SI-SNR of the extracted cue against its OR-PIT-selected reference."""
    if not examples:
        return float("nan")
    scores = []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for n, group in group_by_speakers(examples).items():
            for i in range(0, len(group), batch_size):
                batch = group[i : i + batch_size]
                x, refs = stack(batch, dtype)
                y = model(x)
                _, idx = orpit_loss(y[:, 0], y[:, 1], refs)
                for b, ex in enumerate(batch):
                    scores.append(si_snr(y[b, 0].double().numpy(), ex.refs[int(idx[b])]))
    return float(np.mean(scores))


def _train_cue(
    model: CueExtractor,
    train: Sequence[Example],
    valid: Sequence[Example],
    cfg: TrainConfig,
    log_path: Optional[PathLike],
    meta: dict,
) -> Checkpoint:
    state, history = fit(
        model, train, orpit_batch_loss, lambda m: cue_si_snr(m, valid), cfg, log_path
    )
    model.load_state_dict(state)
    model.eval()
    config = {"separator": model.config.to_dict(), "train": cfg.to_dict()}
    return from_module(
        "stage1", config, model, train_state={"history": history}, meta=meta
    )


def train_stage1(
    train: Sequence[Example],
    cfg: TrainConfig,
    sep_cfg: SeparatorConfig,
    valid: Optional[Sequence[Example]] = None,
    log_path: Optional[PathLike] = None,
) -> Checkpoint:
    """Train the two-output cue extractor with OR-PIT on mixed speaker counts.

    ``train`` may mix 2- and 3-speaker examples; batches stay homogeneous in
    speaker count. Without ``valid`` the training set is used for
    validation.
    """
    if sep_cfg.num_outputs != 2:
        raise TrainingError("stage 1 needs num_outputs == 2")
    if any(ex.num_speakers < 2 for ex in train):
        raise TrainingError("stage-1 training examples need at least 2 speakers")
    set_determinism(cfg.seed, cfg.deterministic)
    model = CueExtractor(sep_cfg)
    return _train_cue(model, train, valid or train, cfg, log_path, {})


def _cache_dir() -> Optional[Path]:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else None


def _examples_digest(examples: Sequence[Example]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(ex.key.encode())
        h.update(np.ascontiguousarray(ex.mixture).tobytes())
        h.update(np.ascontiguousarray(ex.refs).tobytes())
    return h.hexdigest()


def derive_residual_examples(model: CueExtractor, threemix: Sequence[Example]) -> List[Example]:
    """First-iteration residuals of 3-speaker mixtures as new 2-speaker examples.

    Each residual's references are the two sources left after removing the
    OR-PIT-selected speaker. Cached under ``$CORFSEP_CACHE`` when set.
    """
    cache = _cache_dir()
    path = None
    if cache is not None:
        ckpt_digest = from_module("stage1", {}, model).digest()
        key = hashlib.sha256((ckpt_digest + _examples_digest(threemix)).encode()).hexdigest()[:24]
        path = cache / f"residuals-{key}.npz"
        if path.is_file():
            with np.load(path, allow_pickle=False) as npz:
                data = {k: npz[k] for k in npz.files}
            return [
                Example(data["mix"][i], data["refs"][i], str(data["keys"][i]))
                for i in range(len(data["keys"]))
            ]
    dtype = next(model.parameters()).dtype
    derived = []
    with torch.no_grad():
        for ex in threemix:
            if ex.num_speakers != 3:
                raise TrainingError("fine-tuning residuals need 3-speaker mixtures")
            x = torch.as_tensor(ex.mixture, dtype=dtype).unsqueeze(0)
            refs = torch.as_tensor(ex.refs, dtype=dtype).unsqueeze(0)
            y = model(x)
            _, idx = orpit_loss(y[:, 0], y[:, 1], refs)
            keep = [n for n in range(3) if n != int(idx[0])]
            derived.append(Example(y[0, 1].double().numpy(), ex.refs[keep], ex.key + "/res1"))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            mix=np.stack([d.mixture for d in derived]),
            refs=np.stack([d.refs for d in derived]),
            keys=np.array([d.key for d in derived]),
        )
    return derived


def finetune_stage1(
    ckpt: Checkpoint,
    threemix: Sequence[Example],
    cfg: TrainConfig,
    valid: Optional[Sequence[Example]] = None,
    log_path: Optional[PathLike] = None,
) -> Checkpoint:
    """Continue OR-PIT training on first-iteration residuals plus the 3-speaker set."""
    set_determinism(cfg.seed, cfg.deterministic)
    model = build_cue_extractor(ckpt)
    derived = derive_residual_examples(model, threemix)
    train = list(derived) + list(threemix)
    meta = {"finetuned_from": ckpt.digest(), "derived_examples": len(derived)}
    return _train_cue(model, train, valid or train, cfg, log_path, meta)
