"""Repeat-or-stop classifier on stage-1 residuals.

Input residuals are scaled to unit RMS (digital silence stays zero), passed
through the frozen stage-1 encoder, pooled over time (mean and max) and
classified by a two-layer feedforward head. Class 1 is CONTINUE (two or
more speakers remain), class 0 is STOP.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio_io import Waveform
from .checkpoint import Checkpoint, from_module, load_into
from .separator import CueExtractor, Encoder, SeparatorConfig
from .training import TrainingError, build_cue_extractor, set_determinism

STOP, CONTINUE = 0, 1
SILENCE_RMS = 1e-6


@dataclass
class StopClassifierConfig:
    threshold: float = 0.5
    hidden_dim: int = 64
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    def to_dict(self) -> dict:
        return asdict(self)


class StopClassifier(nn.Module):
    def __init__(self, sep_cfg: SeparatorConfig, hidden_dim: int, threshold: float = 0.5):
        super().__init__()
        self.sep_cfg = sep_cfg
        self.threshold = threshold
        self.encoder = Encoder(sep_cfg.encoder_window, sep_cfg.encoder_stride, sep_cfg.feature_dim)
        self.encoder.requires_grad_(False)
        self.head = nn.Sequential(
            nn.Linear(2 * sep_cfg.feature_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, 2),
        )
        # standardization of the pooled features, fitted on the training set
        self.register_buffer("feat_mean", torch.zeros(2 * sep_cfg.feature_dim))
        self.register_buffer("feat_std", torch.ones(2 * sep_cfg.feature_dim))

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Temporal mean and max of the encoded, unit-RMS input."""
        rms = x.pow(2).mean(dim=-1, keepdim=True).sqrt()
        x = torch.where(rms > SILENCE_RMS, x / rms.clamp_min(SILENCE_RMS), torch.zeros_like(x))
        with torch.no_grad():
            feats = self.encoder(x)
        return torch.cat([feats.mean(dim=1), feats.amax(dim=1)], dim=-1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return (self.pooled(x) - self.feat_mean) / self.feat_std

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits ``(B, 2)`` for STOP/CONTINUE."""
        return self.head(self.features(x))


def residual_training_data(
    stage1: CueExtractor, mixtures: Sequence[Tuple[np.ndarray, int]], max_depth: int = 3
) -> List[Tuple[np.ndarray, int]]:
    """Label stage-1 residuals by how many speakers they still hold.

    ``mixtures`` pairs a signal with its true speaker count ``k``. Running
    the model ``j`` times leaves ``k - j`` speakers; two or more is
    CONTINUE. One digital-silence example is always added.
    """
    dtype = next(stage1.parameters()).dtype
    data = []
    with torch.no_grad():
        for x, k in mixtures:
            r = torch.as_tensor(x, dtype=dtype).unsqueeze(0)
            for j in range(1, min(k, max_depth) + 1):
                r = stage1(r)[:, 1]
                data.append((r[0].double().numpy(), CONTINUE if k - j >= 2 else STOP))
    length = len(mixtures[0][0]) if mixtures else 4000
    data.append((np.zeros(length), STOP))
    return data


def train_stop_classifier(
    data: Sequence[Tuple[np.ndarray, int]],
    cfg: StopClassifierConfig,
    stage1_ckpt: Checkpoint,
) -> Checkpoint:
    labels = np.array([int(y) for _, y in data])
    if len(set(labels.tolist())) < 2:
        raise TrainingError("stop classifier needs examples of both classes")
    set_determinism(cfg.seed, cfg.deterministic)
    stage1 = build_cue_extractor(stage1_ckpt)
    model = StopClassifier(stage1.config, cfg.hidden_dim, cfg.threshold)
    model.encoder.load_state_dict(stage1.encoder.state_dict())
    # pooled features are fixed, compute them once
    lengths = {len(x) for x, _ in data}
    with torch.no_grad():
        if len(lengths) == 1:
            raw = model.pooled(torch.as_tensor(np.stack([x for x, _ in data]), dtype=torch.float32))
        else:
            raw = torch.cat(
                [model.pooled(torch.as_tensor(x, dtype=torch.float32).unsqueeze(0)) for x, _ in data]
            )
        model.feat_mean.copy_(raw.mean(dim=0))
        model.feat_std.copy_(raw.std(dim=0) + 1e-6)
        feats = (raw - model.feat_mean) / model.feat_std
    y = torch.as_tensor(labels)
    # class-balanced weights
    counts = torch.bincount(y, minlength=2).float()
    weight = counts.sum() / (2.0 * counts)
    opt = torch.optim.Adam(model.head.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = torch.as_tensor(rng.permutation(len(y)))
        for i in range(0, len(y), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss = F.cross_entropy(model.head(feats[idx]), y[idx], weight=weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        acc = float((model.head(feats).argmax(dim=-1) == y).float().mean())
    config = {"separator": stage1.config.to_dict(), "stop": cfg.to_dict()}
    return from_module(
        "stop",
        config,
        model,
        train_state={"train_accuracy": acc, "num_examples": len(y)},
        meta={"stage1_digest": stage1_ckpt.digest()},
    )


def build_stop_classifier(ckpt: Checkpoint) -> StopClassifier:
    if ckpt.kind != "stop":
        raise TrainingError(f"expected a stop checkpoint, got {ckpt.kind}")
    model = StopClassifier(SeparatorConfig(**ckpt.config["separator"]), ckpt.config["stop"]["hidden_dim"])
    load_into(model, ckpt)
    model.threshold = float(ckpt.config["stop"]["threshold"])
    model.eval()
    return model


def continue_probability(model: StopClassifier, residual: np.ndarray) -> float:
    residual = np.asarray(residual, dtype=np.float64)
    # digital silence holds no speaker, whatever the head has learned
    if residual.size == 0 or np.sqrt(np.mean(residual**2)) <= SILENCE_RMS:
        return 0.0
    x = torch.as_tensor(residual, dtype=torch.float32).unsqueeze(0)
    with torch.no_grad():
        return float(torch.softmax(model(x), dim=-1)[0, CONTINUE])


def should_continue(
    residual: Waveform, model: StopClassifier, threshold: float | None = None
) -> Tuple[bool, float]:
    """Decision and the probability of the decided class.

    ``threshold`` defaults to the trained configuration's value; it is the
    minimum CONTINUE probability needed to keep recursing.
    """
    if threshold is None:
        threshold = model.threshold
    p = continue_probability(model, residual.samples)
    decision = p >= threshold
    return decision, p if decision else 1.0 - p
