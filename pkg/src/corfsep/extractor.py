"""Cue-conditioned target extractor (stage 2) and its trainer."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio_io import PathLike, Waveform
from .checkpoint import Checkpoint, from_module, load_into
from .losses import neg_si_snr
from .metrics import si_snr
from .separator import (
    CueExtractor,
    Decoder,
    DualPathBlock,
    Encoder,
    FeatureMap,
    GeometryError,
    GlobalLayerNorm,
    MaskHead,
    SeparatorConfig,
    chunk,
    merge_chunks,
    num_frames,
    run_model,
)
from .training import (
    Example,
    TrainConfig,
    TrainingError,
    _cache_dir,
    _examples_digest,
    build_cue_extractor,
    fit,
    set_determinism,
)

log = logging.getLogger(__name__)


@dataclass
class ConditionedConfig:
    separator: SeparatorConfig = field(
        default_factory=lambda: SeparatorConfig(num_blocks=6, num_outputs=1)
    )
    conditioning_blocks: FrozenSet[int] = frozenset({1, 3, 5})

    def __post_init__(self):
        if isinstance(self.separator, dict):
            self.separator = SeparatorConfig(**self.separator)
        self.conditioning_blocks = frozenset(int(b) for b in self.conditioning_blocks)
        if self.separator.num_outputs != 1:
            raise GeometryError("the target extractor has a single output")
        valid = set(range(1, self.separator.num_blocks + 1))
        if not self.conditioning_blocks <= valid:
            raise GeometryError(
                f"conditioning blocks {sorted(self.conditioning_blocks)} outside 1..{self.separator.num_blocks}"
            )

    @classmethod
    def odd_blocks(cls, separator: SeparatorConfig) -> "ConditionedConfig":
        return cls(separator, frozenset(range(1, separator.num_blocks + 1, 2)))

    def to_dict(self) -> dict:
        return {
            "separator": self.separator.to_dict(),
            "conditioning_blocks": sorted(self.conditioning_blocks),
        }


def condition(features: torch.Tensor, cue_features: torch.Tensor) -> torch.Tensor:
    """Elementwise product of equally chunked mixture and cue representations."""
    if features.shape != cue_features.shape:
        raise GeometryError(
            f"cue shape {tuple(cue_features.shape)} does not match features {tuple(features.shape)}"
        )
    return features * cue_features


def align_frames(cue_feats: torch.Tensor, frames: int) -> torch.Tensor:
    """Zero-pad or truncate ``(B, T, F)`` cue features to ``frames``."""
    t = cue_feats.shape[1]
    if t >= frames:
        return cue_feats[:, :frames]
    return F.pad(cue_feats, (0, 0, 0, frames - t))


class TargetExtractor(nn.Module):
    """Extract the cue's speaker from the original mixture.

    The cue encoder is a frozen copy of the stage-1 encoder; the mixture
    encoder, normalizations, dual-path stack, mask head and decoder are
    trained from scratch.
    """

    def __init__(self, config: ConditionedConfig, stage1_encoder: Optional[Encoder] = None):
        super().__init__()
        self.config = config
        c = config.separator
        self.cue_encoder = Encoder(c.encoder_window, c.encoder_stride, c.feature_dim)
        if stage1_encoder is not None:
            if (stage1_encoder.window, stage1_encoder.stride) != (c.encoder_window, c.encoder_stride):
                raise GeometryError("stage-1 encoder geometry differs from the extractor config")
            self.cue_encoder.load_state_dict(stage1_encoder.state_dict())
        self.cue_encoder.requires_grad_(False)
        self.mix_encoder = Encoder(c.encoder_window, c.encoder_stride, c.feature_dim)
        self.mix_norm = GlobalLayerNorm(c.feature_dim)
        self.cue_norm = GlobalLayerNorm(c.feature_dim)
        self.blocks = nn.ModuleList(DualPathBlock(c.feature_dim, c.hidden_dim) for _ in range(c.num_blocks))
        self.mask = MaskHead(c.feature_dim, 1)
        self.decoder = Decoder(c.encoder_window, c.encoder_stride, c.feature_dim)

    def encode_cue(self, cue: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.cue_encoder(cue)

    def forward(self, x: torch.Tensor, cue: torch.Tensor) -> torch.Tensor:
        # x: (B, L), cue: (B, L') -> (B, L)
        length = x.shape[-1]
        feats = self.mix_encoder(x)
        frames = feats.shape[1]
        cue_feats = align_frames(self.encode_cue(cue), frames)
        k = self.config.separator.chunk_size
        h = chunk(self.mix_norm(feats), k)
        cue_chunks = chunk(self.cue_norm(cue_feats), k)
        for i, block in enumerate(self.blocks, start=1):
            if i in self.config.conditioning_blocks:
                h = condition(h, cue_chunks)
            h = block(h)
        mask = self.mask(merge_chunks(h, frames))[:, 0]
        return self.decoder(mask * feats, length)


def warm_start(model: TargetExtractor, stage1: CueExtractor, cue_gain: float = 1.0) -> None:
    """Initialize the trainable path from stage 1's cue branch.

    Mixture encoder, normalization, the shared leading blocks, the cue half
    of the mask projection and the decoder are copied. The cue normalization
    gets unit ``bias`` and ``weight = cue_gain``, so conditioning scales the
    copied features by ``1 + cue_gain * normalized cue``; with ``cue_gain=0``
    the model reproduces stage 1 exactly.
    """
    c, s1 = model.config.separator, stage1.config
    if (c.encoder_window, c.encoder_stride, c.feature_dim, c.hidden_dim) != (
        s1.encoder_window,
        s1.encoder_stride,
        s1.feature_dim,
        s1.hidden_dim,
    ):
        raise GeometryError("warm start needs matching encoder and hidden sizes")
    f = c.feature_dim
    with torch.no_grad():
        model.mix_encoder.load_state_dict(stage1.encoder.state_dict())
        model.mix_norm.load_state_dict(stage1.norm.state_dict())
        for dst, src in zip(model.blocks, stage1.blocks):
            dst.load_state_dict(src.state_dict())
        model.mask.proj.weight.copy_(stage1.mask.proj.weight[:f])
        model.mask.proj.bias.copy_(stage1.mask.proj.bias[:f])
        model.mask.act.load_state_dict(stage1.mask.act.state_dict())
        model.decoder.load_state_dict(stage1.decoder.state_dict())
        model.cue_norm.weight.fill_(cue_gain)
        model.cue_norm.bias.fill_(1.0)


def encode_cue(c: Waveform, model: TargetExtractor) -> FeatureMap:
    if len(c) == 0:
        raise GeometryError("empty cue")
    enc = model.cue_encoder
    p = next(enc.parameters())
    with torch.no_grad():
        feats = enc(torch.as_tensor(c.samples, dtype=p.dtype).unsqueeze(0))[0]
    return FeatureMap(feats.numpy().astype(np.float64), enc.window, enc.stride, len(c))


def extract(x: Waveform, cue: Waveform, model: TargetExtractor) -> Waveform:
    window = model.config.separator.encoder_window
    num_frames(len(x), window, model.config.separator.encoder_stride)
    num_frames(len(cue), window, model.config.separator.encoder_stride)
    return Waveform(run_model(model, x.samples, cue.samples), x.rate)


def build_target_extractor(ckpt: Checkpoint) -> TargetExtractor:
    if ckpt.kind != "stage2":
        raise TrainingError(f"expected a stage2 checkpoint, got {ckpt.kind}")
    model = TargetExtractor(ConditionedConfig(**ckpt.config["conditioned"]))
    load_into(model, ckpt)
    model.eval()
    return model


# -- training ----------------------------------------------------------------


@dataclass
class CuePair:
    mixture: np.ndarray
    cue: np.ndarray
    ref: np.ndarray
    key: str = ""
    iteration: int = 1

    # fit() groups batches by speaker count; all pairs form one group
    num_speakers = 1


def recursive_cues(
    stage1: CueExtractor, x: np.ndarray, iterations: int, terminal: str = "pass"
) -> List[np.ndarray]:
    """Coarse cues of ``iterations`` recursive passes.

    With ``terminal="residual"`` the last cue is the residual left after
    ``iterations - 1`` passes, matching inference that stops on a
    single-speaker residual.
    """
    if terminal not in ("pass", "residual"):
        raise ValueError(f"unknown terminal mode {terminal!r}")
    dtype = next(stage1.parameters()).dtype
    passes = iterations - 1 if terminal == "residual" else iterations
    cues = []
    r = torch.as_tensor(x, dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        for _ in range(passes):
            y = stage1(r)
            cues.append(y[0, 0].double().numpy())
            r = y[:, 1]
    if terminal == "residual":
        cues.append(r[0].double().numpy())
    return cues


def greedy_match(cues: Sequence[np.ndarray], refs: np.ndarray) -> List[int]:
    """For each cue in order, the unused reference with the highest SI-SNR."""
    free = list(range(refs.shape[0]))
    out = []
    for c in cues:
        best = max(free, key=lambda i: si_snr(c, refs[i]))
        out.append(best)
        free.remove(best)
    return out


def make_cue_pairs(
    stage1: CueExtractor, threemix: Sequence[Example], iterations: int = 3, terminal: str = "pass"
) -> List[CuePair]:
    """Run the frozen stage-1 model recursively and pair each cue with a reference."""
    cache = _cache_dir()
    path = None
    if cache is not None:
        s1 = from_module("stage1", {}, stage1).digest()
        tag = s1 + _examples_digest(threemix) + str(iterations) + terminal
        key = hashlib.sha256(tag.encode()).hexdigest()[:24]
        path = cache / f"cuepairs-{key}.npz"
        if path.is_file():
            with np.load(path, allow_pickle=False) as npz:
                d = {k: npz[k] for k in npz.files}
            return [
                CuePair(d["mix"][i], d["cue"][i], d["ref"][i], str(d["keys"][i]), int(d["iters"][i]))
                for i in range(len(d["keys"]))
            ]
    pairs = []
    for ex in threemix:
        if ex.num_speakers != iterations:
            raise TrainingError(f"expected {iterations}-speaker mixtures, got {ex.num_speakers}")
        cues = recursive_cues(stage1, ex.mixture, iterations, terminal)
        for j, (c, r) in enumerate(zip(cues, greedy_match(cues, ex.refs)), start=1):
            pairs.append(CuePair(ex.mixture, c, ex.refs[r], ex.key, j))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            mix=np.stack([p.mixture for p in pairs]),
            cue=np.stack([p.cue for p in pairs]),
            ref=np.stack([p.ref for p in pairs]),
            keys=np.array([p.key for p in pairs]),
            iters=np.array([p.iteration for p in pairs]),
        )
    return pairs


def _stack_pairs(batch: Sequence[CuePair], dtype) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    def t(name):
        return torch.as_tensor(np.stack([getattr(p, name) for p in batch]), dtype=dtype)

    return t("mixture"), t("cue"), t("ref")


def pair_loss(model: TargetExtractor, batch: List[CuePair]) -> torch.Tensor:
    x, cue, ref = _stack_pairs(batch, next(model.parameters()).dtype)
    return neg_si_snr(model(x, cue), ref).mean()


def pair_scores(model: TargetExtractor, pairs: Sequence[CuePair], batch_size: int = 8) -> np.ndarray:
    """SI-SNR of the extracted output for every pair."""
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            batch = pairs[i : i + batch_size]
            x, cue, _ = _stack_pairs(batch, dtype)
            y = model(x, cue).double().numpy()
            out.extend(si_snr(y[b], p.ref) for b, p in enumerate(batch))
    return np.array(out)


def train_stage2(
    stage1_ckpt: Checkpoint,
    threemix: Sequence[Example],
    cfg: TrainConfig,
    cond_cfg: ConditionedConfig,
    valid: Optional[Sequence[Example]] = None,
    log_path: Optional[PathLike] = None,
    warm: bool = False,
    terminal: str = "pass",
) -> Checkpoint:
    """Train the extractor on (mixture, cue) pairs from three stage-1 passes.

    The loss is negated SI-SNR against the greedily matched reference. The
    stage-1 model stays frozen. ``warm`` initializes from stage 1 (see
    :func:`warm_start`); ``terminal`` picks how the last cue is formed (see
    :func:`recursive_cues`) and should match the inference setting.
    """
    if not threemix:
        raise TrainingError("empty 3-speaker training set")
    stage1 = build_cue_extractor(stage1_ckpt)
    s1 = stage1.config
    c = cond_cfg.separator
    if (s1.encoder_window, s1.encoder_stride, s1.feature_dim) != (c.encoder_window, c.encoder_stride, c.feature_dim):
        raise GeometryError(
            f"stage-1 encoder {(s1.encoder_window, s1.encoder_stride, s1.feature_dim)} incompatible with "
            f"extractor {(c.encoder_window, c.encoder_stride, c.feature_dim)}"
        )
    train_pairs = make_cue_pairs(stage1, threemix, terminal=terminal)
    valid_pairs = make_cue_pairs(stage1, valid, terminal=terminal) if valid else train_pairs
    set_determinism(cfg.seed, cfg.deterministic)
    model = TargetExtractor(cond_cfg, stage1.encoder)
    if warm:
        warm_start(model, stage1)
    state, history = fit(
        model,
        train_pairs,
        pair_loss,
        lambda m: float(np.mean(pair_scores(m, valid_pairs))),
        cfg,
        log_path,
    )
    model.load_state_dict(state)
    model.eval()
    config = {"conditioned": cond_cfg.to_dict(), "train": cfg.to_dict()}
    return from_module(
        "stage2",
        config,
        model,
        train_state={"history": history},
        meta={"stage1_digest": stage1_ckpt.digest(), "warm_start": warm, "terminal": terminal},
    )
