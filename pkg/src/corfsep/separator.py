"""Learned-filterbank dual-path separator shared by both stages.

Tensor layout is frames-major throughout: encoded features are
``(batch, frames, feature_dim)`` and chunked features are
``(batch, num_chunks, chunk_size, feature_dim)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio_io import Waveform

EPS = 1e-8


class GeometryError(ValueError):
    pass


@dataclass
class SeparatorConfig:
    encoder_window: int = 2
    encoder_stride: int = 1
    feature_dim: int = 64
    chunk_size: int = 250
    num_blocks: int = 6
    hidden_dim: int = 128
    num_outputs: int = 2

    def __post_init__(self):
        expected = self.encoder_window // 2 if self.encoder_window % 2 == 0 else self.encoder_window
        if self.encoder_stride != expected:
            raise GeometryError(
                f"encoder_stride must be {expected} for window {self.encoder_window}, "
                f"got {self.encoder_stride}"
            )
        if self.chunk_size < 2 or self.chunk_size % 2:
            raise GeometryError(f"chunk_size must be even and >= 2, got {self.chunk_size}")
        for name in ("feature_dim", "num_blocks", "hidden_dim", "num_outputs"):
            if getattr(self, name) < 1:
                raise GeometryError(f"{name} must be positive")

    @property
    def chunk_hop(self) -> int:
        return self.chunk_size // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def tiny(cls, **overrides) -> "SeparatorConfig":
        """Small configuration used for tests and toy experiments."""
        base = dict(
            encoder_window=16,
            encoder_stride=8,
            feature_dim=32,
            chunk_size=50,
            num_blocks=2,
            hidden_dim=32,
            num_outputs=2,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class FeatureMap:
    values: np.ndarray  # frames x feature_dim
    window: int
    stride: int
    length: int  # source waveform length in samples

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def num_frames(length: int, window: int, stride: int) -> int:
    if length < window:
        raise GeometryError(f"input of {length} samples is shorter than one window ({window})")
    return (length - window) // stride + 1


class Encoder(nn.Module):
    """Strided 1x1 framing followed by ReLU; bias-free so silence maps to zero."""

    def __init__(self, window: int, stride: int, feature_dim: int):
        super().__init__()
        self.window, self.stride = window, stride
        self.conv = nn.Conv1d(1, feature_dim, window, stride=stride, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, L) -> (B, T, F)
        num_frames(x.shape[-1], self.window, self.stride)
        return F.relu(self.conv(x.unsqueeze(1))).transpose(1, 2)


class Decoder(nn.Module):
    def __init__(self, window: int, stride: int, feature_dim: int):
        super().__init__()
        self.window, self.stride = window, stride
        self.deconv = nn.ConvTranspose1d(feature_dim, 1, window, stride=stride, bias=False)

    def forward(self, feats: torch.Tensor, length: int) -> torch.Tensor:
        # feats: (B, T, F) -> (B, length)
        if feats.shape[1] != num_frames(length, self.window, self.stride):
            raise GeometryError(
                f"{feats.shape[1]} frames do not match a {length}-sample signal "
                f"(window {self.window}, stride {self.stride})"
            )
        y = self.deconv(feats.transpose(1, 2)).squeeze(1)
        return F.pad(y, (0, length - y.shape[-1]))


def encode(w: Waveform, encoder: Encoder) -> FeatureMap:
    p = next(encoder.parameters())
    x = torch.as_tensor(w.samples, dtype=p.dtype).unsqueeze(0)
    with torch.no_grad():
        feats = encoder(x)[0]
    return FeatureMap(feats.cpu().numpy().astype(np.float64), encoder.window, encoder.stride, len(w))


def decode(f: FeatureMap, decoder: Decoder, rate: int = 8000) -> Waveform:
    if (f.window, f.stride) != (decoder.window, decoder.stride):
        raise GeometryError(
            f"feature geometry {(f.window, f.stride)} does not match decoder "
            f"{(decoder.window, decoder.stride)}"
        )
    p = next(decoder.parameters())
    feats = torch.as_tensor(f.values, dtype=p.dtype).unsqueeze(0)
    with torch.no_grad():
        y = decoder(feats, f.length)[0]
    return Waveform(y.cpu().numpy(), rate)


def chunk_count(frames: int, chunk_size: int) -> int:
    return math.ceil(frames / (chunk_size // 2))


def chunk(x: torch.Tensor, chunk_size: int) -> torch.Tensor:
    """Split ``(B, T, F)`` into 50%-overlapping chunks ``(B, S, K, F)``.

    ``S = ceil(T / hop)`` chunks start at multiples of the hop; the end is
    zero padded to ``(S - 1) * hop + K`` frames.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    hop = chunk_size // 2
    frames = x.shape[1]
    if frames < 1:
        raise GeometryError("cannot chunk an empty feature map")
    s = chunk_count(frames, chunk_size)
    padded = F.pad(x, (0, 0, 0, (s - 1) * hop + chunk_size - frames))
    out = padded.unfold(1, chunk_size, hop).permute(0, 1, 3, 2).contiguous()
    return out[0] if squeeze else out


def merge_chunks(chunks: torch.Tensor, frames: int) -> torch.Tensor:
    """Overlap-add ``(B, S, K, F)`` back to ``(B, frames, F)`` with averaging."""
    squeeze = chunks.dim() == 3
    if squeeze:
        chunks = chunks.unsqueeze(0)
    b, s, k, f = chunks.shape
    hop = k // 2
    if s != chunk_count(frames, k):
        raise GeometryError(f"{s} chunks of size {k} cannot come from {frames} frames")
    total = (s - 1) * hop + k
    # fold expects (B, C * K, S) with the sliding axis last
    cols = chunks.permute(0, 3, 2, 1).reshape(b, f * k, s)
    summed = F.fold(cols, output_size=(1, total), kernel_size=(1, k), stride=(1, hop))
    ones = torch.ones(1, k, s, dtype=chunks.dtype, device=chunks.device)
    counts = F.fold(ones, output_size=(1, total), kernel_size=(1, k), stride=(1, hop))
    out = (summed / counts).reshape(b, f, total).transpose(1, 2)[:, :frames]
    return out[0] if squeeze else out


class GlobalLayerNorm(nn.Module):
    """Normalize over every non-batch axis, then per-feature affine."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(feature_dim))
        self.bias = nn.Parameter(torch.zeros(feature_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        dims = tuple(range(1, x.dim()))
        mean = x.mean(dim=dims, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=dims, keepdim=True)
        return (x - mean) / torch.sqrt(var + EPS) * self.weight + self.bias


class DualPathBlock(nn.Module):
    def __init__(self, feature_dim: int, hidden_dim: int):
        super().__init__()
        self.intra_rnn = nn.LSTM(feature_dim, hidden_dim, batch_first=True, bidirectional=True)
        self.intra_proj = nn.Linear(2 * hidden_dim, feature_dim)
        self.intra_norm = GlobalLayerNorm(feature_dim)
        self.inter_rnn = nn.LSTM(feature_dim, hidden_dim, batch_first=True, bidirectional=True)
        self.inter_proj = nn.Linear(2 * hidden_dim, feature_dim)
        self.inter_norm = GlobalLayerNorm(feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, s, k, f = x.shape
        intra, _ = self.intra_rnn(x.reshape(b * s, k, f))
        intra = self.intra_proj(intra).reshape(b, s, k, f)
        x = x + self.intra_norm(intra)

        inter_in = x.transpose(1, 2).reshape(b * k, s, f)
        inter, _ = self.inter_rnn(inter_in)
        inter = self.inter_proj(inter).reshape(b, k, s, f).transpose(1, 2)
        return x + self.inter_norm(inter)


def dual_path_block(chunks: torch.Tensor, block: DualPathBlock) -> torch.Tensor:
    return block(chunks)


class MaskHead(nn.Module):
    """Per-output masks through a PReLU; masks are unbounded above."""

    def __init__(self, feature_dim: int, num_outputs: int):
        super().__init__()
        self.num_outputs = num_outputs
        self.proj = nn.Linear(feature_dim, num_outputs * feature_dim)
        self.act = nn.PReLU()

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        # (B, T, F) -> (B, C, T, F)
        b, t, f = h.shape
        m = self.act(self.proj(h))
        return m.reshape(b, t, self.num_outputs, f).permute(0, 2, 1, 3)


class CueExtractor(nn.Module):
    """Stage-1 network: one waveform in, ``num_outputs`` waveforms out.

    With two outputs, channel 0 is the extracted speaker cue and channel 1
    the residual mixture.
    """

    def __init__(self, config: SeparatorConfig):
        super().__init__()
        self.config = config
        c = config
        self.encoder = Encoder(c.encoder_window, c.encoder_stride, c.feature_dim)
        self.norm = GlobalLayerNorm(c.feature_dim)
        self.blocks = nn.ModuleList(DualPathBlock(c.feature_dim, c.hidden_dim) for _ in range(c.num_blocks))
        self.mask = MaskHead(c.feature_dim, c.num_outputs)
        self.decoder = Decoder(c.encoder_window, c.encoder_stride, c.feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, L) -> (B, C, L)
        length = x.shape[-1]
        feats = self.encoder(x)
        frames = feats.shape[1]
        h = chunk(self.norm(feats), self.config.chunk_size)
        for block in self.blocks:
            h = block(h)
        masks = self.mask(merge_chunks(h, frames))
        masked = masks * feats.unsqueeze(1)
        b, c = masked.shape[:2]
        y = self.decoder(masked.reshape(b * c, frames, -1), length)
        return y.reshape(b, c, length)


def run_model(model: nn.Module, x: np.ndarray, *extra: np.ndarray) -> np.ndarray:
    """Forward one unbatched signal through ``model`` without gradients."""
    p = next(model.parameters())
    args = [torch.as_tensor(np.asarray(a), dtype=p.dtype).unsqueeze(0) for a in (x, *extra)]
    with torch.no_grad():
        y = model(*args)
    return y[0].cpu().numpy().astype(np.float64)


def separate2(x: Waveform, model: CueExtractor) -> Tuple[Waveform, Waveform]:
    """One recursion step: ``(cue, residual)`` for the input signal."""
    if model.config.num_outputs != 2:
        raise GeometryError("separate2 needs a two-output model")
    y = run_model(model, x.samples)
    return Waveform(y[0], x.rate), Waveform(y[1], x.rate)
