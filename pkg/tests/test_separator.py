import numpy as np
import pytest
import torch

from corfsep.audio_io import Waveform
from corfsep.separator import (
    CueExtractor,
    Decoder,
    DualPathBlock,
    Encoder,
    GeometryError,
    SeparatorConfig,
    chunk,
    chunk_count,
    decode,
    encode,
    merge_chunks,
    separate2,
)


def central_diff_grad(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        g.view(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float((a - b).norm() / b.norm())


def test_config_invariants():
    cfg = SeparatorConfig()
    assert (cfg.encoder_window, cfg.encoder_stride, cfg.feature_dim) == (2, 1, 64)
    assert (cfg.chunk_size, cfg.chunk_hop, cfg.num_blocks, cfg.hidden_dim) == (250, 125, 6, 128)
    with pytest.raises(GeometryError):
        SeparatorConfig(encoder_window=4, encoder_stride=1)
    with pytest.raises(GeometryError):
        SeparatorConfig(chunk_size=7)
    assert SeparatorConfig(encoder_window=3, encoder_stride=3).encoder_stride == 3


def test_encode_frames_and_relu():
    torch.manual_seed(0)
    enc = Encoder(2, 1, 64)
    w = Waveform(np.random.default_rng(0).uniform(-1, 1, 32000))
    f = encode(w, enc)
    assert f.values.shape == (31999, 64)
    assert f.values.min() >= 0


def test_encode_zero_and_short():
    enc = Encoder(16, 8, 8)
    assert np.all(encode(Waveform(np.zeros(100)), enc).values == 0)
    with pytest.raises(GeometryError):
        encode(Waveform(np.zeros(10)), enc)


@pytest.mark.parametrize("length", [16, 17, 100, 101, 4003])
def test_decode_length(length):
    torch.manual_seed(0)
    enc, dec = Encoder(16, 8, 8), Decoder(16, 8, 8)
    w = Waveform(np.random.default_rng(1).standard_normal(length))
    f = encode(w, enc)
    assert len(decode(f, dec)) == length
    f.values[:] = 0
    assert np.all(decode(f, dec).samples == 0)


def test_decode_geometry_mismatch():
    f = encode(Waveform(np.ones(64)), Encoder(16, 8, 8))
    with pytest.raises(GeometryError):
        decode(f, Decoder(4, 2, 8))


def test_chunk_count_formula():
    k = 50
    # exactly K frames: starts at 0 and K/2 -> 2 chunks, padded to 1.5 K
    assert chunk_count(k, k) == 2
    c = chunk(torch.randn(1, k, 3), k)
    assert c.shape == (1, 2, k, 3)
    assert chunk(torch.randn(1, 1, 3), k).shape == (1, 1, k, 3)
    assert chunk(torch.randn(1, 26, 3), k).shape == (1, 2, k, 3)


def test_chunk_contents():
    x = torch.arange(60.0).reshape(1, 60, 1)
    c = chunk(x, 20)
    assert c.shape == (1, 6, 20, 1)
    assert c[0, 1, :, 0].tolist() == list(range(10, 30))
    assert c[0, 5, :10, 0].tolist() == list(range(50, 60))
    assert torch.all(c[0, 5, 10:] == 0)


def test_merge_chunk_round_trip():
    rng = torch.Generator().manual_seed(0)
    for frames in range(1, 1001):
        x = torch.randn(1, frames, 3, generator=rng, dtype=torch.float64)
        assert torch.equal(merge_chunks(chunk(x, 8), frames), x)
    for frames in (1, 249, 250, 251, 999):
        x = torch.randn(2, frames, 4, generator=rng, dtype=torch.float64)
        assert torch.equal(merge_chunks(chunk(x, 250), frames), x)


def test_merge_shape_mismatch():
    with pytest.raises(GeometryError):
        merge_chunks(torch.zeros(1, 3, 8, 2), 40)


def test_dual_path_shape_and_identity():
    torch.manual_seed(0)
    block = DualPathBlock(8, 6)
    for shape in [(1, 1, 4, 8), (2, 5, 10, 8), (3, 2, 2, 8)]:
        x = torch.randn(*shape)
        assert block(x).shape == x.shape
    with torch.no_grad():
        for proj in (block.intra_proj, block.inter_proj):
            proj.weight.zero_()
            proj.bias.zero_()
    x = torch.randn(2, 3, 4, 8)
    assert torch.allclose(block(x), x)


def test_dual_path_gradient():
    torch.manual_seed(0)
    block = DualPathBlock(4, 3).double()
    x = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 3, 4, 4, dtype=torch.float64)

    def f(inp):
        return (block(inp) * w).sum()

    f(x).backward()
    numeric = central_diff_grad(f, x.detach().clone())
    assert rel_err(x.grad, numeric) < 1e-4


def tiny_grad_model():
    cfg = SeparatorConfig(encoder_window=4, encoder_stride=2, feature_dim=8, chunk_size=8, num_blocks=2, hidden_dim=8)
    torch.manual_seed(1)
    return CueExtractor(cfg).double()


def test_full_model_gradient_input():
    model = tiny_grad_model()
    x = torch.randn(1, 64, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 2, 64, dtype=torch.float64)

    def f(inp):
        return (model(inp) * w).sum()

    f(x).backward()
    numeric = central_diff_grad(f, x.detach().clone())
    assert rel_err(x.grad, numeric) < 1e-3


def test_full_model_gradient_params():
    model = tiny_grad_model()
    x = torch.randn(1, 64, dtype=torch.float64)
    w = torch.randn(1, 2, 64, dtype=torch.float64)
    loss = (model(x) * w).sum()
    loss.backward()
    # directional derivatives along random parameter directions
    rng = torch.Generator().manual_seed(3)
    params = list(model.parameters())
    for _ in range(5):
        dirs = [torch.randn(p.shape, generator=rng, dtype=torch.float64) for p in params]
        analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs))
        h = 1e-6
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
            fp = float((model(x) * w).sum())
            for p, d in zip(params, dirs):
                p.sub_(2 * h * d)
            fm = float((model(x) * w).sum())
            for p, d in zip(params, dirs):
                p.add_(h * d)
        numeric = (fp - fm) / (2 * h)
        assert abs(analytic - numeric) / abs(numeric) < 1e-3


@pytest.mark.parametrize("length", [4000, 4001, 777])
def test_separate2_shapes(length):
    torch.manual_seed(0)
    model = CueExtractor(SeparatorConfig.tiny()).eval()
    x = Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, length))
    cue, res = separate2(x, model)
    assert len(cue) == len(res) == length
    assert np.all(np.isfinite(cue.samples)) and np.all(np.isfinite(res.samples))
    cue2, res2 = separate2(x, model)
    assert np.array_equal(cue.samples, cue2.samples) and np.array_equal(res.samples, res2.samples)


def test_separate2_too_short():
    model = CueExtractor(SeparatorConfig.tiny())
    with pytest.raises(GeometryError):
        separate2(Waveform(np.zeros(8)), model)


def test_finite_on_random_inputs():
    torch.manual_seed(0)
    model = CueExtractor(SeparatorConfig.tiny()).eval()
    with torch.no_grad():
        for scale in (1e-6, 1.0, 100.0):
            y = model(scale * torch.randn(2, 1000))
            assert torch.isfinite(y).all()
