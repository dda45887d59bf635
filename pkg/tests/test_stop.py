import numpy as np
import pytest
import torch

from corfsep.audio_io import Waveform
from corfsep.checkpoint import from_module
from corfsep.separator import CueExtractor, SeparatorConfig
from corfsep.stop import (
    CONTINUE,
    STOP,
    StopClassifier,
    StopClassifierConfig,
    build_stop_classifier,
    residual_training_data,
    should_continue,
    train_stop_classifier,
)
from corfsep.training import TrainingError

TINY = SeparatorConfig.tiny()


@pytest.fixture(scope="module")
def stage1_ckpt():
    torch.manual_seed(0)
    return from_module("stage1", {"separator": TINY.to_dict()}, CueExtractor(TINY).eval())


def test_threshold_validation():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            StopClassifierConfig(threshold=bad)


def test_residual_labels(stage1_ckpt):
    from corfsep.training import build_cue_extractor

    rng = np.random.default_rng(0)
    mixes = [(rng.standard_normal(800), k) for k in (1, 2, 3, 4)]
    data = residual_training_data(build_cue_extractor(stage1_ckpt), mixes, max_depth=3)
    labels = [y for _, y in data]
    # one residual per pass up to min(k, depth); over-extracted residuals are STOP
    assert labels == [STOP] + [STOP, STOP] + [CONTINUE, STOP, STOP] + [CONTINUE, CONTINUE, STOP] + [STOP]
    assert np.all(data[-1][0] == 0)


def test_encoder_frozen_and_shared(stage1_ckpt):
    from corfsep.training import build_cue_extractor

    rng = np.random.default_rng(1)
    data = [(rng.standard_normal(800) * (1 + y), y) for y in [0, 1] * 10]
    ck = train_stop_classifier(data, StopClassifierConfig(epochs=5), stage1_ckpt)
    model = build_stop_classifier(ck)
    s1 = build_cue_extractor(stage1_ckpt)
    for a, b in zip(model.encoder.parameters(), s1.encoder.parameters()):
        assert torch.equal(a, b)
        assert not a.requires_grad
    assert ck.meta["stage1_digest"] == stage1_ckpt.digest()


def test_single_class_rejected(stage1_ckpt):
    with pytest.raises(TrainingError):
        train_stop_classifier([(np.ones(100), STOP)] * 3, StopClassifierConfig(), stage1_ckpt)


def test_learns_separable_task(stage1_ckpt):
    # one tone (STOP) vs a sum of two tones (CONTINUE)
    rng = np.random.default_rng(2)
    t = np.arange(1600) / 8000

    def tone():
        return np.sin(2 * np.pi * rng.uniform(200, 700) * t)

    data = [(tone(), STOP) for _ in range(30)] + [(tone() + tone() + tone(), CONTINUE) for _ in range(30)]
    ck = train_stop_classifier(data, StopClassifierConfig(epochs=200), stage1_ckpt)
    assert ck.train_state["train_accuracy"] >= 0.8


def test_silence_always_stop(stage1_ckpt):
    model = StopClassifier(TINY, 8)
    with torch.no_grad():
        model.head[-1].bias.copy_(torch.tensor([-50.0, 50.0]))
    go, conf = should_continue(Waveform(np.zeros(4000)), model)
    assert (go, conf) == (False, 1.0)
    assert should_continue(Waveform(0.1 * np.ones(4000)), model)[0]


def test_threshold_semantics():
    model = StopClassifier(TINY, 8, threshold=0.5)
    with torch.no_grad():
        model.head[-1].weight.zero_()
        model.head[-1].bias.copy_(torch.tensor([0.0, np.log(3.0)]))  # p(continue) = 0.75
    x = Waveform(np.random.default_rng(0).standard_normal(2000))
    assert should_continue(x, model) == (True, pytest.approx(0.75))
    assert should_continue(x, model, threshold=0.8) == (False, pytest.approx(0.25))


def test_threshold_zero_always_continues(stage1_ckpt):
    model = StopClassifier(TINY, 8)
    rng = np.random.default_rng(1)
    for x in (rng.standard_normal(2000), 0.01 * np.ones(900), np.zeros(500)):
        assert should_continue(Waveform(x), model, threshold=0.0)[0]
