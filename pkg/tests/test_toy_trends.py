"""Directional checks on the shared toy system (see toy_system.py)."""

import numpy as np
import pytest

from corfsep.extractor import ConditionedConfig, build_target_extractor, make_cue_pairs, pair_scores, train_stage2
from corfsep.metrics import si_snr
from corfsep.separator import SeparatorConfig
from corfsep.training import build_cue_extractor

from toy_system import STAGE2_LR, train_cfg

pytestmark = pytest.mark.slow


def iteration_scores(stage1, examples, terminal="pass"):
    pairs = make_cue_pairs(stage1, examples, terminal=terminal)
    it = np.array([p.iteration for p in pairs])
    scores = np.array([si_snr(p.cue, p.ref) for p in pairs])
    return {j: float(scores[it == j].mean()) for j in (1, 2, 3)}


def test_finetuning_helps_second_iteration(toy_system):
    held_out = toy_system.examples("test", 3)
    before = iteration_scores(build_cue_extractor(toy_system.stage1_base), held_out)
    after = iteration_scores(build_cue_extractor(toy_system.stage1), held_out)
    assert after[2] >= before[2]


def test_stage2_overfits_past_cues_within_200_steps(toy_system):
    # toy-overfit check: a few mixtures, scored on their own training pairs
    stage1 = build_cue_extractor(toy_system.stage1)
    few = toy_system.examples("train", 3)[:8]
    cond = ConditionedConfig.odd_blocks(SeparatorConfig.tiny(num_outputs=1))
    ckpt = train_stage2(toy_system.stage1, few, train_cfg(200, STAGE2_LR), cond, warm=True, terminal="residual")
    pairs = make_cue_pairs(stage1, few, terminal="residual")
    fine = pair_scores(build_target_extractor(ckpt), pairs).mean()
    coarse = np.mean([si_snr(p.cue, p.ref) for p in pairs])
    assert fine > coarse
