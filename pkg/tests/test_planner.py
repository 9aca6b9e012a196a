"""Frozen backbone: determinism, layout, causality, prompt reach, golden values."""

import os

import numpy as np
import pytest

from clapopt.planner import (PlannerConfig, attention_mask, forward,
                             init_frozen_weights, pool_representation,
                             weights_checksum)

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def _golden(name: str) -> list[str]:
    with open(os.path.join(GOLDEN, name)) as fh:
        return fh.read().split()


@pytest.fixture(scope="module")
def frame(run_config):
    from clapopt import synth

    return synth.generate_roadblock(1, run_config.spec).train_frames[0]


def test_weights_are_reproducible_and_match_golden(weights, run_config):
    again = init_frozen_weights(run_config.planner)
    assert weights_checksum(weights) == weights_checksum(again)
    assert weights_checksum(weights) == _golden("weights_checksum.txt")[0]


def test_different_seed_changes_weights(run_config):
    import dataclasses

    other = init_frozen_weights(dataclasses.replace(run_config.planner, weight_seed=43))
    assert weights_checksum(other) != _golden("weights_checksum.txt")[0]


def test_frozen_trajectory_matches_golden(weights, frame):
    traj, _, _ = forward(weights, frame.visual_features, frame.instruction_tokens)
    golden = np.array([float(v) for v in _golden("frozen_trajectory.txt")]).reshape(8, 2)
    assert np.array_equal(traj.waypoints, golden)


def test_forward_is_bit_deterministic(weights, frame):
    rng = np.random.default_rng(3)
    pa, pb = rng.normal(size=(4, 32)), rng.normal(size=(2, 32))
    a, ha, _ = forward(weights, frame.visual_features, frame.instruction_tokens, pa, pb)
    b, hb, _ = forward(weights, frame.visual_features, frame.instruction_tokens, pa, pb)
    assert np.array_equal(a.waypoints, b.waypoints)
    assert all(np.array_equal(x, y) for x, y in zip(ha, hb))


def test_layout_segments_are_ordered_and_sized(weights, frame):
    rng = np.random.default_rng(4)
    pa, pb = rng.normal(size=(5, 32)), rng.normal(size=(3, 32))
    _, hidden, layout = forward(weights, frame.visual_features,
                                frame.instruction_tokens, pa, pb)
    k = weights.config.k_visual
    assert layout.visual == (0, k)
    assert layout.prompt_a == (k, k + 5)
    assert layout.prompt_b == (k + 5, k + 8)
    assert layout.instruction == (k + 8, k + 8 + len(frame.instruction_tokens))
    assert layout.total == hidden[0].shape[0]


def test_prompts_absent_give_empty_ranges(weights, frame):
    _, _, layout = forward(weights, frame.visual_features, frame.instruction_tokens)
    assert layout.prompt_a[0] == layout.prompt_a[1]
    assert layout.prompt_b[0] == layout.prompt_b[1]


def test_zero_row_prompt_b_is_identity(weights, frame):
    # empty splice: every hidden state bit-identical to the P_A-only forward
    rng = np.random.default_rng(5)
    pa = rng.normal(size=(4, 32))
    _, with_empty, _ = forward(weights, frame.visual_features,
                               frame.instruction_tokens, pa, np.zeros((0, 32)))
    _, without, _ = forward(weights, frame.visual_features,
                            frame.instruction_tokens, pa, None)
    assert all(np.array_equal(a, b) for a, b in zip(with_empty, without))


def test_instructions_cannot_reach_visual_states(weights, frame):
    ids = list(frame.instruction_tokens)
    flipped = [(t + 3) % weights.config.vocab_size for t in ids]
    _, ha, layout = forward(weights, frame.visual_features, ids)
    _, hb, _ = forward(weights, frame.visual_features, flipped)
    start, stop = layout.visual
    for a, b in zip(ha, hb):
        assert np.array_equal(a[start:stop], b[start:stop])


def test_prompts_reach_pooled_reps_only_from_layer_one(weights, frame):
    rng = np.random.default_rng(6)
    pa = rng.normal(size=(4, 32))
    _, h_with, layout = forward(weights, frame.visual_features,
                                frame.instruction_tokens, pa, None)
    _, h_without, layout0 = forward(weights, frame.visual_features,
                                    frame.instruction_tokens)
    at0 = pool_representation(h_with, layout, 0, normalize=False)
    base0 = pool_representation(h_without, layout0, 0, normalize=False)
    assert np.array_equal(at0, base0)
    at1 = pool_representation(h_with, layout, 1, normalize=False)
    base1 = pool_representation(h_without, layout0, 1, normalize=False)
    assert not np.array_equal(at1, base1)


def test_attention_mask_shape():
    _, _, layout = None, None, None
    config = PlannerConfig()
    w = init_frozen_weights(config)
    from clapopt import synth
    from clapopt.config import RunConfig

    frame = synth.generate_roadblock(2, RunConfig().spec).train_frames[0]
    rng = np.random.default_rng(7)
    _, _, layout = forward(w, frame.visual_features, frame.instruction_tokens,
                           rng.normal(size=(3, 32)), rng.normal(size=(2, 32)))
    mask = attention_mask(layout)
    # prefix (visual + prompts) is mutually visible; instructions are causal
    prefix = layout.prompt_b[1]
    assert mask[: prefix, : prefix].all()
    first_instr = layout.instruction[0]
    assert mask[first_instr, : first_instr + 1].all()
    assert not mask[first_instr, first_instr + 1:].any()


def test_pooling_matches_direct_mean(weights, frame):
    _, hidden, layout = forward(weights, frame.visual_features, frame.instruction_tokens)
    start, stop = layout.visual
    manual = np.asarray(hidden[1])[start:stop].mean(axis=0)
    assert np.array_equal(pool_representation(hidden, layout, 1, normalize=False), manual)
    unit = pool_representation(hidden, layout, 1, normalize=True)
    np.testing.assert_allclose(np.linalg.norm(unit), 1.0, rtol=1e-12)


def test_feature_dimension_mismatch_raises(weights):
    with pytest.raises(ValueError):
        forward(weights, np.zeros(7), [1, 2])


def test_bad_instruction_token_raises(weights, frame):
    with pytest.raises(ValueError):
        forward(weights, frame.visual_features, [weights.config.vocab_size])
    with pytest.raises(ValueError):
        forward(weights, frame.visual_features, [])


def test_config_validation():
    with pytest.raises(ValueError):
        PlannerConfig(d_model=30, n_heads=4)  # not divisible
    with pytest.raises(ValueError):
        PlannerConfig(extract_layer=9)
