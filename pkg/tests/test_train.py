"""Two-stage training: seeding, direction discovery, ablation variants."""

import dataclasses

import numpy as np
import pytest

from clapopt import train
from clapopt.train import (HardSceneDirection, TrainConfig, TrainReport,
                           direction_to_text, directions_from_residuals,
                           discover_direction, explicit_notice, init_prompt,
                           parse_direction, random_directions, report_to_text,
                           train_clap, train_plan_only, train_stage1,
                           train_stage2)

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def tiny(seed=3, **kw):
    base = dict(m=4, n=4, lr=0.03, stage1_epochs=5, stage2_epochs=5,
                k=2, init_seed=seed)
    base.update(kw)
    return TrainConfig(**base)


# --- config and report -------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)
    with pytest.raises(ValueError):
        TrainConfig(k=0)
    with pytest.raises(ValueError):
        TrainConfig(lambda1=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(m=0)
    with pytest.raises(ValueError):
        TrainConfig(w0=0.0)


def test_report_text_excludes_wall_clock():
    cfg = tiny()
    a = TrainReport("stage1", cfg, {"supcon": [1.0, 0.5]}, wall_clock=1.23)
    b = TrainReport("stage1", cfg, {"supcon": [1.0, 0.5]}, wall_clock=99.0)
    assert report_to_text(a) == report_to_text(b)
    assert "wall" not in report_to_text(a)


def test_report_rejects_ragged_traces():
    with pytest.raises(ValueError):
        TrainReport("stage2", tiny(), {"plan": [1.0], "dir": [1.0, 2.0]}, 0.0)


# --- stage 1 -----------------------------------------------------------

def test_stage1_is_deterministic(weights, small_dataset):
    cfg = tiny()
    pa1, rep1 = train_stage1(weights, small_dataset.train_frames, cfg)
    pa2, rep2 = train_stage1(weights, small_dataset.train_frames, cfg)
    np.testing.assert_array_equal(pa1, pa2)
    assert report_to_text(rep1) == report_to_text(rep2)
    pa3, _ = train_stage1(weights, small_dataset.train_frames, tiny(seed=4))
    assert not np.array_equal(pa1, pa3)


def test_stage1_zero_epochs_returns_init(weights, small_dataset):
    cfg = tiny(stage1_epochs=0)
    pa, report = train_stage1(weights, small_dataset.train_frames, cfg)
    expected = init_prompt(cfg.m, weights.config.d_model, cfg.init_seed,
                           train.STREAM_PA)
    np.testing.assert_array_equal(pa, expected)
    assert report.losses["supcon"] == []


def test_stage1_loss_decreases(weights, small_dataset):
    _, report = train_stage1(weights, small_dataset.train_frames,
                             tiny(stage1_epochs=20))
    trace = report.losses["supcon"]
    assert trace[-1] < trace[0]


def test_stage1_needs_labeled_frames(weights, small_dataset):
    normal_only = [f for f in small_dataset.train_frames if f.difficulty == "normal"]
    with pytest.raises(ValueError):
        train_stage1(weights, normal_only, tiny())


def test_full_batch_equals_large_batch_size(weights, small_dataset):
    frames = small_dataset.train_frames
    pa_full, _ = train_stage1(weights, frames, tiny())
    pa_big, _ = train_stage1(weights, frames, tiny(batch_size=len(frames) + 5))
    np.testing.assert_array_equal(pa_full, pa_big)


# --- direction discovery ------------------------------------------------

def test_directions_from_rank_one_residuals():
    rng = np.random.default_rng(21)
    u = rng.normal(size=8)
    u /= np.linalg.norm(u)
    scales = rng.uniform(0.5, 2.0, size=12)
    residuals = np.outer(scales, u)
    d = directions_from_residuals(residuals, 1)
    np.testing.assert_allclose(np.abs(d.directions[0] @ u), 1.0, atol=1e-12)
    # positive scales make the mean residual point along +u
    assert d.directions[0] @ u > 0
    np.testing.assert_allclose(d.singular_values[0],
                               np.linalg.norm(scales), atol=1e-12)


def test_directions_sign_convention():
    rng = np.random.default_rng(22)
    residuals = rng.normal(size=(15, 8))
    d = directions_from_residuals(residuals, 3)
    mean_r = residuals.mean(axis=0)
    for row in d.directions:
        assert mean_r @ row >= 0.0


def test_directions_orthonormal_and_descending():
    rng = np.random.default_rng(23)
    d = directions_from_residuals(rng.normal(size=(20, 10)), 4)
    np.testing.assert_allclose(d.directions @ d.directions.T, np.eye(4),
                               atol=1e-10)
    assert (np.diff(d.singular_values) <= 0).all()


def test_directions_rank_deficient_raises():
    residuals = np.outer(np.arange(1.0, 5.0), np.ones(6))
    with pytest.raises(ValueError):
        directions_from_residuals(residuals, 2)


def test_discover_direction_needs_enough_frames(weights, small_dataset):
    hard = [f for f in small_dataset.train_frames if f.difficulty == "challenging"]
    pa = init_prompt(4, weights.config.d_model, 0, train.STREAM_PA)
    with pytest.raises(ValueError):
        discover_direction(weights, pa, hard[:2] , 3, 1)  # k > hard count after split
    with pytest.raises(ValueError):
        discover_direction(weights, pa, hard, 2, 1)  # no normal baseline


def test_discover_direction_deterministic(weights, small_dataset):
    pa = init_prompt(4, weights.config.d_model, 5, train.STREAM_PA)
    d1 = discover_direction(weights, pa, small_dataset.train_frames, 2, 1)
    d2 = discover_direction(weights, pa, small_dataset.train_frames, 2, 1)
    np.testing.assert_array_equal(d1.directions, d2.directions)
    assert d1.sign_convention == "mean-residual-nonnegative"


def test_random_directions_orthonormal_and_seeded():
    a = random_directions(16, 3, seed=9)
    b = random_directions(16, 3, seed=9)
    c = random_directions(16, 3, seed=10)
    np.testing.assert_array_equal(a.directions, b.directions)
    assert not np.array_equal(a.directions, c.directions)
    np.testing.assert_allclose(a.directions @ a.directions.T, np.eye(3),
                               atol=1e-12)
    assert a.sign_convention == "random"


def test_direction_text_round_trip():
    rng = np.random.default_rng(24)
    d = directions_from_residuals(rng.normal(size=(10, 6)), 2)
    text = direction_to_text(d)
    back = parse_direction(text)
    np.testing.assert_array_equal(back.directions, d.directions)
    np.testing.assert_array_equal(back.singular_values, d.singular_values)
    assert direction_to_text(back) == text
    with pytest.raises(ValueError):
        parse_direction("clap-direction v0\n")


# --- stage 2 -----------------------------------------------------------

def test_stage2_deterministic(weights, small_dataset):
    cfg = tiny()
    pa, _ = train_stage1(weights, small_dataset.train_frames, cfg)
    d = discover_direction(weights, pa, small_dataset.train_frames, cfg.k, 1)
    pb1, rep1 = train_stage2(weights, pa, d, small_dataset.train_frames, cfg)
    pb2, rep2 = train_stage2(weights, pa, d, small_dataset.train_frames, cfg)
    np.testing.assert_array_equal(pb1, pb2)
    assert report_to_text(rep1) == report_to_text(rep2)


def test_stage2_traces_have_all_terms(weights, small_dataset):
    cfg = tiny()
    pa, _ = train_stage1(weights, small_dataset.train_frames, cfg)
    d = discover_direction(weights, pa, small_dataset.train_frames, cfg.k, 1)
    _, report = train_stage2(weights, pa, d, small_dataset.train_frames, cfg)
    assert sorted(report.losses) == ["dir", "plan", "reg", "total"]
    for name, trace in report.losses.items():
        assert len(trace) == cfg.stage2_epochs


def test_stage2_without_direction_zeroes_dir_trace(weights, small_dataset):
    cfg = tiny()
    pa, _ = train_stage1(weights, small_dataset.train_frames, cfg)
    _, report = train_stage2(weights, pa, None, small_dataset.train_frames, cfg)
    assert report.losses["dir"] == [0.0] * cfg.stage2_epochs


def test_stage2_requires_challenging(weights, small_dataset):
    normal_only = [f for f in small_dataset.train_frames if f.difficulty == "normal"]
    pa = init_prompt(4, weights.config.d_model, 0, train.STREAM_PA)
    with pytest.raises(ValueError):
        train_stage2(weights, pa, None, normal_only, tiny())


def test_stage2_warns_without_normal(weights, small_dataset, caplog):
    hard_only = [f for f in small_dataset.train_frames
                 if f.difficulty == "challenging"]
    pa = init_prompt(4, weights.config.d_model, 0, train.STREAM_PA)
    with caplog.at_level("WARNING"):
        train_stage2(weights, pa, None, hard_only, tiny(stage2_epochs=1))
    assert any("normal" in r.message for r in caplog.records)


def test_plan_only_matches_degenerate_stage2(weights, small_dataset):
    """lambda1 = lambda2 = 0 without a direction is plan-loss-only
    training; both code paths must produce the same prompt step for step."""
    cfg = tiny(lambda1=0.0, lambda2=0.0)
    pa, _ = train_stage1(weights, small_dataset.train_frames, cfg)
    pb_a, rep_a = train_stage2(weights, pa, None, small_dataset.train_frames, cfg)
    pb_b, rep_b = train_plan_only(weights, pa, small_dataset.train_frames, cfg)
    np.testing.assert_array_equal(pb_a, pb_b)
    assert rep_a.losses["plan"] == rep_b.losses["plan"]


# --- variants and helpers -----------------------------------------------

def test_train_clap_variants(weights, small_dataset):
    cfg = tiny(stage1_epochs=2, stage2_epochs=2)
    full = train_clap(weights, small_dataset.train_frames, cfg, variant="full")
    assert full.direction is not None
    assert full.direction.sign_convention == "mean-residual-nonnegative"
    rand = train_clap(weights, small_dataset.train_frames, cfg, variant="random_dir")
    assert rand.direction.sign_convention == "random"
    nodir = train_clap(weights, small_dataset.train_frames, cfg, variant="no_dir")
    assert nodir.direction is None
    # stage 1 is shared: P_A identical across variants
    np.testing.assert_array_equal(full.prompt_pair.prompt_a,
                                  rand.prompt_pair.prompt_a)
    with pytest.raises(ValueError):
        train_clap(weights, small_dataset.train_frames, cfg, variant="bogus")


def test_explicit_notice_appends_tokens(small_dataset):
    f = small_dataset.train_frames[0]
    out = explicit_notice(f, (7, 11))
    assert out.instruction_tokens == f.instruction_tokens + (7, 11)
    np.testing.assert_array_equal(out.visual_features, f.visual_features)
    assert explicit_notice(f, ()) is f


def test_init_prompt_streams_independent():
    a = init_prompt(4, 8, 0, train.STREAM_PA)
    b = init_prompt(4, 8, 0, train.STREAM_PB)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, init_prompt(4, 8, 0, train.STREAM_PA))
