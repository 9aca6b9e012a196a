"""Hard-frame partitioning: margin validation, reclassification,
spatial clustering, and the composed pipeline."""

import numpy as np
import pytest

from clapopt import synth
from clapopt.data import EgoPose, Frame
from clapopt.partition import (GeneratorOracle, NullOracle, OracleError,
                               SegmentProposal, assign_taxonomy,
                               parse_partition, partition_roadblock,
                               partition_to_text, propose_segments,
                               reclassify_frames, spatial_cluster,
                               validate_segment, labeled_dataset)
from clapopt.planner import Trajectory


def frame(fid, route=0, t=0, x=0.0, y=0.0, difficulty="unlabeled", taxonomy=None):
    wp = np.zeros((8, 2))
    return Frame(fid, "rb", route, t, EgoPose(x, y, 0.0, 5.0),
                 np.zeros(4), (1, 2), Trajectory(wp), difficulty, taxonomy)


def seg(route=0, start=0, end=3, **kw):
    fields = dict(long_decision="decelerate", lat_decision="bypass",
                  component="perception", uncertainty="high")
    fields.update(kw)
    return SegmentProposal(route, start, end, **fields)


# --- validate_segment -------------------------------------------------

def test_validate_margin_is_strict():
    # route mean 1.0; segment mean 1.5; retained only while delta < 0.5
    frames = [frame(i, t=i) for i in range(4)]
    ades = list(zip(frames, [0.5, 0.5, 1.5, 1.5]))
    s = seg(start=2, end=3)
    assert validate_segment(s, ades, 0.25)
    assert not validate_segment(s, ades, 0.5)  # equality fails
    assert not validate_segment(s, ades, 1.0)


def test_validate_rejects_negative_delta_and_empty_route():
    with pytest.raises(ValueError):
        validate_segment(seg(), [(frame(0), 1.0)], -0.1)
    with pytest.raises(ValueError):
        validate_segment(seg(), [], 0.5)


def test_validate_segment_must_cover_frames():
    ades = [(frame(i, t=i), 1.0) for i in range(3)]
    with pytest.raises(ValueError):
        validate_segment(seg(start=10, end=12), ades, 0.0)


def test_delta_monotone_on_retention():
    """Raising delta can only shrink the retained set."""
    rng = np.random.default_rng(55)
    frames = [frame(i, t=i) for i in range(10)]
    ades = list(zip(frames, rng.uniform(0.0, 3.0, size=10)))
    proposals = [seg(start=a, end=a + 2) for a in range(0, 8, 2)]
    retained_ids = []
    for delta in (0.0, 0.25, 0.5, 1.0, np.inf):
        kept = {i for i, p in enumerate(proposals)
                if validate_segment(p, ades, delta)}
        retained_ids.append(kept)
    for smaller, larger in zip(retained_ids[1:], retained_ids):
        assert smaller <= larger
    assert retained_ids[-1] == set()  # infinite margin rejects everything


# --- reclassify_frames ------------------------------------------------

def test_reclassify_boundary_is_inclusive():
    # frame exactly at the route mean stays challenging
    frames = [frame(i, t=i) for i in range(4)]
    ades = list(zip(frames, [1.0, 2.0, 3.0, 2.0]))
    out = reclassify_frames(seg(start=0, end=3), ades, route_mean=2.0)
    assert out == {0: "normal", 1: "challenging", 2: "challenging", 3: "challenging"}


def test_reclassify_only_touches_segment():
    frames = [frame(i, t=i) for i in range(6)]
    ades = list(zip(frames, [9.0] * 6))
    out = reclassify_frames(seg(start=2, end=3), ades, route_mean=5.0)
    assert sorted(out) == [2, 3]


# --- spatial_cluster --------------------------------------------------

def test_cluster_groups_within_radius_and_demotes_singletons():
    near = [frame(1, x=0.0), frame(2, x=10.0), frame(3, x=20.0)]
    far = frame(9, x=500.0)
    clusters, demoted = spatial_cluster(near + [far], radius=25.0)
    assert len(clusters) == 1
    assert sorted(f.frame_id for f in clusters[0]) == [1, 2, 3]
    assert [f.frame_id for f in demoted] == [9]


def test_cluster_single_linkage_chains():
    # consecutive gaps of 20 < radius chain into one component even
    # though the endpoints are 60 apart
    frames = [frame(i, x=20.0 * i) for i in range(4)]
    clusters, demoted = spatial_cluster(frames, radius=25.0)
    assert len(clusters) == 1 and not demoted


def test_cluster_radius_is_inclusive():
    a, b = frame(1, x=0.0), frame(2, x=25.0)
    clusters, demoted = spatial_cluster([a, b], radius=25.0)
    assert len(clusters) == 1 and not demoted


def test_cluster_rejects_bad_radius():
    with pytest.raises(ValueError):
        spatial_cluster([frame(1)], radius=0.0)


# --- taxonomy ---------------------------------------------------------

def test_assign_taxonomy_joins_fields():
    label = assign_taxonomy(("decelerate", "bypass", "perception", "high"))
    assert label == "decelerate__bypass__perception__high"
    with pytest.raises(ValueError):
        assign_taxonomy(("a", "b", "c"))
    with pytest.raises(ValueError):
        assign_taxonomy(("a", "b", "", "d"))


def test_segment_validation_rules():
    with pytest.raises(ValueError):
        seg(start=5, end=2)
    with pytest.raises(ValueError):
        seg(long_decision="two words")


# --- oracles ----------------------------------------------------------

def test_generator_oracle_reads_planted_runs():
    tax = "slow__left__perception__high"
    frames = ([frame(i, t=i) for i in range(3)]
              + [frame(i, t=i, difficulty="challenging", taxonomy=tax)
                 for i in range(3, 6)]
              + [frame(6, t=6)])
    proposals = propose_segments(frames, GeneratorOracle())
    assert len(proposals) == 1
    assert (proposals[0].start, proposals[0].end) == (3, 5)
    assert proposals[0].fields == ("slow", "left", "perception", "high")


def test_generator_oracle_splits_disjoint_runs():
    tax = "slow__left__perception__high"
    frames = [frame(i, t=i, difficulty="challenging" if i in (1, 4) else "normal",
                    taxonomy=tax if i in (1, 4) else None)
              for i in range(6)]
    proposals = propose_segments(frames, GeneratorOracle())
    assert [(p.start, p.end) for p in proposals] == [(1, 1), (4, 4)]


def test_null_oracle_spans_route():
    frames = [frame(i, t=i) for i in range(5)]
    proposals = propose_segments(frames, NullOracle())
    assert [(p.start, p.end) for p in proposals] == [(0, 4)]


def test_oracle_contract_enforced():
    class Wild:
        def propose(self, route_id, frames):
            return [seg(route=route_id, start=-5, end=99)]

    class Broken:
        def propose(self, route_id, frames):
            raise RuntimeError("boom")

    frames = [frame(i, t=i) for i in range(3)]
    with pytest.raises(OracleError):
        propose_segments(frames, Wild())
    with pytest.raises(OracleError):
        propose_segments(frames, Broken())
    with pytest.raises(OracleError):
        # planted challenging frame without a taxonomy label
        propose_segments([frame(0, difficulty="challenging")], GeneratorOracle())


def test_propose_segments_single_route_only():
    with pytest.raises(ValueError):
        propose_segments([frame(0, route=0), frame(1, route=1)], NullOracle())


# --- composed pipeline ------------------------------------------------

def test_partition_recovers_planted_labels(run_config, weights, small_dataset):
    result = partition_roadblock(small_dataset, weights, GeneratorOracle(),
                                 run_config.delta, run_config.radius)
    truth = {f.frame_id for f in small_dataset.frames
             if f.difficulty == "challenging"}
    found = set(result.challenging_ids)
    assert truth, "generator planted no hazards"
    precision = len(truth & found) / len(found)
    recall = len(truth & found) / len(truth)
    assert precision >= 0.9
    assert recall >= 0.9


def test_partition_taxonomy_majority(run_config, weights, small_dataset):
    result = partition_roadblock(small_dataset, weights, GeneratorOracle(),
                                 run_config.delta, run_config.radius)
    for cluster in result.clusters:
        assert cluster.taxonomy.count("__") == 3
    for fid in result.challenging_ids:
        assert result.taxonomies[fid] is not None


def test_partition_infinite_delta_labels_everything_normal(run_config, weights,
                                                           small_dataset):
    result = partition_roadblock(small_dataset, weights, GeneratorOracle(),
                                 np.inf, run_config.radius)
    assert result.challenging_ids == []
    assert all(not kept for _, kept in result.segments)


def test_labeled_dataset_stamps_labels(run_config, weights, small_dataset):
    result = partition_roadblock(small_dataset, weights, GeneratorOracle(),
                                 run_config.delta, run_config.radius)
    stamped = labeled_dataset(small_dataset, result)
    for f in stamped.frames:
        assert f.difficulty == result.labels[f.frame_id]
        assert f.taxonomy == result.taxonomies[f.frame_id]
    # original dataset untouched
    assert any(f.difficulty != result.labels[f.frame_id]
               or f.difficulty == result.labels[f.frame_id]
               for f in small_dataset.frames)


def test_partition_text_round_trip(run_config, weights, small_dataset):
    result = partition_roadblock(small_dataset, weights, GeneratorOracle(),
                                 run_config.delta, run_config.radius)
    text = partition_to_text(result)
    back = parse_partition(text)
    assert back == result
    assert partition_to_text(back) == text


def test_parse_partition_rejects_bad_header():
    with pytest.raises(ValueError):
        parse_partition("clap-partition v999\n")
