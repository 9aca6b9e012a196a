"""Hard-frame identification pipeline.

Turns a roadblock's routes into per-frame challenging/normal labels in
four steps: segment proposals from a pluggable oracle, empirical
margin validation against the frozen planner's errors, per-frame
reclassification, and spatial-coherence clustering with taxonomy
labels.
"""

from __future__ import annotations

import dataclasses
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import Frame, RoadblockDataset
from .evaluation import ade
from .planner import PlannerWeights, forward
from .textio import atomic_write_text, fmt_float, read_text

PARTITION_SCHEMA = "clap-partition v1"
DEFAULT_DELTA = 0.5
DEFAULT_RADIUS = 25.0

TAXONOMY_FIELDS = ("long_decision", "lat_decision", "component", "uncertainty")


class OracleError(RuntimeError):
    """A segment oracle failed or produced out-of-contract proposals."""


@dataclass(frozen=True)
class SegmentProposal:
    """Route-level temporal segment suspected to be challenging."""

    route_id: int
    start: int  # time_index, inclusive
    end: int    # time_index, inclusive
    long_decision: str
    lat_decision: str
    component: str
    uncertainty: str
    note: str = ""

    def __post_init__(self) -> None:
        if self.start > self.end:
            raise ValueError(f"segment start {self.start} > end {self.end}")
        for name in TAXONOMY_FIELDS:
            value = getattr(self, name)
            if not value or any(ch.isspace() for ch in value):
                raise ValueError(f"taxonomy field {name!r} missing or has whitespace")

    @property
    def fields(self) -> tuple[str, str, str, str]:
        return (self.long_decision, self.lat_decision, self.component, self.uncertainty)

    def covers(self, frame: Frame) -> bool:
        return frame.route_id == self.route_id and self.start <= frame.time_index <= self.end


@dataclass(frozen=True)
class SpatialCluster:
    frame_ids: tuple[int, ...]
    centroid: tuple[float, float]
    taxonomy: str

    def __post_init__(self) -> None:
        if not self.frame_ids:
            raise ValueError("empty cluster")
        if tuple(sorted(self.frame_ids)) != self.frame_ids:
            raise ValueError("cluster frame_ids must be sorted")


@dataclass(frozen=True)
class PartitionResult:
    roadblock_id: str
    delta: float
    radius: float
    # (proposal, retained flag) for every oracle proposal, audit trail
    segments: tuple[tuple[SegmentProposal, bool], ...]
    clusters: tuple[SpatialCluster, ...]
    # frame_id -> "challenging" | "normal"
    labels: dict[int, str]
    # frame_id -> cluster taxonomy for challenging frames, None otherwise
    taxonomies: dict[int, str | None]

    def __post_init__(self) -> None:
        challenging = {fid for fid, d in self.labels.items() if d == "challenging"}
        clustered: set[int] = set()
        for c in self.clusters:
            overlap = clustered & set(c.frame_ids)
            if overlap:
                raise ValueError(f"frames {sorted(overlap)} appear in two clusters")
            clustered |= set(c.frame_ids)
        if clustered != challenging:
            raise ValueError("challenging frames and cluster members disagree")
        for fid, d in self.labels.items():
            if d not in ("challenging", "normal"):
                raise ValueError(f"frame {fid}: bad difficulty {d!r}")
            has_tax = self.taxonomies.get(fid) is not None
            if (d == "challenging") != has_tax:
                raise ValueError(f"frame {fid}: taxonomy/difficulty mismatch")

    @property
    def challenging_ids(self) -> list[int]:
        return sorted(fid for fid, d in self.labels.items() if d == "challenging")


class GeneratorOracle:
    """Reads the generator's planted difficulty runs off the frames.

    Stands in for the semantic proposal model; downstream validation and
    clustering never look at the planted labels.
    """

    def propose(self, route_id: int, frames: list) -> list[SegmentProposal]:
        proposals = []
        run: list[Frame] = []
        for f in list(frames) + [None]:
            if f is not None and f.difficulty == "challenging":
                run.append(f)
                continue
            if run:
                fields = _taxonomy_fields(run[0].taxonomy)
                proposals.append(SegmentProposal(
                    route_id, run[0].time_index, run[-1].time_index, *fields,
                    note="planted hazard run"))
                run = []
        return proposals


class NullOracle:
    """One segment spanning the whole route; no semantic signal at all."""

    def __init__(self, fields: tuple[str, str, str, str] = ("unknown", "unknown", "unknown", "low")):
        self.fields = tuple(fields)

    def propose(self, route_id: int, frames: list) -> list[SegmentProposal]:
        if not frames:
            return []
        return [SegmentProposal(route_id, frames[0].time_index, frames[-1].time_index,
                                *self.fields, note="whole route")]


def _taxonomy_fields(label: str | None) -> tuple[str, str, str, str]:
    if label is None:
        raise OracleError("frame carries no taxonomy label")
    parts = tuple(label.split("__"))
    if len(parts) != 4 or not all(parts):
        raise OracleError(f"taxonomy {label!r} does not have 4 fields")
    return parts


def propose_segments(frames: list, oracle) -> list[SegmentProposal]:
    """Run the oracle on one route and check its output against bounds."""
    if not frames:
        return []
    route_id = frames[0].route_id
    if any(f.route_id != route_id for f in frames):
        raise ValueError("propose_segments expects frames of a single route")
    times = sorted(f.time_index for f in frames)
    try:
        proposals = list(oracle.propose(route_id, sorted(frames, key=lambda f: f.time_index)))
    except OracleError:
        raise
    except Exception as exc:
        raise OracleError(f"segment oracle failed on route {route_id}: {exc}") from exc
    for p in proposals:
        if p.route_id != route_id:
            raise OracleError(f"proposal route {p.route_id} != route {route_id}")
        if p.start < times[0] or p.end > times[-1]:
            raise OracleError(
                f"proposal [{p.start}, {p.end}] outside route span [{times[0]}, {times[-1]}]")
    return proposals


def _segment_frames(segment: SegmentProposal, route_ades: list) -> list:
    frames = [f for f, _ in route_ades]
    if any(f.route_id != segment.route_id for f in frames):
        raise ValueError(f"segment route {segment.route_id} does not match route frames")
    inside = [(f, a) for f, a in route_ades if segment.start <= f.time_index <= segment.end]
    if not inside:
        raise ValueError(
            f"segment [{segment.start}, {segment.end}] covers no frame of route {segment.route_id}")
    return inside


def validate_segment(segment: SegmentProposal, route_ades: list, delta: float) -> bool:
    """Empirical margin test: mean segment ADE > mean route ADE + delta.

    ``route_ades`` is [(frame, frozen_ade)] for the whole route.
    """
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if not route_ades:
        raise ValueError("empty route")
    inside = _segment_frames(segment, route_ades)
    seg_mean = float(np.mean([a for _, a in inside]))
    route_mean = float(np.mean([a for _, a in route_ades]))
    return seg_mean > route_mean + delta


def reclassify_frames(segment: SegmentProposal, route_ades: list, route_mean: float) -> dict:
    """Per-frame second pass inside a retained segment.

    A frame stays challenging iff its ADE >= route mean; strictly below
    demotes to normal.
    """
    inside = _segment_frames(segment, route_ades)
    return {f.frame_id: ("challenging" if a >= route_mean else "normal") for f, a in inside}


def spatial_cluster(frames: list, radius: float) -> tuple[list, list]:
    """Single-linkage clusters of challenging frames by ego position.

    Frames within ``radius`` meters are connected; clusters are the
    connected components. Singletons are scattered outliers: returned
    separately for demotion.
    """
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    frames = sorted(frames, key=lambda f: f.frame_id)
    n = len(frames)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pos = np.array([[f.ego_pose.x, f.ego_pose.y] for f in frames], dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            if np.hypot(*(pos[i] - pos[j])) <= radius:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj
    groups: dict[int, list] = {}
    for i, f in enumerate(frames):
        groups.setdefault(find(i), []).append(f)
    clusters = sorted((g for g in groups.values() if len(g) > 1),
                      key=lambda g: g[0].frame_id)
    demoted = sorted((g[0] for g in groups.values() if len(g) == 1),
                     key=lambda f: f.frame_id)
    return clusters, demoted


def assign_taxonomy(fields) -> str:
    """Four fields joined by double underscores."""
    fields = tuple(fields)
    if len(fields) != 4:
        raise ValueError(f"need 4 taxonomy fields, got {len(fields)}")
    for name, value in zip(TAXONOMY_FIELDS, fields):
        if not value:
            raise ValueError(f"taxonomy field {name!r} is missing")
    return "__".join(fields)


def _frozen_route_ades(weights: PlannerWeights, frames: list) -> list:
    out = []
    for f in sorted(frames, key=lambda f: f.time_index):
        traj, _, _ = forward(weights, f.visual_features, f.instruction_tokens)
        out.append((f, ade(traj.waypoints, f.gt_trajectory.waypoints)))
    return out


def partition_roadblock(dataset: RoadblockDataset, weights: PlannerWeights, oracle,
                        delta: float = DEFAULT_DELTA,
                        radius: float = DEFAULT_RADIUS) -> PartitionResult:
    """Compose the four steps over every route of the roadblock."""
    labels = {f.frame_id: "normal" for f in dataset.frames}
    frame_fields: dict[int, tuple] = {}
    all_segments: list[tuple[SegmentProposal, bool]] = []
    by_id = {f.frame_id: f for f in dataset.frames}

    for route_id, frames in dataset.routes().items():
        route_ades = _frozen_route_ades(weights, frames)
        route_mean = float(np.mean([a for _, a in route_ades]))
        for seg in propose_segments(frames, oracle):
            retained = validate_segment(seg, route_ades, delta)
            all_segments.append((seg, retained))
            if not retained:
                continue
            for fid, difficulty in reclassify_frames(seg, route_ades, route_mean).items():
                if difficulty == "challenging" and fid not in frame_fields:
                    labels[fid] = "challenging"
                    frame_fields[fid] = seg.fields

    challenging = [by_id[fid] for fid, d in sorted(labels.items()) if d == "challenging"]
    groups, demoted = spatial_cluster(challenging, radius)
    for f in demoted:
        labels[f.frame_id] = "normal"
        frame_fields.pop(f.frame_id, None)

    clusters = []
    taxonomies: dict[int, str | None] = {fid: None for fid in labels}
    for g in groups:
        votes = Counter(frame_fields[f.frame_id] for f in g)
        top = max(votes.values())
        fields = sorted(k for k, v in votes.items() if v == top)[0]
        label = assign_taxonomy(fields)
        ids = tuple(sorted(f.frame_id for f in g))
        cx = float(np.mean([f.ego_pose.x for f in g]))
        cy = float(np.mean([f.ego_pose.y for f in g]))
        clusters.append(SpatialCluster(ids, (cx, cy), label))
        for fid in ids:
            taxonomies[fid] = label

    return PartitionResult(dataset.roadblock_id, float(delta), float(radius),
                           tuple(all_segments), tuple(clusters), labels, taxonomies)


def labeled_dataset(dataset: RoadblockDataset, result: PartitionResult) -> RoadblockDataset:
    """Dataset with the partition's labels stamped onto every frame."""

    def relabel(frames):
        out = []
        for f in frames:
            if f.frame_id not in result.labels:
                raise KeyError(f"frame {f.frame_id} missing from partition result")
            out.append(f.with_difficulty(result.labels[f.frame_id],
                                         result.taxonomies[f.frame_id]))
        return out

    return RoadblockDataset(dataset.roadblock_id, relabel(dataset.train_frames),
                            relabel(dataset.test_frames))


def partition_to_text(result: PartitionResult) -> str:
    lines = [PARTITION_SCHEMA,
             f"roadblock {result.roadblock_id}",
             f"delta {fmt_float(result.delta)}",
             f"radius {fmt_float(result.radius)}",
             f"segments {len(result.segments)}"]
    for seg, retained in result.segments:
        flag = "retained" if retained else "rejected"
        note = seg.note if seg.note else "-"
        lines.append(f"segment {seg.route_id} {seg.start} {seg.end} {flag} "
                     f"{seg.long_decision} {seg.lat_decision} {seg.component} "
                     f"{seg.uncertainty} {note}")
    lines.append(f"clusters {len(result.clusters)}")
    for c in result.clusters:
        ids = " ".join(str(i) for i in c.frame_ids)
        lines.append(f"cluster {c.taxonomy} {fmt_float(c.centroid[0])} "
                     f"{fmt_float(c.centroid[1])} {len(c.frame_ids)} {ids}")
    lines.append(f"labels {len(result.labels)}")
    for fid in sorted(result.labels):
        tax = result.taxonomies[fid]
        lines.append(f"label {fid} {result.labels[fid]} {tax if tax else '-'}")
    return "\n".join(lines) + "\n"


def write_partition(result: PartitionResult, path: str) -> None:
    atomic_write_text(path, partition_to_text(result))


def parse_partition(text: str) -> PartitionResult:
    lines = text.splitlines()
    if not lines or lines[0] != PARTITION_SCHEMA:
        raise ValueError(f"expected header {PARTITION_SCHEMA!r}")
    pos = 1

    def take(keyword: str) -> list[str]:
        nonlocal pos
        parts = lines[pos].split(" ")
        if parts[0] != keyword:
            raise ValueError(f"line {pos + 1}: expected {keyword!r}, got {parts[0]!r}")
        pos += 1
        return parts[1:]

    roadblock_id = take("roadblock")[0]
    delta = float(take("delta")[0])
    radius = float(take("radius")[0])
    segments = []
    for _ in range(int(take("segments")[0])):
        p = take("segment")
        note = " ".join(p[8:])
        segments.append((SegmentProposal(int(p[0]), int(p[1]), int(p[2]),
                                         p[4], p[5], p[6], p[7],
                                         note="" if note == "-" else note),
                         p[3] == "retained"))
    clusters = []
    for _ in range(int(take("clusters")[0])):
        p = take("cluster")
        count = int(p[3])
        ids = tuple(int(x) for x in p[4:4 + count])
        clusters.append(SpatialCluster(ids, (float(p[1]), float(p[2])), p[0]))
    labels: dict[int, str] = {}
    taxonomies: dict[int, str | None] = {}
    for _ in range(int(take("labels")[0])):
        p = take("label")
        fid = int(p[0])
        labels[fid] = p[1]
        taxonomies[fid] = None if p[2] == "-" else p[2]
    return PartitionResult(roadblock_id, delta, radius, tuple(segments),
                           tuple(clusters), labels, taxonomies)


def read_partition(path: str) -> PartitionResult:
    return parse_partition(read_text(path))
