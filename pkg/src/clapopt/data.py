"""Frames, per-roadblock datasets, condition shifts, and their text format.

A frame is one driving observation: ego pose, a fixed-width visual feature
vector, an instruction token sequence, the ground-truth trajectory, and the
difficulty/taxonomy labels the partitioning pipeline assigns (or the
generator plants). Datasets are stored as line-delimited text so round
trips are exact; see DATASET_SCHEMA below.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .planner import Trajectory
from .textio import atomic_write_text, fmt_float, read_text

DIFFICULTIES = ("challenging", "normal", "unlabeled")
DATASET_SCHEMA = "clap-dataset v1"


@dataclass(frozen=True)
class EgoPose:
    x: float
    y: float
    heading: float  # radians
    speed: float    # m/s


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: int
    roadblock_id: str
    route_id: int
    time_index: int
    ego_pose: EgoPose
    visual_features: np.ndarray
    instruction_tokens: tuple
    gt_trajectory: Trajectory
    difficulty: str = "unlabeled"
    taxonomy: str | None = None

    def __post_init__(self) -> None:
        feats = np.asarray(self.visual_features, dtype=np.float64)
        if feats.ndim != 1:
            raise ValueError("visual_features must be a vector")
        if not np.isfinite(feats).all():
            raise ValueError("visual_features must be finite")
        feats.setflags(write=False)
        object.__setattr__(self, "visual_features", feats)
        object.__setattr__(self, "instruction_tokens", tuple(int(t) for t in self.instruction_tokens))
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")

    def with_difficulty(self, difficulty: str, taxonomy: str | None = None) -> "Frame":
        return dataclasses.replace(self, difficulty=difficulty, taxonomy=taxonomy)


@dataclass
class RoadblockDataset:
    roadblock_id: str
    train_frames: list
    test_frames: list

    def __post_init__(self) -> None:
        train_ids = {f.frame_id for f in self.train_frames}
        test_ids = {f.frame_id for f in self.test_frames}
        if train_ids & test_ids:
            raise ValueError("train/test frame ids overlap")
        for route_id, frames in self.routes().items():
            times = [f.time_index for f in frames]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError(f"route {route_id}: time_index not strictly increasing")

    @property
    def frames(self) -> list:
        return self.train_frames + self.test_frames

    def routes(self) -> dict:
        """route_id -> frames of both splits, ordered by time_index."""
        out: dict[int, list] = {}
        for f in self.frames:
            out.setdefault(f.route_id, []).append(f)
        for frames in out.values():
            frames.sort(key=lambda f: f.time_index)
        return dict(sorted(out.items()))

    @property
    def route_index(self) -> dict:
        return {rid: [f.frame_id for f in frames] for rid, frames in self.routes().items()}


@dataclass(frozen=True)
class ConditionShift:
    """Affine feature transform plus optional noise; an appearance change
    that leaves geometry and ground truth untouched."""

    name: str
    scale: np.ndarray
    offset: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        scale = np.asarray(self.scale, dtype=np.float64)
        offset = np.asarray(self.offset, dtype=np.float64)
        if scale.shape != offset.shape or scale.ndim != 1:
            raise ValueError("scale and offset must be vectors of equal length")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "offset", offset)


def identity_shift(feature_dim: int) -> ConditionShift:
    return ConditionShift("identity", np.ones(feature_dim), np.zeros(feature_dim), 0.0)


def rain_shift(feature_dim: int) -> ConditionShift:
    # darker, lower-contrast features with a wet-surface offset pattern
    i = np.arange(feature_dim)
    scale = 0.85 + 0.05 * np.cos(0.5 * i)
    offset = 0.3 * np.sin(0.37 * i + 1.0)
    return ConditionShift("rain", scale, offset, 0.05)


def dusk_shift(feature_dim: int) -> ConditionShift:
    i = np.arange(feature_dim)
    scale = 0.75 + 0.1 * np.sin(0.21 * i)
    offset = -0.2 + 0.1 * np.cos(0.9 * i)
    return ConditionShift("dusk", scale, offset, 0.05)


CONDITION_PRESETS = {"identity": identity_shift, "rain": rain_shift, "dusk": dusk_shift}


def apply_condition_shift(frame: Frame, shift: ConditionShift, seed: int) -> Frame:
    """Transform features only; pose, labels, and ground truth stay put."""
    feats = frame.visual_features
    if shift.scale.shape != feats.shape:
        raise ValueError(
            f"shift dimension {shift.scale.shape} does not match features {feats.shape}"
        )
    out = feats * shift.scale + shift.offset
    if shift.noise_std > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, frame.frame_id]))
        out = out + shift.noise_std * rng.normal(size=feats.shape)
    return dataclasses.replace(frame, visual_features=out)


# -- dataset file format -----------------------------------------------------


def _frame_line(split: str, f: Frame) -> str:
    fields = [
        split,
        str(f.frame_id),
        str(f.route_id),
        str(f.time_index),
        fmt_float(f.ego_pose.x),
        fmt_float(f.ego_pose.y),
        fmt_float(f.ego_pose.heading),
        fmt_float(f.ego_pose.speed),
        f.difficulty,
        f.taxonomy if f.taxonomy is not None else "-",
        ",".join(str(t) for t in f.instruction_tokens),
    ]
    fields.extend(fmt_float(v) for v in f.visual_features)
    fields.extend(fmt_float(v) for v in f.gt_trajectory.waypoints.ravel())
    return " ".join(fields)


def _parse_frame_line(line: str, roadblock_id: str, feature_dim: int):
    parts = line.split(" ")
    split = parts[0]
    if split not in ("train", "test"):
        raise ValueError(f"bad split {split!r}")
    head = 11
    feats = np.array([float(v) for v in parts[head : head + feature_dim]])
    traj_vals = [float(v) for v in parts[head + feature_dim :]]
    traj = Trajectory(np.array(traj_vals).reshape(-1, 2))
    frame = Frame(
        frame_id=int(parts[1]),
        roadblock_id=roadblock_id,
        route_id=int(parts[2]),
        time_index=int(parts[3]),
        ego_pose=EgoPose(float(parts[4]), float(parts[5]), float(parts[6]), float(parts[7])),
        visual_features=feats,
        instruction_tokens=tuple(int(t) for t in parts[10].split(",")) if parts[10] else (),
        gt_trajectory=traj,
        difficulty=parts[8],
        taxonomy=None if parts[9] == "-" else parts[9],
    )
    return split, frame


def write_dataset(dataset: RoadblockDataset, path: str) -> None:
    feature_dim = dataset.frames[0].visual_features.shape[0] if dataset.frames else 0
    lines = [
        DATASET_SCHEMA,
        f"roadblock {dataset.roadblock_id}",
        f"feature_dim {feature_dim}",
        f"frames {len(dataset.frames)}",
    ]
    for split, frames in (("train", dataset.train_frames), ("test", dataset.test_frames)):
        lines.extend(_frame_line(split, f) for f in frames)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_dataset(path: str) -> RoadblockDataset:
    lines = read_text(path).splitlines()
    if not lines or lines[0] != DATASET_SCHEMA:
        raise ValueError(f"{path}: not a {DATASET_SCHEMA} file")
    roadblock_id = lines[1].split(" ", 1)[1]
    feature_dim = int(lines[2].split(" ")[1])
    count = int(lines[3].split(" ")[1])
    train, test = [], []
    for line in lines[4 : 4 + count]:
        split, frame = _parse_frame_line(line, roadblock_id, feature_dim)
        (train if split == "train" else test).append(frame)
    return RoadblockDataset(roadblock_id, train, test)
