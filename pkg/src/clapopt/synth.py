"""Synthetic roadblock generator.

Each roadblock is a feature cluster (a point on a sphere plus isotropic
per-frame noise) traversed by a few straight parallel routes. Features
also carry the ego speed along a fixed global channel, the way real
visual features encode it through flow. A contiguous strip of each route
carries a hazard, written into the features as two parts: a
side-independent presence signature on a second global channel
("construction ahead"), and a signed component along the per-roadblock
hazard direction whose sign matches the bypass side of the ground truth
(routes alternate sides). Tying the bypass side to the feature sign
matters: a prompt can only fix hard frames by reading the hazard
feature, never by biasing every trajectory the same way. The hazard
components are deliberately small relative to the noise so hard and
normal frames intermix in feature space, while different roadblocks stay
trivially separable.

Everything is a pure function of (seed, spec); the PRNG draw order is fixed
and documented in generate_roadblock.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import EgoPose, Frame, RoadblockDataset
from .planner import Trajectory

# fixed unit probes mapping feature vectors onto scalar teacher parameters;
# distinct frequencies keep the channels near-orthogonal (one frequency's
# phase family only spans two dimensions)
def _probe(feature_dim: int, phase: float, freq: float = 0.7) -> np.ndarray:
    v = np.cos(phase + freq * np.arange(feature_dim))
    return v / np.sqrt((v * v).sum())


def speed_channel(feature_dim: int) -> np.ndarray:
    """Unit direction along which features encode ego speed."""
    return _probe(feature_dim, 0.0, 1.9)


def presence_channel(feature_dim: int) -> np.ndarray:
    """Unit direction of the side-independent hazard-presence signature."""
    return _probe(feature_dim, 0.0, 2.3)


@dataclass(frozen=True)
class RoadblockSpec:
    roadblock_id: str = "rb00"
    index: int = 0              # distinguishes sibling roadblocks in one suite
    n_routes: int = 3
    frames_per_route: int = 13
    hard_start: int = 4         # first hazard time index
    hard_len: int = 4
    feature_dim: int = 24
    center_radius: float = 3.0
    noise_std: float = 0.5
    hazard_magnitude: float = 0.6
    # kept below the planner's 6 m/s prior so the hazard deceleration
    # always moves hazard frames further from the prior, never toward it
    speed_min: float = 5.0
    speed_max: float = 6.0
    speed_ref: float = 5.5          # speed reading is centered here
    speed_feature_gain: float = 1.0  # feature units per m/s
    presence_magnitude: float = 0.5  # side-independent hazard signature
    origin: tuple = (0.0, 0.0)
    heading: float = 0.0
    lane_spacing: float = 4.0
    dt: float = 0.5
    l_instr: int = 4
    vocab_size: int = 64
    waypoint_count: int = 8
    decel_factor: float = 0.85  # hazard branch speed multiplier
    lateral_amp: float = 1.5    # bypass offset at the horizon, per 6 m/s
    curvature_gain: float = 0.15
    gt_jitter: float = 0.2
    taxonomy_base: str = "speed_adapt__nudge_out__odd_construction"

    def __post_init__(self) -> None:
        if self.hard_len < 0 or self.hard_start < 0:
            raise ValueError("hazard segment indices must be non-negative")
        if self.hard_len > 0 and self.hard_start + self.hard_len > self.frames_per_route:
            raise ValueError("hazard segment exceeds route length")
        if self.n_routes < 1 or self.frames_per_route < 1:
            raise ValueError("need at least one route and one frame")

    def bypass_side(self, route_id: int) -> float:
        # alternate per route which side the bypass arcs toward
        return 1.0 if route_id % 2 == 0 else -1.0

    def taxonomy_label(self, route_id: int) -> str:
        # label tracks the bypass side, so contrastive label weights see
        # two sub-modes per roadblock
        uncertainty = "high" if self.bypass_side(route_id) > 0 else "low"
        return f"{self.taxonomy_base}__{uncertainty}"


def _smoothstep(s: np.ndarray) -> np.ndarray:
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def teacher_trajectory(
    spec: RoadblockSpec,
    scene_center: np.ndarray,
    frame_noise: np.ndarray,
    hazard_flag: bool,
    speed: float,
    seed: int,
    side: float = 1.0,
) -> Trajectory:
    """Ground-truth arc for one frame, in the ego frame (x forward).

    Nominal branch: constant-speed arc with a gentle per-roadblock curvature
    read off the scene center. Hazard branch: decelerate and bypass toward
    ``side``. Every term scales with speed, so speed 0 pins all waypoints
    to the origin. Deterministic in all arguments.
    """
    t = spec.dt * np.arange(1, spec.waypoint_count + 1)
    u1 = _probe(spec.feature_dim, 0.0)
    u2 = _probe(spec.feature_dim, 2.0)

    v = speed * (spec.decel_factor if hazard_flag else 1.0)
    x = v * t
    curvature = spec.curvature_gain * float(scene_center @ u1) / max(spec.center_radius, 1e-9)
    y = curvature * x * x / 40.0
    y = y + spec.gt_jitter * float(frame_noise @ u2) * (t / t[-1]) * (speed / 6.0)
    if hazard_flag:
        y = y + side * spec.lateral_amp * (speed / 6.0) * _smoothstep(t / t[-1])

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    jitter = 0.02 * (speed / 6.0) * rng.normal(size=(spec.waypoint_count, 2))
    return Trajectory(np.stack([x, y], axis=1) + jitter)


def generate_roadblock(seed: int, spec: RoadblockSpec) -> RoadblockDataset:
    """Build one roadblock dataset.

    Draw order from PRNG(SeedSequence([seed, spec.index])): cluster center
    direction, hazard direction, the roadblock's instruction tokens, then
    per route (speed, then per frame: feature noise, trajectory jitter
    seed). Even time indices become train frames, odd become test frames.

    All routes of a roadblock share one instruction sequence. Keeping the
    command constant means prompts cannot key corrections on route
    identity; the hazard feature is the only signal separating hard frames.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, spec.index]))

    center = rng.normal(size=spec.feature_dim)
    center = spec.center_radius * center / np.sqrt((center * center).sum())
    hazard_dir = rng.normal(size=spec.feature_dim)
    hazard_dir = hazard_dir / np.sqrt((hazard_dir * hazard_dir).sum())
    instructions = tuple(int(x) for x in rng.integers(0, spec.vocab_size, spec.l_instr))

    train, test = [], []
    for route_id in range(spec.n_routes):
        speed = float(rng.uniform(spec.speed_min, spec.speed_max))
        side = spec.bypass_side(route_id)
        for time_index in range(spec.frames_per_route):
            noise = rng.normal(0.0, spec.noise_std, spec.feature_dim)
            jitter_seed = int(rng.integers(0, 2**31))
            hazard = spec.hard_len > 0 and spec.hard_start <= time_index < spec.hard_start + spec.hard_len

            features = (center + noise
                        + (speed - spec.speed_ref) * spec.speed_feature_gain
                        * speed_channel(spec.feature_dim))
            if hazard:
                # presence says "construction ahead" regardless of side;
                # the signed component carries which way the bypass goes
                features = (features
                            + spec.presence_magnitude * presence_channel(spec.feature_dim)
                            + side * spec.hazard_magnitude * hazard_dir)

            arc = speed * spec.dt * time_index
            pose = EgoPose(
                x=spec.origin[0] + arc * np.cos(spec.heading),
                y=spec.origin[1] + spec.lane_spacing * route_id + arc * np.sin(spec.heading),
                heading=spec.heading,
                speed=speed,
            )
            frame = Frame(
                frame_id=spec.index * 100000 + route_id * 1000 + time_index,
                roadblock_id=spec.roadblock_id,
                route_id=route_id,
                time_index=time_index,
                ego_pose=pose,
                visual_features=features,
                instruction_tokens=instructions,
                gt_trajectory=teacher_trajectory(spec, center, noise, hazard, speed, jitter_seed, side),
                difficulty="challenging" if hazard else "normal",
                taxonomy=spec.taxonomy_label(route_id) if hazard else None,
            )
            (train if time_index % 2 == 0 else test).append(frame)
    return RoadblockDataset(spec.roadblock_id, train, test)


def generate_suite(seed: int, n_roadblocks: int = 4,
                   template: RoadblockSpec | None = None) -> list:
    """Independent roadblocks, spatially far apart, sharing one base seed."""
    template = template or RoadblockSpec()
    suite = []
    for i in range(n_roadblocks):
        spec = replace(
            template,
            roadblock_id=f"rb{i:02d}",
            index=i,
            origin=(1500.0 * i, 0.0),
        )
        suite.append(generate_roadblock(seed, spec))
    return suite
