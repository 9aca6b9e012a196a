"""Two-stage prompt optimization plus its baselines.

Stage 1 trains P_A with the supervised contrastive loss over pooled,
normalized layer representations; the hard-scene direction is then the
top-k right-singular basis of the residualized challenging
representations. Stage 2 freezes P_A and trains P_B on
L_plan + lambda1 * L_dir + lambda2 * L_reg.

Reproducibility: prompt initializations draw from fixed sub-streams of
init_seed (STREAM_PA, STREAM_PB, ...), frames always reduce in ascending
frame_id order, and full-batch gradients are the default, so a training
run is a pure function of (dataset, config).
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, backward
from .losses import (
    baseline_reps,
    mse_loss_node,
    plan_loss_node,
    rep_node,
    stage2_objective_nodes,
    supcon_loss_node,
)
from .optim import AdamState, adam_step
from .planner import PlannerWeights, forward_on_tape, pool_on_tape
from .textio import atomic_write_text, fmt_float, parse_floats, read_text

logger = logging.getLogger(__name__)

STREAM_PA = 1
STREAM_PB = 2
STREAM_BATCH = 3
STREAM_RANDDIR = 4

REPORT_SCHEMA = "clap-train-report v1"


@dataclass(frozen=True)
class TrainConfig:
    m: int = 50                  # P_A rows
    n: int = 50                  # P_B rows
    tau: float = 0.1
    k: int = 3                   # singular directions kept
    lambda1: float = 0.1
    lambda2: float = 0.1
    lr: float = 1e-3
    stage1_epochs: int = 50
    stage2_epochs: int = 100
    batch_size: int | None = None  # None = full batch
    w0: float = 0.5              # off-label positive weight
    init_seed: int = 0
    extract_layer: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lambda1 < 0.0 or self.lambda2 < 0.0:
            raise ValueError("lambda weights must be non-negative")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.m < 1 or self.n < 1:
            raise ValueError("prompt lengths must be >= 1")
        if not (0.0 < self.w0):
            raise ValueError("w0 must be positive")


@dataclass(frozen=True)
class HardSceneDirection:
    directions: np.ndarray       # (k, d_model), orthonormal rows
    singular_values: np.ndarray  # (k,), descending
    sign_convention: str = "mean-residual-nonnegative"

    def __post_init__(self) -> None:
        d = np.asarray(self.directions, dtype=np.float64)
        s = np.asarray(self.singular_values, dtype=np.float64)
        if d.ndim != 2 or s.shape != (d.shape[0],):
            raise ValueError("directions (k, d) and singular_values (k,) required")
        gram = d @ d.T
        if np.abs(gram - np.eye(d.shape[0])).max() > 1e-8:
            raise ValueError("directions must be orthonormal within 1e-8")
        if (s < 0.0).any() or (np.diff(s) > 0.0).any():
            raise ValueError("singular values must be non-negative and descending")
        d.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "singular_values", s)

    @property
    def k(self) -> int:
        return self.directions.shape[0]


@dataclass(frozen=True)
class PromptPair:
    prompt_a: np.ndarray
    prompt_b: np.ndarray

    def __post_init__(self) -> None:
        for name in ("prompt_a", "prompt_b"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"{name} must be a matrix")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.prompt_a.shape[1] != self.prompt_b.shape[1]:
            raise ValueError("prompt widths differ")


@dataclass
class TrainReport:
    stage: str
    config: TrainConfig
    losses: dict                 # trace name -> list of per-epoch floats
    wall_clock: float            # seconds; excluded from serialization

    def __post_init__(self) -> None:
        epochs = {len(v) for v in self.losses.values()}
        if len(epochs) > 1:
            raise ValueError("loss traces have inconsistent lengths")


def report_to_text(report: TrainReport) -> str:
    """Schema-versioned text; deterministic for identical runs.

    wall_clock is deliberately not serialized so reruns of the same config
    produce byte-identical files.
    """
    cfg = dataclasses.asdict(report.config)
    cfg_items = " ".join(
        f"{k}={fmt_float(v) if isinstance(v, float) else v}" for k, v in sorted(cfg.items())
    )
    lines = [REPORT_SCHEMA, f"stage {report.stage}", f"config {cfg_items}"]
    for name in sorted(report.losses):
        vals = " ".join(fmt_float(v) for v in report.losses[name])
        lines.append(f"trace {name} {vals}")
    return "\n".join(lines) + "\n"


def write_report(report: TrainReport, path: str) -> None:
    atomic_write_text(path, report_to_text(report))


def _split_frames(frames):
    hard = sorted((f for f in frames if f.difficulty == "challenging"), key=lambda f: f.frame_id)
    normal = sorted((f for f in frames if f.difficulty == "normal"), key=lambda f: f.frame_id)
    return hard, normal


def _epoch_batches(frames, config: TrainConfig, epoch: int):
    """Full batch by default; otherwise a seeded shuffle split into chunks."""
    if config.batch_size is None or config.batch_size >= len(frames):
        return [frames]
    rng = np.random.default_rng(
        np.random.SeedSequence([config.init_seed, STREAM_BATCH, epoch])
    )
    order = rng.permutation(len(frames))
    shuffled = [frames[i] for i in order]
    size = config.batch_size
    return [shuffled[i : i + size] for i in range(0, len(shuffled), size)]


def init_prompt(rows: int, d_model: int, init_seed: int, stream: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([init_seed, stream]))
    return rng.normal(0.0, 1.0, (rows, d_model))


# -- Stage 1 ------------------------------------------------------------------


def train_stage1(weights: PlannerWeights, labeled_frames, config: TrainConfig):
    """Adam on the SupCon loss; P_B is absent from every Stage-1 forward."""
    hard, normal = _split_frames(labeled_frames)
    if len(hard) < 2 or len(normal) < 1:
        raise ValueError(
            f"stage 1 needs >= 2 challenging and >= 1 normal train frames, "
            f"got {len(hard)} challenging / {len(normal)} normal"
        )
    frames = sorted(labeled_frames, key=lambda f: f.frame_id)
    layer = config.extract_layer
    d_model = weights.config.d_model

    pa = init_prompt(config.m, d_model, config.init_seed, STREAM_PA)
    state = AdamState.zeros(pa.shape)
    trace = []
    started = time.monotonic()
    for epoch in range(config.stage1_epochs):
        epoch_losses = []
        for batch in _epoch_batches(frames, config, epoch):
            tape = Tape()
            leaf = tape.leaf(pa)
            reps, challenging, taxonomy = [], [], []
            for f in batch:
                reps.append(rep_node(weights, tape, f, leaf, None, layer, normalize=True))
                challenging.append(f.difficulty == "challenging")
                taxonomy.append(f.taxonomy)
            loss = supcon_loss_node(tape, reps, challenging, taxonomy, config.tau, config.w0)
            grad = backward(tape, loss)[leaf.idx].data
            pa, state = adam_step(pa, grad, state, config.lr, config.beta1, config.beta2, config.eps)
            epoch_losses.append(float(loss.value))
        trace.append(float(np.mean(epoch_losses)))
    report = TrainReport("stage1", config, {"supcon": trace}, time.monotonic() - started)
    return pa, report


def discover_direction(weights: PlannerWeights, prompt_a: np.ndarray, labeled_frames,
                       k: int, layer: int) -> HardSceneDirection:
    """Top-k right-singular basis of {h_i - mean normal rep} under P_A.

    Representations follow the Stage-1 contract (pooled, L2-normalized).
    Each direction is sign-aligned so the mean residual projects
    non-negatively onto it.
    """
    hard, normal = _split_frames(labeled_frames)
    if len(hard) < k:
        raise ValueError(f"need >= k={k} challenging frames, got {len(hard)}")
    if not normal:
        raise ValueError("need at least one normal frame for the residual baseline")

    tape = Tape()
    pa = tape.constant(prompt_a)
    h_hard = np.concatenate(
        [rep_node(weights, tape, f, pa, None, layer, normalize=True).value for f in hard]
    )
    h_norm = np.concatenate(
        [rep_node(weights, tape, f, pa, None, layer, normalize=True).value for f in normal]
    )
    residuals = h_hard - h_norm.mean(axis=0, keepdims=True)
    return directions_from_residuals(residuals, k)


def directions_from_residuals(residuals: np.ndarray, k: int) -> HardSceneDirection:
    """Top-k right-singular basis of a residual matrix, sign-aligned."""
    residuals = np.asarray(residuals, dtype=np.float64)
    rank = int(np.linalg.matrix_rank(residuals))
    if rank < k:
        raise ValueError(f"residual matrix rank {rank} < k={k}")
    _, s, vt = np.linalg.svd(residuals, full_matrices=False)
    directions = vt[:k].copy()
    mean_r = residuals.mean(axis=0)
    for j in range(k):
        if float(mean_r @ directions[j]) < 0.0:
            directions[j] = -directions[j]
    return HardSceneDirection(directions, s[:k].copy())


def random_directions(d_model: int, k: int, seed: int) -> HardSceneDirection:
    """k random orthonormal vectors; the Stage-1 ablation's d* replacement."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_RANDDIR]))
    q, r = np.linalg.qr(rng.normal(size=(d_model, k)))
    q = q * np.sign(np.diag(r))[None, :]  # fix QR sign ambiguity
    return HardSceneDirection(q.T.copy(), np.zeros(k), sign_convention="random")


DIRECTION_SCHEMA = "clap-direction v1"


def direction_to_text(direction: HardSceneDirection) -> str:
    k, d = direction.directions.shape
    lines = [DIRECTION_SCHEMA, f"k {k}", f"d_model {d}",
             f"sign {direction.sign_convention}"]
    lines.extend(fmt_float(v) for row in direction.directions for v in row)
    lines.append("singular_values " + " ".join(fmt_float(s)
                                               for s in direction.singular_values))
    return "\n".join(lines) + "\n"


def parse_direction(text: str) -> HardSceneDirection:
    lines = text.splitlines()
    if not lines or lines[0] != DIRECTION_SCHEMA:
        raise ValueError(f"expected header {DIRECTION_SCHEMA!r}")
    k = int(lines[1].split(" ")[1])
    d_model = int(lines[2].split(" ")[1])
    sign = lines[3].split(" ", 1)[1]
    vectors = parse_floats(lines[4:4 + k * d_model], k * d_model, (k, d_model))
    sv = parse_floats(lines[4 + k * d_model].split(" ")[1:], k, (k,))
    return HardSceneDirection(vectors, sv, sign_convention=sign)


def write_direction(direction: HardSceneDirection, path: str) -> None:
    atomic_write_text(path, direction_to_text(direction))


def read_direction(path: str) -> HardSceneDirection:
    return parse_direction(read_text(path))


# -- Stage 2 ------------------------------------------------------------------


def train_stage2(weights: PlannerWeights, prompt_a: np.ndarray,
                 direction: HardSceneDirection | None, labeled_frames,
                 config: TrainConfig):
    """Adam on L_plan + lambda1 * L_dir + lambda2 * L_reg w.r.t. P_B only.

    ``direction=None`` drops the L_dir term entirely (the w/o-direction
    ablation); baselines h(P_A) are precomputed constants.
    """
    hard, normal = _split_frames(labeled_frames)
    if not hard:
        raise ValueError("stage 2 needs at least one challenging frame")
    if not normal:
        logger.warning("stage 2 without normal frames: L_reg is identically 0")
    layer = config.extract_layer
    frames = sorted(labeled_frames, key=lambda f: f.frame_id)
    base = baseline_reps(weights, prompt_a, frames, layer)

    pb = init_prompt(config.n, weights.config.d_model, config.init_seed, STREAM_PB)
    state = AdamState.zeros(pb.shape)
    traces: dict[str, list] = {"plan": [], "dir": [], "reg": [], "total": []}
    started = time.monotonic()
    for epoch in range(config.stage2_epochs):
        sums = {name: 0.0 for name in traces}
        batches = _epoch_batches(frames, config, epoch)
        for batch in batches:
            tape = Tape()
            pa_node = tape.constant(prompt_a)
            leaf = tape.leaf(pb)
            nodes = stage2_objective_nodes(
                weights, tape, batch, pa_node, leaf,
                None if direction is None else direction.directions,
                base, config.lambda1, config.lambda2, layer)
            grad = backward(tape, nodes["total"])[leaf.idx].data
            pb, state = adam_step(pb, grad, state, config.lr, config.beta1, config.beta2, config.eps)
            for name in traces:
                sums[name] += float(nodes[name].value)
        for name in traces:
            traces[name].append(sums[name] / len(batches))
    report = TrainReport("stage2", config, traces, time.monotonic() - started)
    return pb, report


def train_plan_only(weights: PlannerWeights, prompt_a: np.ndarray, labeled_frames,
                    config: TrainConfig):
    """P_B trained on the challenging-frame ADE alone.

    Written as its own loop (not a lambda-zeroed train_stage2 call) so the
    degenerate-weights identity between the two is a meaningful check.
    """
    hard, _ = _split_frames(labeled_frames)
    if not hard:
        raise ValueError("plan-only training needs at least one challenging frame")
    pb = init_prompt(config.n, weights.config.d_model, config.init_seed, STREAM_PB)
    state = AdamState.zeros(pb.shape)
    trace = []
    started = time.monotonic()
    for epoch in range(config.stage2_epochs):
        epoch_losses = []
        for batch in _epoch_batches(hard, config, epoch):
            tape = Tape()
            pa_node = tape.constant(prompt_a)
            leaf = tape.leaf(pb)
            traj_nodes, gts = [], []
            for f in batch:
                fp = forward_on_tape(weights, tape, f.visual_features,
                                     f.instruction_tokens, pa_node, leaf)
                traj_nodes.append(fp.trajectory_node)
                gts.append(f.gt_trajectory.waypoints)
            loss = plan_loss_node(tape, traj_nodes, gts)
            grad = backward(tape, loss)[leaf.idx].data
            pb, state = adam_step(pb, grad, state, config.lr, config.beta1, config.beta2, config.eps)
            epoch_losses.append(float(loss.value))
        trace.append(float(np.mean(epoch_losses)))
    report = TrainReport("plan_only", config, {"plan": trace}, time.monotonic() - started)
    return pb, report


def train_unconstrained(weights: PlannerWeights, labeled_frames, config: TrainConfig):
    """Single full-dimensional soft prompt, MSE trajectory loss, no
    representation constraints; the classic prompt-tuning baseline."""
    hard, _ = _split_frames(labeled_frames)
    if not hard:
        raise ValueError("unconstrained training needs at least one challenging frame")
    prompt = init_prompt(config.m, weights.config.d_model, config.init_seed, STREAM_PA)
    state = AdamState.zeros(prompt.shape)
    trace = []
    started = time.monotonic()
    for epoch in range(config.stage2_epochs):
        epoch_losses = []
        for batch in _epoch_batches(hard, config, epoch):
            tape = Tape()
            leaf = tape.leaf(prompt)
            traj_nodes, gts = [], []
            for f in batch:
                fp = forward_on_tape(weights, tape, f.visual_features,
                                     f.instruction_tokens, leaf, None)
                traj_nodes.append(fp.trajectory_node)
                gts.append(f.gt_trajectory.waypoints)
            loss = mse_loss_node(tape, traj_nodes, gts)
            grad = backward(tape, loss)[leaf.idx].data
            prompt, state = adam_step(prompt, grad, state, config.lr,
                                      config.beta1, config.beta2, config.eps)
            epoch_losses.append(float(loss.value))
        trace.append(float(np.mean(epoch_losses)))
    report = TrainReport("unconstrained", config, {"mse": trace}, time.monotonic() - started)
    return prompt, report


def explicit_notice(frame, notice_token_ids):
    """Append hint tokens to the instruction sequence; nothing else changes."""
    ids = tuple(int(t) for t in notice_token_ids)
    if not ids:
        return frame
    return dataclasses.replace(frame, instruction_tokens=frame.instruction_tokens + ids)


# -- the full per-roadblock pipeline ------------------------------------------


@dataclass
class ClapResult:
    prompt_pair: PromptPair
    direction: HardSceneDirection | None
    stage1_report: TrainReport
    stage2_report: TrainReport


def train_clap(weights: PlannerWeights, labeled_frames, config: TrainConfig,
               variant: str = "full") -> ClapResult:
    """Both stages end to end.

    variant: "full" uses the discovered direction; "random_dir" swaps in
    seeded random orthonormal vectors; "no_dir" omits L_dir entirely.
    Every variant runs Stage 1 (P_A always trains; only the direction
    handling differs).
    """
    pa, rep1 = train_stage1(weights, labeled_frames, config)
    if variant == "full":
        direction = discover_direction(weights, pa, labeled_frames, config.k, config.extract_layer)
    elif variant == "random_dir":
        direction = random_directions(weights.config.d_model, config.k, config.init_seed)
    elif variant == "no_dir":
        direction = None
    else:
        raise ValueError(f"unknown variant {variant!r}")
    pb, rep2 = train_stage2(weights, pa, direction, labeled_frames, config)
    return ClapResult(PromptPair(pa, pb), direction, rep1, rep2)
