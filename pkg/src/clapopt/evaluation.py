"""Metrics and the experiment harness.

Hard/normal/overall ADE splits against the frozen baseline, the
scoping comparison (one merged prompt vs one per roadblock), Stage-1
ablations, condition-shift evaluation, and a 2-D latent projection for
plotting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ConditionShift, RoadblockDataset, apply_condition_shift
from .planner import PlannerWeights, forward, pool_representation
from .textio import atomic_write_text, fmt_float, read_text
from .train import TrainConfig, train_clap, train_unconstrained

EVAL_SCHEMA = "clap-eval v1"
ABSENT = "-"


def ade(predicted, ground_truth) -> float:
    """Mean Euclidean waypoint displacement in meters."""
    p = np.asarray(getattr(predicted, "waypoints", predicted), dtype=np.float64)
    g = np.asarray(getattr(ground_truth, "waypoints", ground_truth), dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"waypoint shape mismatch: {p.shape} vs {g.shape}")
    return float(np.linalg.norm(p - g, axis=1).mean())


@dataclass(frozen=True)
class EvalReport:
    condition: str
    n_hard: int
    n_normal: int
    hard_ade: float | None
    normal_ade: float | None
    overall_ade: float
    # evaluated minus frozen, same split; None when the split is absent
    delta_hard: float | None
    delta_normal: float | None
    delta_overall: float

    def __post_init__(self) -> None:
        if self.n_hard < 0 or self.n_normal < 0 or self.n_hard + self.n_normal == 0:
            raise ValueError("frame counts must be non-negative and not all zero")
        if (self.n_hard > 0) != (self.hard_ade is not None):
            raise ValueError("hard count and hard_ade disagree")
        if (self.n_normal > 0) != (self.normal_ade is not None):
            raise ValueError("normal count and normal_ade disagree")
        parts = []
        if self.n_hard:
            parts.append(self.n_hard * self.hard_ade)
        if self.n_normal:
            parts.append(self.n_normal * self.normal_ade)
        expect = sum(parts) / (self.n_hard + self.n_normal)
        if abs(expect - self.overall_ade) > 1e-12:
            raise ValueError("overall_ade is not the frame-weighted average")


def _frame_ades(weights: PlannerWeights, frames, prompt_a, prompt_b,
                shift: ConditionShift | None, shift_seed: int) -> dict:
    out = {}
    for f in sorted(frames, key=lambda f: f.frame_id):
        if shift is not None:
            f = apply_condition_shift(f, shift, shift_seed)
        traj, _, _ = forward(weights, f.visual_features, f.instruction_tokens,
                             prompt_a, prompt_b)
        out[f.frame_id] = ade(traj.waypoints, f.gt_trajectory.waypoints)
    return out


def _split_means(frames, ades) -> tuple:
    hard = [ades[f.frame_id] for f in frames if f.difficulty == "challenging"]
    normal = [ades[f.frame_id] for f in frames if f.difficulty != "challenging"]
    hard_m = float(np.mean(hard)) if hard else None
    normal_m = float(np.mean(normal)) if normal else None
    overall = float(np.mean(list(ades.values())))
    return len(hard), len(normal), hard_m, normal_m, overall


def evaluate(weights: PlannerWeights, prompt_a, prompt_b, frames,
             shift: ConditionShift | None = None, shift_seed: int = 0,
             baseline_frames=None) -> EvalReport:
    """ADE report under the given prompts, with deltas vs the frozen planner.

    Condition shifts perturb features only; ground truth stays valid.
    Prompts absent gives the frozen-backbone row (deltas zero).
    ``baseline_frames`` moves the frozen comparison onto different inputs;
    the notice baseline uses it to report deltas vs plain instructions.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("empty evaluation set")
    ades = _frame_ades(weights, frames, prompt_a, prompt_b, shift, shift_seed)
    n_hard, n_normal, hard_m, normal_m, overall = _split_means(frames, ades)
    if prompt_a is None and prompt_b is None and baseline_frames is None:
        base = (hard_m, normal_m, overall)
    else:
        base_frames = frames if baseline_frames is None else list(baseline_frames)
        base_ades = _frame_ades(weights, base_frames, None, None, shift, shift_seed)
        _, _, bh, bn, bo = _split_means(base_frames, base_ades)
        base = (bh, bn, bo)
    d_hard = None if hard_m is None else hard_m - base[0]
    d_normal = None if normal_m is None else normal_m - base[1]
    return EvalReport(shift.name if shift else "clear", n_hard, n_normal,
                      hard_m, normal_m, overall, d_hard, d_normal, overall - base[2])


def normal_rep_displacement(weights: PlannerWeights, frames, prompt_a, prompt_b,
                            layer: int, reference: str = "frozen") -> float:
    """Mean squared L2 shift of pooled normal-frame representations.

    ``reference`` picks the comparison point: "frozen" (no prompts) or
    "prompt_a" (Stage-2's own baseline h(P_A)).
    """
    if reference not in ("frozen", "prompt_a"):
        raise ValueError(f"unknown reference {reference!r}")
    normals = sorted((f for f in frames if f.difficulty == "normal"),
                     key=lambda f: f.frame_id)
    if not normals:
        raise ValueError("no normal frames")
    total = 0.0
    for f in normals:
        _, hidden, layout = forward(weights, f.visual_features, f.instruction_tokens,
                                    prompt_a, prompt_b)
        now = pool_representation(hidden, layout, layer, normalize=False)
        ref_pa = prompt_a if reference == "prompt_a" else None
        _, hidden0, layout0 = forward(weights, f.visual_features, f.instruction_tokens,
                                      ref_pa, None)
        ref = pool_representation(hidden0, layout0, layer, normalize=False)
        total += float(np.sum((now - ref) ** 2))
    return total / len(normals)


@dataclass(frozen=True)
class ScopeReport:
    """Merged vs per-roadblock prompt optimization, same length and loss."""

    merged_hard: float
    merged_normal: float
    per_roadblock_hard: float
    per_roadblock_normal: float
    rows: tuple  # (roadblock_id, merged_hard, per_hard) per roadblock


def compare_scope(weights: PlannerWeights, datasets: list, config: TrainConfig) -> ScopeReport:
    """One prompt trained on the pooled challenging frames of every
    roadblock vs one prompt per roadblock; identical prompt length and
    trajectory loss for both scopes."""
    if len(datasets) < 1:
        raise ValueError("need at least one roadblock")
    pooled = [f for ds in datasets for f in ds.train_frames]
    merged_prompt, _ = train_unconstrained(weights, pooled, config)

    merged_h, merged_n, per_h, per_n, rows = [], [], [], [], []
    for ds in datasets:
        own_prompt, _ = train_unconstrained(weights, ds.train_frames, config)
        m = evaluate(weights, merged_prompt, None, ds.test_frames)
        p = evaluate(weights, own_prompt, None, ds.test_frames)
        merged_h.append((m.hard_ade, m.n_hard))
        merged_n.append((m.normal_ade, m.n_normal))
        per_h.append((p.hard_ade, p.n_hard))
        per_n.append((p.normal_ade, p.n_normal))
        rows.append((ds.roadblock_id, m.hard_ade, p.hard_ade))

    def pool(pairs):
        num = sum(a * n for a, n in pairs if a is not None)
        den = sum(n for a, n in pairs if a is not None)
        if den == 0:
            raise ValueError("no frames in split")
        return num / den

    return ScopeReport(pool(merged_h), pool(merged_n), pool(per_h), pool(per_n),
                       tuple(rows))


def ablation_suite(weights: PlannerWeights, dataset: RoadblockDataset,
                   config: TrainConfig) -> dict:
    """Frozen baseline plus full CLAP, the no-direction variant, and the
    random-direction variant, evaluated on the roadblock's test split."""
    rows = {"frozen": evaluate(weights, None, None, dataset.test_frames)}
    for variant in ("full", "no_dir", "random_dir"):
        res = train_clap(weights, dataset.train_frames, config, variant=variant)
        rows[variant] = evaluate(weights, res.prompt_pair.prompt_a,
                                 res.prompt_pair.prompt_b, dataset.test_frames)
    return rows


def latent_projection(weights: PlannerWeights, prompt_a, prompt_b, frames,
                      layer: int) -> list:
    """Pooled layer reps on their top-2 principal axes.

    Returns (frame_id, difficulty, roadblock_id, u, v) per frame, ordered
    by frame_id. Signs are pinned so each axis's largest-magnitude
    loading is positive.
    """
    frames = sorted(frames, key=lambda f: f.frame_id)
    if len(frames) < 3:
        raise ValueError("need at least 3 frames to project")
    reps = []
    for f in frames:
        _, hidden, layout = forward(weights, f.visual_features, f.instruction_tokens,
                                    prompt_a, prompt_b)
        reps.append(pool_representation(hidden, layout, layer, normalize=False))
    x = np.array(reps)
    x = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    if s.size < 2 or s[1] <= s[0] * 1e-12:
        raise ValueError("degenerate covariance: representations span < 2 dimensions")
    axes = vt[:2]
    for i in range(2):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    coords = x @ axes.T
    return [(f.frame_id, f.difficulty, f.roadblock_id, float(u), float(v))
            for f, (u, v) in zip(frames, coords)]


def _cell(value: float | None) -> str:
    return ABSENT if value is None else fmt_float(value)


def report_to_text(name: str, report: EvalReport) -> str:
    lines = [EVAL_SCHEMA,
             f"method {name}",
             f"condition {report.condition}",
             f"frames hard {report.n_hard} normal {report.n_normal}",
             f"hard_ade {_cell(report.hard_ade)}",
             f"normal_ade {_cell(report.normal_ade)}",
             f"overall_ade {fmt_float(report.overall_ade)}",
             f"delta_hard {_cell(report.delta_hard)}",
             f"delta_normal {_cell(report.delta_normal)}",
             f"delta_overall {fmt_float(report.delta_overall)}"]
    return "\n".join(lines) + "\n"


def write_eval_report(name: str, report: EvalReport, path: str) -> None:
    atomic_write_text(path, report_to_text(name, report))


def parse_eval_report(text: str) -> tuple[str, EvalReport]:
    lines = text.splitlines()
    if not lines or lines[0] != EVAL_SCHEMA:
        raise ValueError(f"expected header {EVAL_SCHEMA!r}")
    kv = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        kv[key] = rest
    _, n_hard, _, n_normal = kv["frames"].split(" ")

    def num(key):
        return None if kv[key] == ABSENT else float(kv[key])

    report = EvalReport(kv["condition"], int(n_hard), int(n_normal),
                        num("hard_ade"), num("normal_ade"), float(kv["overall_ade"]),
                        num("delta_hard"), num("delta_normal"),
                        float(kv["delta_overall"]))
    return kv["method"], report


def read_eval_report(path: str) -> tuple[str, EvalReport]:
    return parse_eval_report(read_text(path))


def summary_table(rows: list) -> str:
    """Method-by-split table with deltas vs frozen, for terminal output.

    ``rows`` is [(name, EvalReport)].
    """
    header = f"{'method':<16} {'hard':>14} {'normal':>14} {'overall':>14}"
    out = [header, "-" * len(header)]

    def cell(value, delta):
        if value is None:
            return ABSENT
        text = f"{value:.3f}"
        if delta is not None:
            text += f" ({delta:+.3f})"
        return text

    for name, r in rows:
        out.append(f"{name:<16} {cell(r.hard_ade, r.delta_hard):>14} "
                   f"{cell(r.normal_ade, r.delta_normal):>14} "
                   f"{cell(r.overall_ade, r.delta_overall):>14}")
    return "\n".join(out) + "\n"


SCOPE_SCHEMA = "clap-scope v1"
PROJECTION_SCHEMA = "clap-projection v1"


def scope_to_text(report: ScopeReport) -> str:
    lines = [SCOPE_SCHEMA,
             f"merged hard {fmt_float(report.merged_hard)} "
             f"normal {fmt_float(report.merged_normal)}",
             f"per_roadblock hard {fmt_float(report.per_roadblock_hard)} "
             f"normal {fmt_float(report.per_roadblock_normal)}"]
    for rb, merged_hard, per_hard in report.rows:
        lines.append(f"row {rb} {_cell(merged_hard)} {_cell(per_hard)}")
    return "\n".join(lines) + "\n"


def write_scope_report(report: ScopeReport, path: str) -> None:
    atomic_write_text(path, scope_to_text(report))


def projection_to_text(rows: list) -> str:
    """Plot-ready export of latent_projection output."""
    lines = [PROJECTION_SCHEMA, "columns frame_id difficulty roadblock_id u v"]
    for fid, difficulty, roadblock_id, u, v in rows:
        lines.append(f"{fid} {difficulty} {roadblock_id} {fmt_float(u)} {fmt_float(v)}")
    return "\n".join(lines) + "\n"


def write_projection(rows: list, path: str) -> None:
    atomic_write_text(path, projection_to_text(rows))
