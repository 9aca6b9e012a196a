"""The four training losses, built as tape graphs.

Node-level builders (suffix ``_node``) are composed by the trainers so one
tape per epoch carries every frame's forward pass and a single backward
call yields the prompt gradient. The plain functions wrap a private tape
and return floats; they exist for tests, reports, and the operation-level
API.

Conventions fixed here:
  * Stage-1 representations are pooled over visual positions at the
    configured layer and L2-normalized; Stage-2 representations are the
    same pooling left unnormalized.
  * Baseline representations h(P_A) are precomputed constants; no gradient
    flows through them.
  * Frame contributions are always accumulated in ascending frame_id
    order, which keeps reductions deterministic.
"""

from __future__ import annotations

import logging

import numpy as np

from .autodiff import Tape, TapeNode, backward
from .planner import PlannerWeights, forward_on_tape, pool_on_tape

logger = logging.getLogger(__name__)


def _mean_chain(tape: Tape, terms: list, scale: float) -> TapeNode:
    acc = terms[0]
    for t in terms[1:]:
        acc = tape.add(acc, t)
    return tape.scale(acc, scale)


# -- representation plumbing -------------------------------------------------


def rep_node(
    weights: PlannerWeights,
    tape: Tape,
    frame,
    prompt_a: TapeNode | None,
    prompt_b: TapeNode | None,
    layer: int,
    normalize: bool,
) -> TapeNode:
    """Pooled layer-`layer` visual representation of one frame, on the tape."""
    fp = forward_on_tape(
        weights, tape, frame.visual_features, frame.instruction_tokens,
        prompt_a, prompt_b, up_to_layer=layer,
    )
    return pool_on_tape(tape, fp.hidden[layer], fp.layout, normalize)


def baseline_reps(weights: PlannerWeights, prompt_a: np.ndarray, frames, layer: int) -> dict:
    """h(P_A) per frame: unnormalized pooled states with P_B absent.

    Computed once and treated as constants by dir/reg losses (stop-gradient
    baseline).
    """
    tape = Tape()
    pa = tape.constant(prompt_a)
    out = {}
    for f in sorted(frames, key=lambda f: f.frame_id):
        out[f.frame_id] = rep_node(weights, tape, f, pa, None, layer, normalize=False).value.copy()
    return out


# -- supervised contrastive loss ---------------------------------------------


def supcon_loss_node(tape: Tape, reps: list, challenging: list, taxonomy: list,
                     tau: float, w0: float) -> TapeNode:
    """SupCon over a batch of L2-normalized (1, d) representation nodes.

    Anchors are the challenging members; positives are the other
    challenging members; the denominator runs over every batch member
    except the anchor. Positive pairs sharing a taxonomy label weigh 1,
    others w0. Anchors without positives are skipped; a batch with no
    usable anchor is an error.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    if w0 <= 0.0:
        raise ValueError("w0 must be positive so anchor normalizers never vanish")
    b = len(reps)
    if not (b == len(challenging) == len(taxonomy)):
        raise ValueError("reps, challenging, taxonomy must have equal length")

    h = tape.concat_rows(reps)
    sims = tape.scale(tape.matmul(h, tape.transpose(h)), 1.0 / tau)

    hard_idx = [i for i in range(b) if challenging[i]]
    anchor_terms = []
    for i in hard_idx:
        positives = [p for p in hard_idx if p != i]
        if not positives:
            continue
        row = tape.slice_rows(sims, i, i + 1)
        not_self = np.ones((1, b), dtype=bool)
        not_self[0, i] = False
        lse = tape.log_sum_exp(row, mask=not_self)

        w = np.zeros((1, b))
        for p in positives:
            w[0, p] = 1.0 if taxonomy[p] == taxonomy[i] else w0
        w_sum = float(w.sum())
        weighted = tape.dot(row, tape.constant(w))
        # (1/Σw)·Σ_p w_ip·(sim_ip − lse)
        anchor_terms.append(
            tape.add(tape.scale(weighted, 1.0 / w_sum), tape.scale(lse, -1.0))
        )
    if not anchor_terms:
        raise ValueError("no usable anchor: need >= 2 challenging frames in the batch")
    return _mean_chain(tape, anchor_terms, -1.0 / len(anchor_terms))


def supcon_loss(representations: np.ndarray, challenging, taxonomy, tau: float,
                w0: float) -> tuple:
    """Value and gradient w.r.t. the (B, d) representation matrix."""
    reps = np.asarray(representations, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(reps)
    nodes = [tape.slice_rows(leaf, i, i + 1) for i in range(reps.shape[0])]
    loss = supcon_loss_node(tape, nodes, list(challenging), list(taxonomy), tau, w0)
    grad = backward(tape, loss)[leaf.idx]
    return float(loss.value), grad.data


# -- trajectory and representation losses ------------------------------------


def ade_node(tape: Tape, trajectory_node: TapeNode, gt_waypoints: np.ndarray) -> TapeNode:
    diff = tape.add(trajectory_node, tape.constant(-np.asarray(gt_waypoints, dtype=np.float64)))
    return tape.mean_row_norms(diff)


def plan_loss_node(tape: Tape, traj_nodes: list, gts: list) -> TapeNode:
    if not traj_nodes:
        raise ValueError("plan loss needs at least one challenging frame")
    terms = [ade_node(tape, t, gt) for t, gt in zip(traj_nodes, gts)]
    return _mean_chain(tape, terms, 1.0 / len(terms))


def dir_loss_node(tape: Tape, rep_nodes: list, baselines: list,
                  directions: np.ndarray) -> TapeNode:
    """-(1/|D_c|) Σ_i Σ_j <h_i - baseline_i, d_j>, baselines constant."""
    if not rep_nodes:
        return tape.constant(np.asarray(0.0))
    d_sum = np.asarray(directions, dtype=np.float64).sum(axis=0, keepdims=True)
    terms = []
    for node, base in zip(rep_nodes, baselines):
        delta = tape.add(node, tape.constant(-np.asarray(base)))
        terms.append(tape.dot(delta, tape.constant(d_sum)))
    return _mean_chain(tape, terms, -1.0 / len(terms))


def reg_loss_node(tape: Tape, rep_nodes: list, baselines: list) -> TapeNode:
    """Mean squared displacement of normal-frame representations."""
    if not rep_nodes:
        logger.warning("reg loss over an empty normal set; defined as 0")
        return tape.constant(np.asarray(0.0))
    terms = []
    for node, base in zip(rep_nodes, baselines):
        delta = tape.add(node, tape.constant(-np.asarray(base)))
        terms.append(tape.squared_norm(delta))
    return _mean_chain(tape, terms, 1.0 / len(terms))


def mse_loss_node(tape: Tape, traj_nodes: list, gts: list) -> TapeNode:
    """Mean over frames of mean squared waypoint displacement."""
    if not traj_nodes:
        raise ValueError("mse loss needs at least one frame")
    terms = []
    for t, gt in zip(traj_nodes, gts):
        diff = tape.add(t, tape.constant(-np.asarray(gt, dtype=np.float64)))
        terms.append(tape.scale(tape.squared_norm(diff), 1.0 / diff.value.shape[0]))
    return _mean_chain(tape, terms, 1.0 / len(terms))


# -- operation-level wrappers (floats in, floats out) -------------------------


def _sorted_split(frames):
    hard = sorted((f for f in frames if f.difficulty == "challenging"), key=lambda f: f.frame_id)
    normal = sorted((f for f in frames if f.difficulty == "normal"), key=lambda f: f.frame_id)
    return hard, normal


def plan_loss(weights: PlannerWeights, prompt_a, prompt_b, challenging_frames) -> float:
    frames = sorted(challenging_frames, key=lambda f: f.frame_id)
    if not frames:
        raise ValueError("plan loss needs at least one challenging frame")
    tape = Tape()
    pa = None if prompt_a is None else tape.constant(prompt_a)
    pb = None if prompt_b is None else tape.constant(prompt_b)
    nodes, gts = [], []
    for f in frames:
        fp = forward_on_tape(weights, tape, f.visual_features, f.instruction_tokens, pa, pb)
        nodes.append(fp.trajectory_node)
        gts.append(f.gt_trajectory.waypoints)
    return float(plan_loss_node(tape, nodes, gts).value)


def dir_loss(weights: PlannerWeights, prompt_a, prompt_b, challenging_frames,
             directions, layer: int) -> float:
    frames = sorted(challenging_frames, key=lambda f: f.frame_id)
    base = baseline_reps(weights, prompt_a, frames, layer)
    tape = Tape()
    pa = tape.constant(prompt_a)
    pb = None if prompt_b is None else tape.constant(prompt_b)
    nodes = [rep_node(weights, tape, f, pa, pb, layer, normalize=False) for f in frames]
    node = dir_loss_node(tape, nodes, [base[f.frame_id] for f in frames], directions)
    return float(node.value)


def reg_loss(weights: PlannerWeights, prompt_a, prompt_b, normal_frames, layer: int) -> float:
    frames = sorted(normal_frames, key=lambda f: f.frame_id)
    base = baseline_reps(weights, prompt_a, frames, layer)
    tape = Tape()
    pa = tape.constant(prompt_a)
    pb = None if prompt_b is None else tape.constant(prompt_b)
    nodes = [rep_node(weights, tape, f, pa, pb, layer, normalize=False) for f in frames]
    node = reg_loss_node(tape, nodes, [base[f.frame_id] for f in frames])
    return float(node.value)


# -- the composed Stage-2 objective -------------------------------------------


def stage2_objective_nodes(weights: PlannerWeights, tape: Tape, frames, pa_node,
                           pb_node, direction_matrix, baselines: dict,
                           lambda1: float, lambda2: float, layer: int) -> dict:
    """plan/dir/reg/total nodes for one batch, all on one tape.

    ``direction_matrix`` None drops L_dir; an empty challenging subset
    (possible mid-epoch with shuffled mini-batches) makes plan and dir
    constant zero. ``baselines`` maps frame_id to the constant h(P_A).
    """
    b_hard = [f for f in frames if f.difficulty == "challenging"]
    b_normal = [f for f in frames if f.difficulty == "normal"]
    traj_nodes, gts, hard_reps, hard_bases = [], [], [], []
    for f in b_hard:
        fp = forward_on_tape(weights, tape, f.visual_features,
                             f.instruction_tokens, pa_node, pb_node)
        traj_nodes.append(fp.trajectory_node)
        gts.append(f.gt_trajectory.waypoints)
        hard_reps.append(pool_on_tape(tape, fp.hidden[layer], fp.layout, False))
        hard_bases.append(baselines[f.frame_id])
    norm_reps = [rep_node(weights, tape, f, pa_node, pb_node, layer, False)
                 for f in b_normal]
    norm_bases = [baselines[f.frame_id] for f in b_normal]

    plan = (plan_loss_node(tape, traj_nodes, gts) if b_hard
            else tape.constant(np.asarray(0.0)))
    dirn = (dir_loss_node(tape, hard_reps, hard_bases, direction_matrix)
            if direction_matrix is not None and b_hard
            else tape.constant(np.asarray(0.0)))
    reg = reg_loss_node(tape, norm_reps, norm_bases)
    total = tape.add(plan, tape.add(tape.scale(dirn, lambda1),
                                    tape.scale(reg, lambda2)))
    return {"plan": plan, "dir": dirn, "reg": reg, "total": total}


def stage2_total_loss(weights: PlannerWeights, prompt_a, prompt_b, direction,
                      labeled_frames, lambda1: float, lambda2: float,
                      layer: int) -> tuple[float, np.ndarray]:
    """Value and P_B gradient of the full objective, full batch, one tape."""
    frames = sorted(labeled_frames, key=lambda f: f.frame_id)
    base = baseline_reps(weights, prompt_a, frames, layer)
    tape = Tape()
    pa = tape.constant(prompt_a)
    leaf = tape.leaf(np.asarray(prompt_b, dtype=np.float64))
    dmat = None if direction is None else getattr(direction, "directions", direction)
    nodes = stage2_objective_nodes(weights, tape, frames, pa, leaf, dmat, base,
                                   lambda1, lambda2, layer)
    grad = backward(tape, nodes["total"])[leaf.idx]
    return float(nodes["total"].value), grad.data
