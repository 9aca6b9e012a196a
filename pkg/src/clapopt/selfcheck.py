"""Runtime invariant suite: gradient checks against finite differences,
loss values against independent brute-force oracles, and the planner's
structural guarantees. Exits nonzero on any failure via the CLI.

The oracles here are deliberately written as straight loops with no
tape machinery so they cannot share bugs with the implementation.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass

import numpy as np

from . import losses, registry, synth, train
from .autodiff import Tape, Tensor, backward, grad_check
from .optim import AdamState, adam_step
from .planner import PlannerConfig, forward, init_frozen_weights, weights_checksum


# -- independent oracles -------------------------------------------------------


def brute_force_supcon(reps, challenging, taxonomy, tau: float, w0: float) -> float:
    """Direct double-loop SupCon evaluation over normalized rows."""
    h = np.asarray(reps, dtype=np.float64)
    count = h.shape[0]
    anchors = [i for i in range(count) if challenging[i]]
    total, used = 0.0, 0
    for i in anchors:
        positives = [p for p in anchors if p != i]
        if not positives:
            continue
        weights = [1.0 if taxonomy[p] == taxonomy[i] else w0 for p in positives]
        denom = sum(math.exp(float(h[i] @ h[j]) / tau)
                    for j in range(count) if j != i)
        inner = sum(w * math.log(math.exp(float(h[i] @ h[p]) / tau) / denom)
                    for w, p in zip(weights, positives))
        total += inner / sum(weights)
        used += 1
    if used == 0:
        raise ValueError("no anchor has a positive")
    return -total / used


def power_iteration_directions(residuals, k: int, iters: int = 200000,
                               tol: float = 1e-15):
    """Top-k right-singular directions of the residual matrix by power
    iteration on R^T R with deflation; same sign convention as the
    implementation (mean residual projects non-negatively)."""
    r = np.asarray(residuals, dtype=np.float64)
    mean_r = r.mean(axis=0)
    m = r.T @ r
    d = m.shape[0]
    vecs, svals = [], []
    for j in range(k):
        rng = np.random.default_rng(12345 + j)
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            nxt = m @ v
            norm = np.linalg.norm(nxt)
            if norm == 0.0:
                break
            nxt /= norm
            if np.linalg.norm(nxt - v) < tol:
                v = nxt
                break
            v = nxt
        lam = float(v @ m @ v)
        if float(mean_r @ v) < 0.0:
            v = -v
        vecs.append(v)
        svals.append(math.sqrt(max(lam, 0.0)))
        m = m - lam * np.outer(v, v)
    return np.array(vecs), np.array(svals)


def adam_scalar_trace(grads, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Hand-rolled scalar Adam, used to cross-check the implementation."""
    theta, m, v = 0.0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        theta -= lr * mh / (math.sqrt(vh) + eps)
        out.append(theta)
    return out


# -- the check suite -----------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check_frames(seed: int = 0):
    """A small labeled batch and compact prompts for gradient checks."""
    spec = synth.RoadblockSpec(n_routes=2, frames_per_route=5, hard_start=1, hard_len=2)
    ds = synth.generate_roadblock(seed, spec)
    frames = sorted(ds.train_frames, key=lambda f: f.frame_id)
    return frames


def run_selfcheck(verbose: bool = False) -> list[CheckResult]:
    results: list[CheckResult] = []

    def record(name: str, passed: bool, detail: str) -> None:
        results.append(CheckResult(name, bool(passed), detail))

    weights = init_frozen_weights(PlannerConfig())
    frames = _check_frames()
    hard = [f for f in frames if f.difficulty == "challenging"]
    layer = 1
    rows, d_model = 2, weights.config.d_model
    rng = np.random.default_rng(99)
    pa = 0.5 * rng.normal(size=(rows, d_model))
    pb = 0.5 * rng.normal(size=(rows, d_model))
    direction = train.random_directions(d_model, 3, seed=1)

    # gradient of SupCon w.r.t. P_A entries vs central differences
    def supcon_fn(p):
        tape = Tape()
        leaf = tape.leaf(p)
        reps = [losses.rep_node(weights, tape, f, leaf, None, layer, True) for f in frames]
        node = losses.supcon_loss_node(tape, reps, [f.difficulty == "challenging" for f in frames],
                                       [f.taxonomy for f in frames], 0.1, 0.5)
        return float(node.value), backward(tape, node)[leaf.idx].data

    err = grad_check(supcon_fn, Tensor(pa), step=1e-5)
    record("grad supcon", err <= 1e-4, f"max rel err {err:.3e}")

    # gradients of plan/dir/reg/total w.r.t. P_B entries
    base = losses.baseline_reps(weights, pa, frames, layer)

    def objective_fn(lam1, lam2, part):
        def fn(p):
            tape = Tape()
            pa_node = tape.constant(pa)
            leaf = tape.leaf(p)
            nodes = losses.stage2_objective_nodes(weights, tape, frames, pa_node, leaf,
                                                  direction.directions, base, lam1, lam2, layer)
            return float(nodes[part].value), backward(tape, nodes[part])[leaf.idx].data
        return fn

    for part, lam1, lam2 in (("plan", 0.1, 0.1), ("dir", 0.1, 0.1),
                             ("reg", 0.1, 0.1), ("total", 0.1, 0.1)):
        err = grad_check(objective_fn(lam1, lam2, part), Tensor(pb), step=1e-5)
        record(f"grad {part}", err <= 1e-4, f"max rel err {err:.3e}")

    # SupCon value vs brute force on random normalized batches
    worst = 0.0
    for trial in range(5):
        trng = np.random.default_rng(1000 + trial)
        size = int(trng.integers(3, 9))
        h = trng.normal(size=(size, 6))
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        challenging = [bool(trng.integers(0, 2)) for _ in range(size)]
        if sum(challenging) < 2:
            challenging[0] = challenging[1] = True
        taxonomy = [("a" if trng.integers(0, 2) else "b") for _ in range(size)]
        value, _ = losses.supcon_loss(h, challenging, taxonomy, 0.1, 0.5)
        oracle = brute_force_supcon(h, challenging, taxonomy, 0.1, 0.5)
        worst = max(worst, abs(value - oracle))
    record("supcon brute force", worst <= 1e-10, f"max |diff| {worst:.3e}")

    # direction discovery vs power iteration with deflation
    worst = 0.0
    for trial in range(3):
        trng = np.random.default_rng(2000 + trial)
        res = trng.normal(size=(12, 8))
        impl = train.directions_from_residuals(res, 3).directions
        oracle, _ = power_iteration_directions(res, 3)
        worst = max(worst, float(np.abs(impl - oracle).max()))
    record("direction power iteration", worst <= 1e-8, f"max |diff| {worst:.3e}")

    # planner structure: instructions never influence visual states
    f0 = frames[0]
    ids = list(f0.instruction_tokens)
    flipped = [(t + 1) % weights.config.vocab_size for t in ids]
    _, h_a, layout = forward(weights, f0.visual_features, ids, pa, pb)
    _, h_b, _ = forward(weights, f0.visual_features, flipped, pa, pb)
    start, stop = layout.visual
    same = all(np.array_equal(ha[start:stop], hb[start:stop])
               for ha, hb in zip(h_a, h_b))
    record("visual states ignore instructions", same, "bit-identical visual rows")

    # prompts cannot reach embeddings (layer 0)
    _, h_p, _ = forward(weights, f0.visual_features, ids, pa, pb)
    _, h_0, _ = forward(weights, f0.visual_features, ids, None, None)
    record("layer-0 prompt independence",
           np.array_equal(h_p[0][start:stop], h_0[0][start:stop]),
           "embeddings unchanged by prompts")

    # zero-row P_B is exactly absence
    empty = np.zeros((0, d_model))
    t_none, h_none, _ = forward(weights, f0.visual_features, ids, pa, None)
    t_zero, h_zero, _ = forward(weights, f0.visual_features, ids, pa, empty)
    identical = (t_none == t_zero and
                 all(np.array_equal(a, b) for a, b in zip(h_none, h_zero)))
    record("zero-row prompt is absence", identical, "hidden states bit-identical")

    # Adam against the hand-rolled scalar recurrence
    grads = [0.3, -0.7, 0.01]
    param = np.zeros(())
    state = AdamState.zeros(param.shape)
    got = []
    for g in grads:
        param, state = adam_step(param, np.asarray(g), state, lr=0.1)
        got.append(float(param))
    expect = adam_scalar_trace(grads, lr=0.1)
    err = max(abs(a - b) for a, b in zip(got, expect))
    record("adam scalar trace", err <= 1e-12, f"max |diff| {err:.3e}")

    # registry round trip in a scratch store
    with tempfile.TemporaryDirectory() as tmp:
        store = registry.PromptStore(tmp)
        rec = registry.RegistryRecord("selfcheck", pa, pb, layer, d_model,
                                      weights_checksum(weights))
        store.put(rec)
        got_rec = store.get("selfcheck")
        ok = (np.array_equal(got_rec.prompt_a, pa) and
              np.array_equal(got_rec.prompt_b, pb) and got_rec.version == 1)
        record("registry round trip", ok, "bit-exact prompts, version 1")

    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        lines.append(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    failed = sum(1 for r in results if not r.passed)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
