"""Frozen toy trajectory planner.

A small pre-LN transformer maps one frame's visual features plus an
instruction token sequence to an 8-waypoint trajectory. Soft prompts are
spliced between the visual tokens and the instruction tokens, giving the
sequence layout ``[visual | prompt_a | prompt_b | instruction]``.

Attention visibility: the prefix (visual tokens and both prompts) is fully
bidirectional, instruction tokens are causal and see the whole prefix.
Consequences relied on elsewhere:

  * perturbing instruction embeddings never changes visual-range hidden
    states (nothing attends forward into the instruction block);
  * prompts influence pooled visual representations from layer 1 on, while
    layer 0 (embeddings + positional encodings) is prompt-independent.

Weights are generated once from a seed and never mutated; every function
here is a pure function of its inputs. The backbone is random, but the
trajectory head is fit (closed form, seeded) on synthetic driving with
rare hazards, so the frozen planner behaves like a trained model that
under-reacts to hazard signatures rather than a random map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, TapeNode, Tensor
from .textio import fmt_array, sha256_hex


@dataclass(frozen=True)
class PlannerConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    k_visual: int = 16      # visual token count
    l_instr: int = 4        # instruction token count
    vocab_size: int = 64
    feature_dim: int = 24   # raw frame feature width
    mlp_hidden: int = 64
    extract_layer: int = 1  # layer whose pooled state feeds the prompt losses
    weight_seed: int = 42
    waypoint_count: int = 8
    waypoint_dim: int = 2
    max_positions: int = 192
    head_scale: float = 1.0  # trajectory head gain on top of the prior arc
    prior_speed: float = 6.0  # m/s of the straight arc in the head bias
    dt: float = 0.5           # waypoint spacing in seconds (2 Hz)
    # trajectory-head fit corpus: the head is ridge-fit on seeded synthetic
    # driving where hazards are rare, so the frozen planner tracks normal
    # frames well but under-responds to hazard signatures
    pretrain_roadblocks: int = 6
    pretrain_hazard_len: int = 2   # hazard time steps per 13-frame route
    head_ridge: float = 1.0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not (0 <= self.extract_layer <= self.n_layers):
            raise ValueError("extract_layer out of range")
        if self.k_visual < 1 or self.l_instr < 1:
            raise ValueError("k_visual and l_instr must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def waypoint_values(self) -> int:
        return self.waypoint_count * self.waypoint_dim


@dataclass(frozen=True)
class SequenceLayout:
    """Half-open [start, stop) ranges into the concatenated sequence."""

    visual: tuple[int, int]
    prompt_a: tuple[int, int]
    prompt_b: tuple[int, int]
    instruction: tuple[int, int]

    @property
    def total(self) -> int:
        return self.instruction[1]

    @property
    def prefix_end(self) -> int:
        # end of the bidirectional region
        return self.instruction[0]


class Trajectory:
    """8 planar waypoints in meters, ego frame, 0.5 s apart."""

    __slots__ = ("waypoints",)

    def __init__(self, waypoints) -> None:
        arr = np.array(waypoints, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError(f"waypoints must be (n, 2), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("waypoints must be finite")
        arr.setflags(write=False)
        self.waypoints = arr

    def __repr__(self) -> str:
        return f"Trajectory({self.waypoints.shape[0]} waypoints)"

    def __eq__(self, other) -> bool:
        return isinstance(other, Trajectory) and np.array_equal(self.waypoints, other.waypoints)


@dataclass(frozen=True)
class LayerWeights:
    wq: tuple       # per head, (d_model, head_dim)
    wk: tuple
    wv: tuple
    wo: tuple       # per head, (head_dim, d_model)
    w1: np.ndarray  # (d_model, mlp_hidden)
    w2: np.ndarray  # (mlp_hidden, d_model)


@dataclass(frozen=True)
class PlannerWeights:
    config: PlannerConfig
    w_visual: np.ndarray   # (feature_dim, k_visual * d_model)
    embed: np.ndarray      # (vocab_size, d_model)
    pos: np.ndarray        # (max_positions, d_model), sinusoidal
    layers: tuple          # LayerWeights per layer
    w_head: np.ndarray     # (d_model, waypoint_values)
    b_head: np.ndarray     # (1, waypoint_values), straight prior arc


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _sinusoidal_positions(n_pos: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    dim = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * dim / d_model)
    out = np.zeros((n_pos, d_model))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def prior_arc(config: PlannerConfig) -> np.ndarray:
    """Straight constant-speed arc along +x; the trajectory head's bias."""
    t = config.dt * np.arange(1, config.waypoint_count + 1)
    arc = np.zeros((config.waypoint_count, config.waypoint_dim))
    arc[:, 0] = config.prior_speed * t
    return arc


def init_frozen_weights(config: PlannerConfig) -> PlannerWeights:
    """Build the frozen planner, fully determined by weight_seed.

    Backbone weights come from one PRNG stream in a fixed, documented
    order: visual projection, token embedding table, then per layer
    (per head Wq, per head Wk, per head Wv, per head Wo, MLP W1, MLP W2).
    Entries are normal with std fan_in ** -0.5 except the embedding table
    (std 1). Positional encodings and the head bias are deterministic
    functions of the config and consume no randomness.

    The trajectory head is then ridge-fit against a seeded synthetic
    corpus (seed derived from weight_seed) in which hazard frames are a
    small minority. That gives the planner the shape prompt adaptation
    assumes: accurate on normal frames, and a correct-but-undersized
    response to hazard signatures that corrections can amplify.
    """
    rng = np.random.default_rng(np.random.SeedSequence(config.weight_seed))
    d = config.d_model
    dh = config.head_dim

    w_visual = rng.normal(0.0, config.feature_dim ** -0.5,
                          (config.feature_dim, config.k_visual * d))
    embed = rng.normal(0.0, 1.0, (config.vocab_size, d))

    layers = []
    for _ in range(config.n_layers):
        wq = tuple(_freeze(rng.normal(0.0, d ** -0.5, (d, dh))) for _ in range(config.n_heads))
        wk = tuple(_freeze(rng.normal(0.0, d ** -0.5, (d, dh))) for _ in range(config.n_heads))
        wv = tuple(_freeze(rng.normal(0.0, d ** -0.5, (d, dh))) for _ in range(config.n_heads))
        wo = tuple(_freeze(rng.normal(0.0, dh ** -0.5, (dh, d))) for _ in range(config.n_heads))
        w1 = rng.normal(0.0, d ** -0.5, (d, config.mlp_hidden))
        w2 = rng.normal(0.0, config.mlp_hidden ** -0.5, (config.mlp_hidden, d))
        layers.append(LayerWeights(wq, wk, wv, wo, _freeze(w1), _freeze(w2)))

    b_head = prior_arc(config).reshape(1, config.waypoint_values)
    backbone = PlannerWeights(
        config=config,
        w_visual=_freeze(w_visual),
        embed=_freeze(embed),
        pos=_freeze(_sinusoidal_positions(config.max_positions, d)),
        layers=tuple(layers),
        w_head=_freeze(np.zeros((d, config.waypoint_values))),
        b_head=_freeze(b_head),
    )
    return replace(backbone, w_head=_freeze(_fit_trajectory_head(backbone)))


def _fit_trajectory_head(backbone: PlannerWeights) -> np.ndarray:
    """Ridge regression of prior-arc residuals on the head's input state.

    The corpus is drawn from the scenario generator (seed stream
    [weight_seed, 1000 + i] per corpus roadblock, disjoint from any
    evaluation suite) with short hazard strips, so hazard rows are rare.
    Rarity plus the ridge term keep the fitted hazard response real but
    deliberately undersized. The regression target excludes the head bias
    (the constant-speed prior arc); head_scale multiplies the fitted part
    only, so it stays a pure gain on learned behavior.
    """
    from . import synth  # deferred: synth needs this module's Trajectory type

    config = backbone.config
    xs, ys = [], []
    base = prior_arc(config).reshape(-1)
    for i in range(config.pretrain_roadblocks):
        spec = synth.RoadblockSpec(
            roadblock_id=f"fit{i:02d}",
            index=1000 + i,
            hard_start=5,
            hard_len=config.pretrain_hazard_len,
            feature_dim=config.feature_dim,
            l_instr=config.l_instr,
            vocab_size=config.vocab_size,
            waypoint_count=config.waypoint_count,
            dt=config.dt,
        )
        ds = synth.generate_roadblock(config.weight_seed, spec)
        for f in ds.train_frames + ds.test_frames:
            _, hidden, layout = forward(backbone, f.visual_features, f.instruction_tokens)
            tape = Tape()
            normed = tape.layer_norm(tape.constant(hidden[-1]))
            xs.append(normed.value[layout.total - 1])
            ys.append(f.gt_trajectory.waypoints.reshape(-1) - base)
    x = np.asarray(xs)
    y = np.asarray(ys)
    gram = x.T @ x + config.head_ridge * np.eye(config.d_model)
    return np.linalg.solve(gram, x.T @ y)


def _weight_arrays(weights: PlannerWeights):
    yield "w_visual", weights.w_visual
    yield "embed", weights.embed
    yield "pos", weights.pos
    for i, lw in enumerate(weights.layers):
        for h in range(weights.config.n_heads):
            yield f"layer{i}.wq{h}", lw.wq[h]
            yield f"layer{i}.wk{h}", lw.wk[h]
            yield f"layer{i}.wv{h}", lw.wv[h]
            yield f"layer{i}.wo{h}", lw.wo[h]
        yield f"layer{i}.w1", lw.w1
        yield f"layer{i}.w2", lw.w2
    yield "w_head", weights.w_head
    yield "b_head", weights.b_head


def weights_checksum(weights: PlannerWeights) -> str:
    """SHA-256 of the canonical 17-digit text dump of every array."""
    parts = []
    for name, arr in _weight_arrays(weights):
        parts.append(name)
        parts.extend(fmt_array(arr))
    return sha256_hex("\n".join(parts))


def attention_mask(layout: SequenceLayout) -> np.ndarray:
    """Row i may attend to column j iff j is in the bidirectional prefix
    (visual + prompts) or j <= i."""
    n = layout.total
    idx = np.arange(n)
    return (idx[None, :] < layout.prefix_end) | (idx[None, :] <= idx[:, None])


@dataclass
class ForwardPass:
    """Everything a forward produced, with nodes still on the caller's tape."""

    layout: SequenceLayout
    hidden: list          # TapeNode per layer, index 0 = embeddings + positions
    trajectory_node: TapeNode | None = None
    trajectory: Trajectory | None = None


def _validate_inputs(config: PlannerConfig, features, instruction_ids) -> None:
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape != (config.feature_dim,):
        raise ValueError(f"features must have shape ({config.feature_dim},), got {feats.shape}")
    ids = list(instruction_ids)
    # l_instr is the generator's nominal length; longer sequences are legal
    # (the notice baseline appends tokens) as long as max_positions holds
    if not ids:
        raise ValueError("need at least one instruction token")
    if any(not (0 <= t < config.vocab_size) for t in ids):
        raise ValueError("instruction token id out of vocabulary")


def forward_on_tape(
    weights: PlannerWeights,
    tape: Tape,
    features,
    instruction_ids,
    prompt_a: TapeNode | None = None,
    prompt_b: TapeNode | None = None,
    up_to_layer: int | None = None,
) -> ForwardPass:
    """Run the planner, recording every op on ``tape``.

    ``prompt_a`` / ``prompt_b`` are nodes already on the tape (leaves when
    the caller wants gradients) with shape (rows, d_model); rows may be 0.
    ``up_to_layer`` stops after that many transformer blocks and skips the
    trajectory head; use it when only layer-level representations matter.
    """
    config = weights.config
    _validate_inputs(config, features, instruction_ids)
    for name, p in (("prompt_a", prompt_a), ("prompt_b", prompt_b)):
        if p is not None and (p.value.ndim != 2 or p.value.shape[1] != config.d_model):
            raise ValueError(f"{name} must be (rows, {config.d_model}), got {p.shape}")

    depth = config.n_layers if up_to_layer is None else up_to_layer
    if not (0 <= depth <= config.n_layers):
        raise ValueError("up_to_layer out of range")

    feats = np.asarray(features, dtype=np.float64).reshape(1, config.feature_dim)
    ids = list(instruction_ids)

    k = config.k_visual
    ra = 0 if prompt_a is None else prompt_a.value.shape[0]
    rb = 0 if prompt_b is None else prompt_b.value.shape[0]
    layout = SequenceLayout(
        visual=(0, k),
        prompt_a=(k, k + ra),
        prompt_b=(k + ra, k + ra + rb),
        instruction=(k + ra + rb, k + ra + rb + len(ids)),
    )
    if layout.total > config.max_positions:
        raise ValueError(f"sequence length {layout.total} exceeds max_positions")

    visual = tape.reshape(
        tape.matmul(tape.constant(feats), tape.constant(weights.w_visual)),
        (k, config.d_model),
    )
    instr = tape.constant(weights.embed[ids])
    parts = [visual]
    if ra:
        parts.append(prompt_a)
    if rb:
        parts.append(prompt_b)
    parts.append(instr)
    x = tape.concat_rows(parts)
    x = tape.add(x, tape.constant(weights.pos[: layout.total]))

    mask = attention_mask(layout)
    inv_sqrt_dh = 1.0 / math.sqrt(config.head_dim)
    hidden = [x]
    for li in range(depth):
        lw = weights.layers[li]
        normed = tape.layer_norm(x)
        attn_sum = None
        for h in range(config.n_heads):
            q = tape.matmul(normed, tape.constant(lw.wq[h]))
            key = tape.matmul(normed, tape.constant(lw.wk[h]))
            val = tape.matmul(normed, tape.constant(lw.wv[h]))
            scores = tape.scale(tape.matmul(q, tape.transpose(key)), inv_sqrt_dh)
            probs = tape.row_softmax(scores, mask=mask)
            head_out = tape.matmul(tape.matmul(probs, val), tape.constant(lw.wo[h]))
            attn_sum = head_out if attn_sum is None else tape.add(attn_sum, head_out)
        x = tape.add(x, attn_sum)
        pre_mlp = tape.layer_norm(x)
        mlp = tape.matmul(tape.relu(tape.matmul(pre_mlp, tape.constant(lw.w1))), tape.constant(lw.w2))
        x = tape.add(x, mlp)
        hidden.append(x)

    result = ForwardPass(layout=layout, hidden=hidden)
    if depth == config.n_layers:
        final = tape.layer_norm(x)
        last = tape.slice_rows(final, layout.total - 1, layout.total)
        out = tape.scale(tape.matmul(last, tape.constant(weights.w_head)), config.head_scale)
        out = tape.add(out, tape.constant(weights.b_head))
        result.trajectory_node = tape.reshape(out, (config.waypoint_count, config.waypoint_dim))
        result.trajectory = Trajectory(result.trajectory_node.value)
    return result


def pool_on_tape(tape: Tape, hidden_node: TapeNode, layout: SequenceLayout,
                 normalize: bool) -> TapeNode:
    """Mean of the layer's rows over the visual range only; optionally unit-norm."""
    start, stop = layout.visual
    if stop <= start:
        raise ValueError("empty visual range")
    pooled = tape.mean_rows_over(hidden_node, range(start, stop))
    if normalize:
        pooled = tape.l2_normalize_rows(pooled)
    return pooled


def forward(
    weights: PlannerWeights,
    features,
    instruction_ids,
    prompt_a: np.ndarray | None = None,
    prompt_b: np.ndarray | None = None,
) -> tuple[Trajectory, list[np.ndarray], SequenceLayout]:
    """Plain forward: same computation as forward_on_tape on a private tape."""
    tape = Tape()
    pa = None if prompt_a is None else tape.constant(np.asarray(prompt_a, dtype=np.float64))
    pb = None if prompt_b is None else tape.constant(np.asarray(prompt_b, dtype=np.float64))
    fp = forward_on_tape(weights, tape, features, instruction_ids, pa, pb)
    return fp.trajectory, [h.value for h in fp.hidden], fp.layout


def pool_representation(hidden_states, layout: SequenceLayout, layer: int,
                        normalize: bool) -> np.ndarray:
    """Pooled d_model vector from stored hidden states (no tape involved)."""
    start, stop = layout.visual
    if stop <= start:
        raise ValueError("empty visual range")
    h = np.asarray(hidden_states[layer])
    pooled = h[start:stop].mean(axis=0)
    if normalize:
        norm = float(np.sqrt((pooled * pooled).sum()))
        if norm == 0.0:
            raise ValueError("cannot normalize a zero pooled representation")
        pooled = pooled / norm
    return pooled
