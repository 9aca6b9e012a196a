"""Dense float64 tensors with tape-based reverse-mode differentiation.

Deliberately small: every primitive records exactly one node on a ``Tape``,
and :func:`backward` replays the tape once in reverse, accumulating
gradients into the recorded leaves.  There is no broadcasting beyond
row-wise bias addition, no views, and no global state; a tape belongs to
one owner and independent tapes can run concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """An operation received shape-incompatible inputs."""

    def __init__(self, op: str, *shapes) -> None:
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class GradError(RuntimeError):
    """backward() was asked for something the tape cannot provide."""


def _all_finite(arr: np.ndarray) -> bool:
    # Fast screen: any NaN/Inf makes the sum non-finite. A finite sum can
    # only be reported for an all-finite array unless values are near
    # overflow, in which case the exact scan below settles it.
    if arr.size == 0:
        return True
    if math.isfinite(float(arr.sum())):
        return True
    return bool(np.isfinite(arr).all())


class Tensor:
    """Immutable row-major float64 array. Rejects NaN/Inf at construction."""

    __slots__ = ("data",)

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64)
        if not _all_finite(arr):
            raise ValueError("Tensor rejects non-finite values")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal: adopt a freshly computed array without copying.
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if not _all_finite(arr):
            raise ValueError("Tensor rejects non-finite values")
        arr.setflags(write=False)
        obj = object.__new__(cls)
        obj.data = arr
        return obj

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class TapeNode:
    """One recorded value: a leaf parameter, a constant, or an op output."""

    __slots__ = ("tape", "idx", "tensor", "op", "parents", "vjp", "is_leaf")

    def __init__(self, tape, idx, tensor, op, parents, vjp, is_leaf) -> None:
        self.tape = tape
        self.idx = idx
        self.tensor = tensor
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.is_leaf = is_leaf

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple:
        return self.tensor.data.shape

    def __repr__(self) -> str:
        kind = "leaf" if self.is_leaf else self.op
        return f"TapeNode({self.idx}, {kind}, shape={self.shape})"


def _as2d(name: str, node: "TapeNode") -> np.ndarray:
    if node.value.ndim != 2:
        raise ShapeError(name, node.shape)
    return node.value


class Tape:
    """Ordered record of primitive operations; append order is topological."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, tensor: Tensor, op: str, parents=(), vjp=None, is_leaf=False) -> TapeNode:
        for p in parents:
            if p.tape is not self:
                raise GradError(f"{op}: input node belongs to a different tape")
        node = TapeNode(self, len(self.nodes), tensor, op, tuple(parents), vjp, is_leaf)
        self.nodes.append(node)
        return node

    # -- inputs ------------------------------------------------------------

    def leaf(self, values) -> TapeNode:
        """Register a differentiable parameter."""
        t = values if isinstance(values, Tensor) else Tensor(values)
        return self._record(t, "leaf", is_leaf=True)

    def constant(self, values) -> TapeNode:
        """Register a non-differentiable input."""
        t = values if isinstance(values, Tensor) else Tensor(values)
        return self._record(t, "constant")

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: TapeNode, b: TapeNode) -> TapeNode:
        av, bv = _as2d("matmul", a), _as2d("matmul", b)
        if av.shape[1] != bv.shape[0]:
            raise ShapeError("matmul", av.shape, bv.shape)

        def vjp(g):
            return g @ bv.T, av.T @ g

        return self._record(Tensor._wrap(av @ bv), "matmul", (a, b), vjp)

    def add(self, a: TapeNode, b: TapeNode) -> TapeNode:
        av, bv = a.value, b.value
        if av.shape == bv.shape:
            vjp = lambda g: (g, g)
        elif av.ndim == 2 and bv.shape == (1, av.shape[1]):
            # row-wise bias: the only broadcast this engine allows
            vjp = lambda g: (g, g.sum(axis=0, keepdims=True))
        else:
            raise ShapeError("add", av.shape, bv.shape)
        return self._record(Tensor._wrap(av + bv), "add", (a, b), vjp)

    def scale(self, a: TapeNode, s: float) -> TapeNode:
        s = float(s)
        return self._record(Tensor._wrap(a.value * s), "scale", (a,), lambda g: (g * s,))

    def mul(self, a: TapeNode, b: TapeNode) -> TapeNode:
        av, bv = a.value, b.value
        if av.shape != bv.shape:
            raise ShapeError("mul", av.shape, bv.shape)
        return self._record(Tensor._wrap(av * bv), "mul", (a, b), lambda g: (g * bv, g * av))

    def concat_rows(self, parts: Sequence[TapeNode]) -> TapeNode:
        if not parts:
            raise ShapeError("concat_rows", "no inputs")
        vals = [_as2d("concat_rows", p) for p in parts]
        cols = vals[0].shape[1]
        if any(v.shape[1] != cols for v in vals):
            raise ShapeError("concat_rows", *[v.shape for v in vals])
        splits = np.cumsum([v.shape[0] for v in vals])[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=0))

        return self._record(Tensor._wrap(np.concatenate(vals, axis=0)), "concat_rows", tuple(parts), vjp)

    def slice_rows(self, a: TapeNode, start: int, stop: int) -> TapeNode:
        av = _as2d("slice_rows", a)
        if not (0 <= start <= stop <= av.shape[0]):
            raise ShapeError("slice_rows", av.shape, (start, stop))

        def vjp(g):
            out = np.zeros_like(av)
            out[start:stop] = g
            return (out,)

        return self._record(Tensor._wrap(av[start:stop].copy()), "slice_rows", (a,), vjp)

    def transpose(self, a: TapeNode) -> TapeNode:
        av = _as2d("transpose", a)
        return self._record(Tensor._wrap(av.T.copy()), "transpose", (a,), lambda g: (g.T,))

    def reshape(self, a: TapeNode, shape: tuple) -> TapeNode:
        av = a.value
        if int(np.prod(shape)) != av.size:
            raise ShapeError("reshape", av.shape, shape)
        return self._record(
            Tensor._wrap(av.reshape(shape).copy()), "reshape", (a,),
            lambda g: (g.reshape(av.shape),),
        )

    def relu(self, a: TapeNode) -> TapeNode:
        av = a.value
        active = av > 0.0  # subgradient at exactly 0 is 0
        return self._record(Tensor._wrap(np.where(active, av, 0.0)), "relu", (a,), lambda g: (g * active,))

    def row_softmax(self, a: TapeNode, mask: np.ndarray | None = None) -> TapeNode:
        """Row-wise softmax; masked-out entries (mask False) get probability 0."""
        av = _as2d("row_softmax", a)
        if mask is not None:
            if mask.shape != av.shape:
                raise ShapeError("row_softmax", av.shape, mask.shape)
            if not mask.any(axis=1).all():
                raise ShapeError("row_softmax", "fully masked row")
            shifted = np.where(mask, av, -np.inf)
        else:
            shifted = av
        m = shifted.max(axis=1, keepdims=True)
        e = np.exp(shifted - m)
        if mask is not None:
            e = np.where(mask, e, 0.0)
        p = e / e.sum(axis=1, keepdims=True)

        def vjp(g):
            # rows of masked entries hold p == 0, which zeroes their grads too
            return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

        return self._record(Tensor._wrap(p), "row_softmax", (a,), vjp)

    def layer_norm(self, a: TapeNode, eps: float = LAYER_NORM_EPS) -> TapeNode:
        av = _as2d("layer_norm", a)
        mu = av.mean(axis=1, keepdims=True)
        var = ((av - mu) ** 2).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (av - mu) * inv

        def vjp(g):
            gm = g.mean(axis=1, keepdims=True)
            gx = (g * xhat).mean(axis=1, keepdims=True)
            return (inv * (g - gm - xhat * gx),)

        return self._record(Tensor._wrap(xhat), "layer_norm", (a,), vjp)

    def mean_rows_over(self, a: TapeNode, rows: Sequence[int]) -> TapeNode:
        av = _as2d("mean_rows_over", a)
        idx = np.asarray(list(rows), dtype=np.intp)
        if idx.size == 0:
            raise ShapeError("mean_rows_over", "empty index set")
        if idx.min() < 0 or idx.max() >= av.shape[0]:
            raise ShapeError("mean_rows_over", av.shape, tuple(rows))

        def vjp(g):
            out = np.zeros_like(av)
            out[idx] = g / idx.size
            return (out,)

        return self._record(
            Tensor._wrap(av[idx].mean(axis=0, keepdims=True)), "mean_rows_over", (a,), vjp
        )

    def l2_normalize_rows(self, a: TapeNode) -> TapeNode:
        av = _as2d("l2_normalize_rows", a)
        norms = np.sqrt((av * av).sum(axis=1, keepdims=True))
        if (norms == 0.0).any():
            raise ValueError("l2_normalize_rows: zero-norm row")
        h = av / norms

        def vjp(g):
            return ((g - h * (g * h).sum(axis=1, keepdims=True)) / norms,)

        return self._record(Tensor._wrap(h), "l2_normalize_rows", (a,), vjp)

    def dot(self, a: TapeNode, b: TapeNode) -> TapeNode:
        av, bv = a.value, b.value
        if av.shape != bv.shape:
            raise ShapeError("dot", av.shape, bv.shape)
        out = np.asarray(float((av * bv).sum()))
        return self._record(Tensor._wrap(out), "dot", (a, b), lambda g: (g * bv, g * av))

    def squared_norm(self, a: TapeNode) -> TapeNode:
        av = a.value
        out = np.asarray(float((av * av).sum()))
        return self._record(Tensor._wrap(out), "squared_norm", (a,), lambda g: (2.0 * g * av,))

    def log_sum_exp(self, a: TapeNode, mask: np.ndarray | None = None) -> TapeNode:
        """log(sum(exp(x))) over all (or all unmasked) entries; scalar output."""
        av = a.value
        if mask is not None:
            if mask.shape != av.shape:
                raise ShapeError("log_sum_exp", av.shape, mask.shape)
            if not mask.any():
                raise ShapeError("log_sum_exp", "everything masked")
            shifted = np.where(mask, av, -np.inf)
        else:
            shifted = av
        m = float(shifted.max())
        e = np.exp(shifted - m)
        if mask is not None:
            e = np.where(mask, e, 0.0)
        total = float(e.sum())
        w = e / total  # softmax weights; zero at masked entries

        def vjp(g):
            return (g * w,)

        return self._record(Tensor._wrap(np.asarray(m + math.log(total))), "log_sum_exp", (a,), vjp)

    def mean_row_norms(self, a: TapeNode) -> TapeNode:
        """Mean Euclidean norm of the rows; the ADE kernel.

        Gradient of a zero-norm row is defined as 0 (same convention as the
        relu kink).
        """
        av = _as2d("mean_row_norms", a)
        norms = np.sqrt((av * av).sum(axis=1, keepdims=True))
        rows = av.shape[0]

        def vjp(g):
            safe = np.where(norms > 0.0, norms, 1.0)
            return (g * np.where(norms > 0.0, av / (rows * safe), 0.0),)

        return self._record(Tensor._wrap(np.asarray(float(norms.mean()))), "mean_row_norms", (a,), vjp)


def backward(tape: Tape, loss: TapeNode) -> dict[int, Tensor]:
    """Reverse sweep from ``loss``; returns gradients for every leaf on the tape.

    Leaves the loss does not reach get zero gradients. The sweep visits each
    node at most once, in reverse record order, and accumulates (never
    overwrites) gradients flowing into shared inputs. Calling it twice on
    the same tape gives identical results.
    """
    if loss.tape is not tape:
        raise GradError("loss node is not on this tape")
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise GradError(f"loss node must be scalar-shaped, got {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.idx: np.ones_like(loss.value)}
    out: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.idx + 1]):
        g = grads.pop(node.idx, None)
        if node.is_leaf:
            out[node.idx] = Tensor._wrap(g if g is not None else np.zeros_like(node.value))
            continue
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            acc = grads.get(parent.idx)
            grads[parent.idx] = pg if acc is None else acc + pg
    for node in tape.nodes[loss.idx + 1 :]:
        if node.is_leaf:
            out[node.idx] = Tensor._wrap(np.zeros_like(node.value))
    return out


def grad_check(
    fn: Callable[[Tensor], tuple[float, np.ndarray]],
    point: Tensor,
    step: float,
) -> float:
    """Compare an analytic gradient against central finite differences.

    ``fn(x)`` must return ``(loss_value, gradient_wrt_x)``. Returns the max
    over coordinates of ``|analytic - central_difference| / max(1, |analytic|)``.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    _, grad = fn(point)
    grad = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=np.float64)
    if grad.shape != point.data.shape:
        raise ShapeError("grad_check", grad.shape, point.data.shape)

    base = point.data.ravel()
    ganalytic = grad.ravel()
    worst = 0.0
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + step
        hi = float(fn(Tensor(bumped.reshape(point.shape)))[0])
        bumped[i] = base[i] - step
        lo = float(fn(Tensor(bumped.reshape(point.shape)))[0])
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValueError(f"grad_check: non-finite loss at coordinate {i}")
        numeric = (hi - lo) / (2.0 * step)
        err = abs(ganalytic[i] - numeric) / max(1.0, abs(ganalytic[i]))
        if err > worst:
            worst = err
    return worst
