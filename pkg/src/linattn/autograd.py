"""Reverse-mode gradients over the matrix op set.

A Tape records forward ops in topological order; backward() walks the
records once in reverse and accumulates adjoints into the leaves. The
tape is rebuilt every step (no graph caching) and rejects a second
backward call. finite_diff() is the independent central-difference
oracle the adjoint rules are tested against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import matrix as mx
from .matrix import Matrix


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: Matrix
    aux: dict
    needs_grad: bool


# op kind -> adjoint rule; each rule maps (node, inputs' values, upstream grad
# ndarray) to one gradient ndarray (or None) per input.
_ADJOINTS: dict[str, Callable] = {}


def _adjoint(kind: str):
    def register(fn):
        _ADJOINTS[kind] = fn
        return fn
    return register


def op_kinds() -> tuple[str, ...]:
    """All differentiable op kinds registered on the tape."""
    return tuple(sorted(_ADJOINTS))


class Tape:
    """Single-owner op recorder; build a fresh one per training step."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._backward_done = False

    def __len__(self) -> int:
        return len(self._nodes)

    def node(self, nid: int) -> Node:
        if not 0 <= nid < len(self._nodes):
            raise ValueError(f"unknown node id {nid}")
        return self._nodes[nid]

    def value(self, nid: int) -> Matrix:
        return self.node(nid).value

    def leaf(self, value: Matrix) -> int:
        """Gradient-carrying input (a trainable parameter)."""
        return self._append(Node("leaf", (), value, {}, True))

    def constant(self, value: Matrix) -> int:
        """Input that never receives a gradient (data, masks, selectors)."""
        return self._append(Node("const", (), value, {}, False))

    def record(self, kind: str, inputs: tuple[int, ...], value: Matrix, aux: dict | None = None) -> int:
        """Append an op node. The op kind must have a registered adjoint."""
        if kind not in _ADJOINTS:
            raise ValueError(f"unknown op kind {kind!r}")
        ivals = [self.node(i) for i in inputs]  # validates ids
        needs = any(n.needs_grad for n in ivals)
        return self._append(Node(kind, tuple(inputs), value, dict(aux or {}), needs))

    def _append(self, node: Node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    # ---- op helpers: compute forward value, then record -------------------

    def matmul(self, a: int, b: int) -> int:
        v = mx.matmul(self.value(a), self.value(b))
        return self.record("matmul", (a, b), v)

    def add(self, a: int, b: int) -> int:
        return self.record("add", (a, b), mx.add(self.value(a), self.value(b)))

    def add_bias(self, x: int, bias: int) -> int:
        return self.record("add_bias", (x, bias), mx.add_bias(self.value(x), self.value(bias)))

    def scale(self, x: int, c: float) -> int:
        return self.record("scale", (x,), mx.scale(self.value(x), c), {"c": float(c)})

    def hadamard(self, a: int, b: int) -> int:
        return self.record("hadamard", (a, b), mx.hadamard(self.value(a), self.value(b)))

    def transpose(self, x: int) -> int:
        return self.record("transpose", (x,), mx.transpose(self.value(x)))

    def concat_cols(self, parts: list[int]) -> int:
        vals = [self.value(p) for p in parts]
        widths = [v.cols for v in vals]
        return self.record("concat_cols", tuple(parts), mx.concat_cols(vals), {"widths": widths})

    def softmax_rows(self, x: int) -> int:
        return self.record("softmax_rows", (x,), mx.softmax_rows(self.value(x)))

    def elu(self, x: int) -> int:
        return self.record("elu", (x,), mx.elu(self.value(x)))

    def gelu(self, x: int) -> int:
        return self.record("gelu", (x,), mx.gelu(self.value(x)))

    def l2_normalize_rows(self, x: int, scale_dim: int, epsilon: float) -> int:
        v = mx.l2_normalize_rows(self.value(x), scale_dim, epsilon)
        return self.record("l2_normalize_rows", (x,), v, {"epsilon": epsilon})

    def l2_normalize_cols(self, x: int, scale_len: int, epsilon: float) -> int:
        v = mx.l2_normalize_cols(self.value(x), scale_len, epsilon)
        return self.record("l2_normalize_cols", (x,), v, {"epsilon": epsilon})

    def layer_norm(self, x: int, gain: int, bias: int, epsilon: float = 1e-12) -> int:
        v = mx.layer_norm(self.value(x), self.value(gain), self.value(bias), epsilon)
        return self.record("layer_norm", (x, gain, bias), v, {"epsilon": epsilon})

    def dropout(self, x: int, mask: Matrix) -> int:
        """Apply a pre-sampled inverted-dropout mask; the mask is saved for backward."""
        v = mx.hadamard(self.value(x), mask)
        return self.record("dropout", (x,), v, {"mask": mask})

    def cross_entropy(self, scores: int, target: int) -> int:
        """-log softmax(scores)[target] for a 1 x V score row; returns a 1x1 node."""
        z = self.value(scores)
        if z.rows != 1:
            raise mx.ShapeError(f"cross_entropy: scores must be a 1-row matrix, got {z.shape}")
        if not 0 <= target < z.cols:
            raise ValueError(f"cross_entropy: target {target} out of range [0, {z.cols})")
        a = z.array[0]
        m = a.max()
        logsumexp = m + np.log(np.exp(a - m).sum())
        v = Matrix([[logsumexp - a[target]]])
        return self.record("cross_entropy", (scores,), v, {"target": int(target)})

    # ---- backward ----------------------------------------------------------

    def backward(self, loss_node: int) -> dict[int, Matrix]:
        """Gradients of the scalar at loss_node w.r.t. every leaf.

        A tape runs backward at most once; a second call is rejected.
        """
        if self._backward_done:
            raise RuntimeError("backward already ran on this tape; build a fresh tape")
        loss = self.node(loss_node)
        if loss.value.shape != (1, 1):
            raise ValueError(f"loss node must be 1x1, got {loss.value.shape}")
        self._backward_done = True

        grads: dict[int, np.ndarray] = {loss_node: np.ones((1, 1))}
        for nid in range(loss_node, -1, -1):
            node = self._nodes[nid]
            g = grads.pop(nid, None)
            if g is None or not node.needs_grad or node.kind in ("leaf", "const"):
                if g is not None and node.kind == "leaf":
                    grads[nid] = g
                continue
            in_vals = [self.value(i) for i in node.inputs]
            contributions = _ADJOINTS[node.kind](node, in_vals, g)
            for iid, contrib in zip(node.inputs, contributions):
                if contrib is None or not self._nodes[iid].needs_grad:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + contrib
                else:
                    grads[iid] = contrib

        return {
            nid: Matrix(g, copy=False)
            for nid, g in grads.items()
            if self._nodes[nid].kind == "leaf"
        }


# ---------------------------------------------------------------------------
# adjoint rules
# ---------------------------------------------------------------------------

@_adjoint("matmul")
def _adj_matmul(node, ins, g):
    a, b = ins
    return [g @ b.array.T, a.array.T @ g]


@_adjoint("add")
def _adj_add(node, ins, g):
    return [g, g]


@_adjoint("add_bias")
def _adj_add_bias(node, ins, g):
    return [g, g.sum(axis=0, keepdims=True)]


@_adjoint("scale")
def _adj_scale(node, ins, g):
    return [g * node.aux["c"]]


@_adjoint("hadamard")
def _adj_hadamard(node, ins, g):
    a, b = ins
    return [g * b.array, g * a.array]


@_adjoint("transpose")
def _adj_transpose(node, ins, g):
    return [g.T]


@_adjoint("concat_cols")
def _adj_concat_cols(node, ins, g):
    out, offset = [], 0
    for w in node.aux["widths"]:
        out.append(g[:, offset:offset + w])
        offset += w
    return out


@_adjoint("softmax_rows")
def _adj_softmax_rows(node, ins, g):
    s = node.value.array
    return [s * (g - (g * s).sum(axis=1, keepdims=True))]


@_adjoint("elu")
def _adj_elu(node, ins, g):
    x = ins[0].array
    # derivative is exp(x) on the negative branch, i.e. value + 1
    return [g * np.where(x >= 0.0, 1.0, node.value.array + 1.0)]


@_adjoint("gelu")
def _adj_gelu(node, ins, g):
    x = ins[0].array
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    d_inner = c * (1.0 + 3.0 * 0.044715 * x ** 2)
    return [g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner)]


@_adjoint("l2_normalize_rows")
def _adj_l2_rows(node, ins, g):
    x = ins[0].array
    eps = node.aux["epsilon"]
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    scale_dim = np.sqrt(float(x.shape[1]))
    safe = np.maximum(norms, eps)
    raw = (g - x * ((g * x).sum(axis=1, keepdims=True) / safe ** 2)) / (scale_dim * safe)
    # epsilon-clamped rows sit at a nondifferentiable point; pass zero there
    return [np.where(norms > eps, raw, 0.0)]


@_adjoint("l2_normalize_cols")
def _adj_l2_cols(node, ins, g):
    x = ins[0].array
    eps = node.aux["epsilon"]
    norms = np.linalg.norm(x, axis=0, keepdims=True)
    scale_len = np.sqrt(float(x.shape[0]))
    safe = np.maximum(norms, eps)
    raw = (g - x * ((g * x).sum(axis=0, keepdims=True) / safe ** 2)) / (scale_len * safe)
    return [np.where(norms > eps, raw, 0.0)]


@_adjoint("layer_norm")
def _adj_layer_norm(node, ins, g):
    x, gain, _bias = (v.array for v in ins)
    eps = node.aux["epsilon"]
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gh = g * gain
    n = x.shape[1]
    dx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).sum(axis=1, keepdims=True) / n)
    dgain = (g * xhat).sum(axis=0, keepdims=True)
    dbias = g.sum(axis=0, keepdims=True)
    return [dx, dgain, dbias]


@_adjoint("dropout")
def _adj_dropout(node, ins, g):
    return [g * node.aux["mask"].array]


@_adjoint("cross_entropy")
def _adj_cross_entropy(node, ins, g):
    z = ins[0].array[0]
    e = np.exp(z - z.max())
    p = e / e.sum()
    p[node.aux["target"]] -= 1.0
    return [g[0, 0] * p[None, :]]


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff(loss_fn: Callable[[Matrix], float], x: Matrix, h: float = 1e-5) -> Matrix:
    """Central-difference gradient estimate of a scalar function, entry by entry."""
    if h <= 0.0:
        raise ValueError("h must be > 0")
    base = x.array
    grad = np.zeros_like(base)
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            plus = base.copy()
            plus[i, j] += h
            minus = base.copy()
            minus[i, j] -= h
            grad[i, j] = (loss_fn(Matrix(plus, copy=False)) - loss_fn(Matrix(minus, copy=False))) / (2.0 * h)
    return Matrix(grad, copy=False)


def max_rel_error(analytic: Matrix, numeric: Matrix) -> float:
    """Max absolute deviation normalized by the oracle gradient's own scale."""
    a, n = analytic.array, numeric.array
    denom = max(np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / denom)
