"""Reverse-mode differentiation over float64 numpy arrays.

Every op accepts either plain arrays or :class:`Node` values. When no input is
a ``Node`` the op is a pure numpy computation and returns an array, so the
same forward code serves both training (traced) and evaluation (untraced).

Orientation is fixed: rows are samples, columns are features. Weights of an
affine layer have shape ``(out, in)`` and the layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "tape", "parents", "index", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", parents=(), name: str | None = None):
        self.value = value
        self.tape = tape
        self.parents = parents  # sequence of (Node, vjp) pairs
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape})"


class Tape:
    """Records nodes in execution order; confined to one thread."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise UsageError(f"parameter {name!r} registered twice")
        node = Node(np.asarray(value, dtype=np.float64), self, (), name)
        self.params[name] = node
        return node

    def bind(self, tensors: Mapping[str, np.ndarray], keys: Iterable[str] | None = None) -> dict:
        """Return ``tensors`` with the selected keys replaced by tape leaves."""
        keys = set(tensors) if keys is None else set(keys)
        return {k: (self.param(k, v) if k in keys else v) for k, v in tensors.items()}


def value(x):
    return x.value if isinstance(x, Node) else x


def _record(out: np.ndarray, links: list[tuple[object, Callable]]):
    """Wrap ``out`` in a Node if any linked input is traced."""
    parents = [(x, f) for x, f in links if isinstance(x, Node)]
    if not parents:
        return out
    tape = parents[0][0].tape
    for x, _ in parents:
        if x.tape is not tape:
            raise UsageError("inputs recorded on different tapes")
    return Node(out, tape, parents)


# ---------------------------------------------------------------------------
# primitive ops


def affine(x, W, b):
    """Row-wise ``W x + b``."""
    xv, Wv, bv = value(x), value(W), value(b)
    if xv.ndim != 2 or Wv.ndim != 2:
        raise ShapeError("affine expects 2-d input and weight")
    if xv.shape[1] != Wv.shape[1]:
        raise ShapeError(f"input has {xv.shape[1]} columns, layer expects {Wv.shape[1]}")
    if bv.shape != (Wv.shape[0],):
        raise ShapeError(f"bias shape {bv.shape} does not match weight rows {Wv.shape[0]}")
    out = xv @ Wv.T + bv
    return _record(out, [
        (x, lambda g: g @ Wv),
        (W, lambda g: g.T @ xv),
        (b, lambda g: g.sum(axis=0)),
    ])


def relu(x):
    xv = value(x)
    mask = xv > 0
    return _record(np.where(mask, xv, 0.0), [(x, lambda g: g * mask)])


def add(a, b):
    av, bv = value(a), value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add: {av.shape} vs {bv.shape}")
    return _record(av + bv, [(a, lambda g: g), (b, lambda g: g)])


def mul(a, b):
    """Elementwise product of equal-shape arrays."""
    av, bv = value(a), value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"mul: {av.shape} vs {bv.shape}")
    return _record(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def scale(x, c: float):
    return _record(value(x) * c, [(x, lambda g: g * c)])


def total(x):
    """Sum of all entries, as a 0-d array."""
    xv = value(x)
    return _record(np.asarray(xv.sum()), [(x, lambda g: np.broadcast_to(g, xv.shape).copy())])


def add_scalars(*terms):
    vals = [value(t) for t in terms]
    out = np.asarray(sum(float(v) for v in vals))
    return _record(out, [(t, lambda g: g) for t in terms])


def concat(a, b):
    av, bv = value(a), value(b)
    if av.shape[0] != bv.shape[0]:
        raise ShapeError("concat: row counts differ")
    k = av.shape[1]
    return _record(np.concatenate([av, bv], axis=1), [(a, lambda g: g[:, :k]), (b, lambda g: g[:, k:])])


def _check_temperature(T, rows: int) -> np.ndarray:
    Tv = np.asarray(T, dtype=np.float64)
    if Tv.ndim == 0:
        Tv = np.full(rows, float(Tv))
    if Tv.shape != (rows,):
        raise ShapeError(f"temperature must be scalar or length {rows}")
    if not np.all(Tv > 0):
        raise ParameterError("temperature must be positive")
    return Tv


def softmax(logits, T=1.0):
    """Row-wise ``softmax(logits / T)``; ``T`` may be a scalar or one value per row."""
    lv = value(logits)
    if lv.ndim != 2:
        raise ShapeError("softmax expects a 2-d logit matrix; use softmax_vector for one row")
    Tv = _check_temperature(T, lv.shape[0])[:, None]
    z = lv / Tv
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (g - (g * p).sum(axis=1, keepdims=True)) * p / Tv

    return _record(p, [(logits, vjp)])


def cross_entropy(probs, labels) -> object:
    """Mean over rows of ``-log(probs[row, label] + EPS)``."""
    pv = value(probs)
    labels = np.asarray(labels)
    if pv.ndim == 1:
        pv2 = pv[None, :]
        labels = labels.reshape(1)
    else:
        pv2 = pv
    n, C = pv2.shape
    if labels.shape != (n,):
        raise ShapeError("one label per row required")
    if np.any(labels < 0) or np.any(labels >= C):
        raise IndexError(f"label out of range for {C} classes")
    rows = np.arange(n)
    picked = pv2[rows, labels]
    out = np.asarray(-np.log(picked + EPS).mean())

    def vjp(g):
        grad = np.zeros_like(pv2)
        grad[rows, labels] = -float(g) / (n * (picked + EPS))
        return grad.reshape(pv.shape)

    return _record(out, [(probs, vjp)])


def softmax_cross_entropy(logits, labels) -> object:
    """Mean over rows of ``logsumexp(z) - z[label]``, fused so the gradient is ``(softmax - onehot) / n``.

    No log of a probability is taken, so the result is finite without a floor.
    """
    zv = value(logits)
    labels = np.asarray(labels)
    if zv.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects a 2-D batch, got shape {zv.shape}")
    n, C = zv.shape
    if labels.shape != (n,):
        raise ShapeError("one label per row required")
    if np.any(labels < 0) or np.any(labels >= C):
        raise IndexError(f"label out of range for {C} classes")
    rows = np.arange(n)
    shifted = zv - zv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    out = np.asarray((lse - shifted[rows, labels]).mean())

    def vjp(g):
        grad = np.exp(shifted - lse[:, None])
        grad[rows, labels] -= 1.0
        return grad * (float(g) / n)

    return _record(out, [(logits, vjp)])


def kl_rows(p_teacher, p_student):
    """Per-row ``sum_c p_t log((p_t + EPS) / (p_s + EPS))`` with ``0 log 0 = 0``."""
    tv, sv = value(p_teacher), value(p_student)
    if tv.shape != sv.shape:
        raise ShapeError(f"kl: {tv.shape} vs {sv.shape}")
    pos = tv > 0
    logt = np.where(pos, np.log(np.where(pos, tv, 1.0) + EPS), 0.0)
    logs = np.log(sv + EPS)
    out = np.where(pos, tv * (logt - logs), 0.0).sum(axis=-1)

    def vjp_teacher(g):
        g = np.expand_dims(g, -1)
        return g * np.where(pos, logt - logs + tv / (tv + EPS), 0.0)

    def vjp_student(g):
        return -np.expand_dims(g, -1) * tv / (sv + EPS)

    return _record(out, [(p_teacher, vjp_teacher), (p_student, vjp_student)])


def mean(x):
    xv = value(x)
    n = xv.size
    return _record(np.asarray(xv.mean()), [(x, lambda g: np.full(xv.shape, float(g) / n))])


def half_sq_dist(local: Mapping[str, object], reference: Mapping[str, np.ndarray]):
    """``0.5 * sum_k ||local[k] - reference[k]||^2`` as one fused node."""
    if set(local) != set(reference):
        raise UsageError("parameter key sets differ")
    keys = sorted(local)
    diffs = {k: value(local[k]) - reference[k] for k in keys}
    out = np.asarray(0.5 * sum(float(np.vdot(d, d)) for d in diffs.values()))
    return _record(out, [(local[k], (lambda d: lambda g: float(g) * d)(diffs[k])) for k in keys])


# ---------------------------------------------------------------------------
# unit-level conveniences


def softmax_vector(logits, T: float = 1.0) -> np.ndarray:
    """Softmax of a single logit vector."""
    return softmax(np.asarray(logits, dtype=np.float64)[None, :], T)[0]


def kl_forward(p_teacher, p_student) -> float:
    t = np.asarray(p_teacher, dtype=np.float64)
    s = np.asarray(p_student, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError(f"kl: {t.shape} vs {s.shape}")
    return float(kl_rows(t, s))


# ---------------------------------------------------------------------------
# backward pass and update


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for every parameter registered on ``tape``."""
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise UsageError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise UsageError("backward needs a scalar loss")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.name is not None:
            grads[node.index] = g
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = grads.get(parent.index)
            grads[parent.index] = contrib if prev is None else prev + contrib
    out = {}
    for name, leaf in tape.params.items():
        g = grads.get(leaf.index)
        out[name] = np.zeros_like(leaf.value) if g is None else g
    return out


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """Return ``params`` with ``p - lr * g`` applied to every key."""
    if lr < 0:
        raise ParameterError("learning rate must be non-negative")
    missing = set(params) - set(grads)
    if missing:
        raise UsageError(f"no gradient for {sorted(missing)}")
    return {k: p - lr * grads[k] for k, p in params.items()}
