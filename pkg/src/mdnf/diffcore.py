"""Reverse-mode differentiation over small dense arrays.

The trace is a DAG of :class:`Node` objects built dynamically on every
evaluation.  Values are float64 numpy arrays whose trailing axis is a
category axis (length <= a few dozen at the scales targeted here); leading
axes batch over samples and mixture components.  Gradients are stored
densely on the nodes and recomputed from scratch by every
:func:`reverse_sweep`.

Only the operations needed by discrete flows, mixtures of them, and the
variational objectives built on top are provided.  This is not a general
tensor autodiff system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Temperature",
    "Node",
    "param",
    "const",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "sum_",
    "prod_",
    "mean",
    "log",
    "exp_",
    "powc",
    "logistic",
    "softmax_temp",
    "straight_through",
    "circular_convolve",
    "log_lookup",
    "reverse_last",
    "permute_last",
    "take_last",
    "subset_replace",
    "take0",
    "take_axis1",
    "stack_last",
    "reshape_",
    "logsumexp_",
    "masked_lookup",
    "cpt_select",
    "table_contract",
    "reverse_sweep",
]

# Finite stand-in for log(0); smallest order of magnitude whose exp is still
# a positive double.  Lookup-table gradients are floored here so that a zero
# probability cannot inject infinities into the sweep.
LOG_FLOOR = -745.0


@dataclass(frozen=True)
class Temperature:
    """Softmax temperature; must be a positive finite real."""

    tau: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.tau) and self.tau > 0.0):
            raise ValueError(f"temperature must be positive and finite, got {self.tau!r}")


def _tau_value(tau) -> float:
    if isinstance(tau, Temperature):
        return tau.tau
    return Temperature(float(tau)).tau


class Node:
    """One traced value: an ndarray plus the rule that produced it."""

    __slots__ = ("value", "parents", "rule", "ctx", "grad")

    def __init__(self, value, parents=(), rule="const", ctx=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.rule = rule
        self.ctx = ctx
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node(rule={self.rule!r}, shape={self.value.shape})"


def param(value) -> Node:
    """Trainable leaf; reverse_sweep reports gradients for these."""
    return Node(value, rule="param")


def const(value) -> Node:
    """Non-trainable leaf (noise draws, masks, lookup inputs)."""
    return Node(value, rule="const")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Node, b: Node) -> Node:
    return Node(a.value + b.value, (a, b), "add")


def sub(a: Node, b: Node) -> Node:
    return Node(a.value - b.value, (a, b), "sub")


def neg(a: Node) -> Node:
    return Node(-a.value, (a,), "neg")


def mul(a: Node, b: Node) -> Node:
    return Node(a.value * b.value, (a, b), "mul")


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), "scale", ctx=float(c))


def sum_(a: Node, axis=None) -> Node:
    return Node(a.value.sum(axis=axis), (a,), "sum", ctx=(axis, a.value.shape))


def prod_(a: Node, axis: int = -1) -> Node:
    """Product along one axis.

    The backward pass uses exclusive prefix/suffix cumulative products, so
    entries that are exactly zero still get the correct cofactor gradient
    (no division by the forward value).
    """
    return Node(a.value.prod(axis=axis), (a,), "prod", ctx=(axis, a.value.shape))


def mean(a: Node, axis=None) -> Node:
    return Node(a.value.mean(axis=axis), (a,), "mean", ctx=(axis, a.value.shape))


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        return Node(np.log(a.value), (a,), "log")


def exp_(a: Node) -> Node:
    return Node(np.exp(a.value), (a,), "exp")


def powc(a: Node, c: float) -> Node:
    """Elementwise a**c for a constant exponent; a must be positive."""
    return Node(np.power(a.value, c), (a,), "powc", ctx=float(c))


def logistic(a: Node) -> Node:
    v = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-a.value)),
                 np.exp(a.value) / (1.0 + np.exp(a.value)))
    return Node(v, (a,), "logistic")


# ---------------------------------------------------------------------------
# categorical building blocks


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_temp(logits: Node, tau) -> Node:
    """softmax(logits / tau) along the last axis."""
    t = _tau_value(tau)
    if not np.all(np.isfinite(logits.value)):
        raise ValueError("softmax_temp requires finite logits")
    return Node(_softmax(logits.value / t), (logits,), "softmax_temp", ctx=t)


def straight_through(relaxed: Node) -> Node:
    """Forward: one-hot argmax (ties to the lowest index).  Backward: identity."""
    v = relaxed.value
    if v.shape[-1] < 1:
        raise ValueError("straight_through needs a non-empty category axis")
    idx = v.argmax(axis=-1)
    hard = np.zeros_like(v)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return Node(hard, (relaxed,), "straight_through")


def _conv_index(k: int) -> np.ndarray:
    ar = np.arange(k)
    return (ar[:, None] - ar[None, :]) % k  # IDX[k, j] = (k - j) mod K


def circular_convolve(a: Node, b: Node) -> Node:
    """Circular convolution along the last axis: out[k] = sum_j a[j] b[(k-j) mod K].

    Leading axes broadcast.  Total mass multiplies: sum(out) = sum(a) * sum(b),
    so one-hot inputs at positions i and j give a one-hot at (i + j) mod K.
    """
    k = a.value.shape[-1]
    if b.value.shape[-1] != k:
        raise ValueError("circular_convolve operands disagree on category axis length")
    idx = _conv_index(k)
    av, bv = np.broadcast_arrays(a.value, b.value)
    out = np.einsum("...j,...kj->...k", av, bv[..., idx])
    return Node(out, (a, b), "circ_conv", ctx=idx)


def reverse_last(a: Node) -> Node:
    """Index reversal y[k] = x[(-k) mod K]; its own inverse."""
    k = a.value.shape[-1]
    idx = (-np.arange(k)) % k
    return Node(a.value[..., idx], (a,), "reverse_last", ctx=idx)


def permute_last(a: Node, perm: np.ndarray) -> Node:
    """Gather y[..., k] = x[..., perm[..., k]] where perm permutes the last axis.

    `perm` may carry leading axes (e.g. one permutation per mixture component)
    that broadcast against `a`.
    """
    perm = np.asarray(perm, dtype=np.intp)
    k = a.value.shape[-1]
    flat = perm.reshape(-1, perm.shape[-1])
    if perm.shape[-1] != k or not all(np.array_equal(np.sort(r), np.arange(k)) for r in flat):
        raise ValueError("perm must permute the last axis of the operand")
    inv = np.empty_like(perm)
    np.put_along_axis(inv, perm, np.broadcast_to(np.arange(k), perm.shape).copy(), axis=-1)
    pb = np.broadcast_to(perm, a.value.shape)
    out = np.take_along_axis(a.value, pb, axis=-1)
    return Node(out, (a,), "permute_last", ctx=(perm, inv))


def take_last(a: Node, indices) -> Node:
    """Extract the given positions of the last axis (a strict subset is fine)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("take_last expects a flat index list")
    return Node(a.value[..., idx], (a,), "take_last", ctx=(idx, a.value.shape[-1]))


def subset_replace(x: Node, indices, values: Node) -> Node:
    """Copy of x with positions `indices` of the last axis replaced by `values`."""
    idx = np.asarray(indices, dtype=np.intp)
    k = x.value.shape[-1]
    lead = np.broadcast_shapes(x.value.shape[:-1], values.value.shape[:-1])
    out = np.broadcast_to(x.value, lead + (k,)).copy()
    out[..., idx] = values.value
    return Node(out, (x, values), "subset_replace", ctx=(idx, x.value.shape))


def take0(a: Node, indices) -> Node:
    """Row gather along axis 0 (e.g. per-sample component selection)."""
    idx = np.asarray(indices, dtype=np.intp)
    return Node(a.value[idx], (a,), "take0", ctx=(idx, a.value.shape))


def take_axis1(a: Node, index: int) -> Node:
    """Single-slice gather along axis 1 (e.g. one dimension of a packed batch)."""
    if a.value.ndim < 2:
        raise ValueError("take_axis1 needs at least two axes")
    return Node(a.value[:, index], (a,), "take_axis1", ctx=(int(index), a.value.shape))


def stack_last(nodes) -> Node:
    nodes = list(nodes)
    return Node(np.stack([n.value for n in nodes], axis=-1), tuple(nodes), "stack_last")


def reshape_(a: Node, shape) -> Node:
    """View with a different shape (same element count and order)."""
    return Node(a.value.reshape(shape), (a,), "reshape", ctx=a.value.shape)


def logsumexp_(a: Node, axis: int = -1) -> Node:
    m = np.max(a.value, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.exp(a.value - m_safe).sum(axis=axis, keepdims=True)
        out = (m_safe + np.log(s)).squeeze(axis=axis)
    out = np.where(np.isfinite(m.squeeze(axis)), out, m.squeeze(axis))
    return Node(out, (a,), "logsumexp", ctx=axis)


def masked_lookup(x: Node, table: np.ndarray, n_reduce: int = 1) -> Node:
    """sum over the trailing `n_reduce` axes of x * table, with 0 * log(0) = 0.

    `table` is a constant log-table broadcast against x.  Entries of -inf are
    tolerated: positions where x is exactly zero contribute nothing, and the
    gradient uses the table floored at LOG_FLOOR so the sweep stays finite.
    """
    t = np.broadcast_to(np.asarray(table, dtype=np.float64), x.value.shape)
    with np.errstate(invalid="ignore"):
        terms = np.where(x.value == 0.0, 0.0, x.value * t)
    axes = tuple(range(x.value.ndim - n_reduce, x.value.ndim))
    return Node(terms.sum(axis=axes), (x,), "masked_lookup", ctx=(t, axes))


def log_lookup(x: Node, log_table) -> Node:
    """Inner product <x, log_table> with the convention 0 * log(0) = 0.

    With batched x of shape (..., K) and a broadcastable table, reduces the
    trailing category axis only.  Gradient w.r.t. x is the (floored) table.
    """
    return masked_lookup(x, log_table, n_reduce=1)


def _einsum_letters(n: int):
    return [chr(ord("a") + i) for i in range(n)]


def cpt_select(log_table: np.ndarray, vecs) -> Node:
    """Multilinear contraction of a constant log-table with one vector per axis.

    Each vec is (K_i,) or (S, K_i); the result is () or (S,).  With one-hot
    vecs this reads off a single table entry.  Zero-weight positions never
    touch the table, so -inf entries only surface when they carry weight;
    gradients use the floored table.
    """
    table = np.asarray(log_table, dtype=np.float64)
    vecs = list(vecs)
    if len(vecs) != table.ndim:
        raise ValueError("cpt_select needs exactly one vector per table axis")
    letters = _einsum_letters(table.ndim)
    specs, batched = [], False
    for v, let in zip(vecs, letters):
        if v.value.ndim == 1:
            specs.append(let)
        elif v.value.ndim == 2:
            specs.append("z" + let)
            batched = True
        else:
            raise ValueError("cpt_select vectors must be 1- or 2-dimensional")
    out_spec = "z" if batched else ""
    weights = np.einsum(",".join(specs) + "->" + out_spec + "".join(letters),
                        *[v.value for v in vecs])
    with np.errstate(invalid="ignore"):
        terms = np.where(weights == 0.0, 0.0, weights * table)
    out = terms.sum(axis=tuple(range(-table.ndim, 0)))
    ctx = (table, letters, specs, out_spec)
    return Node(out, tuple(vecs), "cpt_select", ctx=ctx)


def table_contract(prob_table: np.ndarray, vecs) -> Node:
    """Contract a finite probability table with vectors over all but the last axis.

    Result keeps the trailing table axis: shape (K_c,) or (S, K_c).
    """
    table = np.asarray(prob_table, dtype=np.float64)
    if not np.all(np.isfinite(table)):
        raise ValueError("table_contract requires a finite table")
    vecs = list(vecs)
    if len(vecs) != table.ndim - 1:
        raise ValueError("table_contract needs one vector per non-final table axis")
    letters = _einsum_letters(table.ndim)
    specs, batched = [], False
    for v, let in zip(vecs, letters[:-1]):
        if v.value.ndim == 1:
            specs.append(let)
        elif v.value.ndim == 2:
            specs.append("z" + let)
            batched = True
        else:
            raise ValueError("table_contract vectors must be 1- or 2-dimensional")
    out_spec = ("z" if batched else "") + letters[-1]
    out = np.einsum(",".join(specs + ["".join(letters)]) + "->" + out_spec,
                    *[v.value for v in vecs], table)
    ctx = (table, letters, specs, out_spec)
    return Node(out, tuple(vecs), "table_contract", ctx=ctx)


# ---------------------------------------------------------------------------
# backward rules


def _bw_add(n, g):
    a, b = n.parents
    return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))


def _bw_sub(n, g):
    a, b = n.parents
    return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))


def _bw_neg(n, g):
    return (-g,)


def _bw_mul(n, g):
    a, b = n.parents
    return (_unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape))


def _bw_scale(n, g):
    return (g * n.ctx,)


def _bw_sum(n, g):
    axis, shape = n.ctx
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


def _bw_prod(n, g):
    axis, shape = n.ctx
    (a,) = n.parents
    v = np.moveaxis(a.value, axis, -1)
    ones = np.ones(v.shape[:-1] + (1,))
    before = np.concatenate([ones, np.cumprod(v[..., :-1], axis=-1)], axis=-1)
    after = np.concatenate([np.cumprod(v[..., :0:-1], axis=-1)[..., ::-1], ones],
                           axis=-1)
    cof = np.moveaxis(before * after, -1, axis)
    return (np.expand_dims(g, axis) * cof,)


def _bw_mean(n, g):
    axis, shape = n.ctx
    if axis is None:
        count = int(np.prod(shape))
        return (np.broadcast_to(g / count, shape).copy(),)
    count = shape[axis]
    return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)


def _bw_log(n, g):
    (a,) = n.parents
    return (g / a.value,)


def _bw_exp(n, g):
    return (g * n.value,)


def _bw_powc(n, g):
    (a,) = n.parents
    c = n.ctx
    return (g * c * np.power(a.value, c - 1.0),)


def _bw_logistic(n, g):
    return (g * n.value * (1.0 - n.value),)


def _bw_softmax_temp(n, g):
    s, t = n.value, n.ctx
    inner = (g * s).sum(axis=-1, keepdims=True)
    return ((s * (g - inner)) / t,)


def _bw_straight_through(n, g):
    return (g,)


def _bw_circ_conv(n, g):
    a, b = n.parents
    idx = n.ctx
    av, bv = np.broadcast_arrays(a.value, b.value)
    ga = np.einsum("...k,...kj->...j", g, bv[..., idx])
    gb = np.einsum("...k,...kj->...j", g, av[..., idx])
    return (_unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape))


def _bw_reverse_last(n, g):
    return (g[..., n.ctx],)


def _bw_permute_last(n, g):
    perm, inv = n.ctx
    invb = np.broadcast_to(inv, g.shape)
    return (np.take_along_axis(g, invb, axis=-1),)


def _bw_take_last(n, g):
    idx, k = n.ctx
    (a,) = n.parents
    out = np.zeros(g.shape[:-1] + (k,))
    np.add.at(out, (..., idx), g)
    return (_unbroadcast(out, a.value.shape),)


def _bw_subset_replace(n, g):
    x, values = n.parents
    idx, _ = n.ctx
    gx = g.copy()
    gx[..., idx] = 0.0
    return (_unbroadcast(gx, x.value.shape),
            _unbroadcast(g[..., idx], values.value.shape))


def _bw_take_axis1(n, g):
    index, shape = n.ctx
    out = np.zeros(shape)
    out[:, index] = g
    return (out,)


def _bw_take0(n, g):
    idx, shape = n.ctx
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return (out,)


def _bw_stack_last(n, g):
    return tuple(g[..., i] for i in range(len(n.parents)))


def _bw_reshape(n, g):
    return (g.reshape(n.ctx),)


def _bw_logsumexp(n, g):
    (a,) = n.parents
    axis = n.ctx
    expanded = np.expand_dims(n.value, axis)
    with np.errstate(invalid="ignore"):
        w = np.exp(a.value - expanded)
    w = np.where(np.isfinite(w), w, 0.0)
    return (np.expand_dims(g, axis) * w,)


def _bw_masked_lookup(n, g):
    t, axes = n.ctx
    gexp = g
    for ax in axes:
        gexp = np.expand_dims(gexp, ax)
    return (gexp * np.maximum(t, LOG_FLOOR),)


def _bw_cpt_select(n, g):
    table, letters, specs, out_spec = n.ctx
    table_f = np.maximum(table, LOG_FLOOR)
    table_letters = "".join(letters)
    grads = []
    for i in range(len(n.parents)):
        other_specs = [s for j, s in enumerate(specs) if j != i]
        other_vals = [p.value for j, p in enumerate(n.parents) if j != i]
        if out_spec:
            gi = np.einsum(
                ",".join(other_specs + [table_letters, out_spec]) + "->" + specs[i],
                *other_vals, table_f, g)
        else:
            gi = np.einsum(",".join(other_specs + [table_letters]) + "->" + specs[i],
                           *other_vals, table_f) * g
        grads.append(gi)
    return tuple(grads)


def _bw_table_contract(n, g):
    table, letters, specs, out_spec = n.ctx
    grads = []
    for i in range(len(n.parents)):
        other_specs = [s for j, s in enumerate(specs) if j != i]
        other_vals = [p.value for j, p in enumerate(n.parents) if j != i]
        gi = np.einsum(
            ",".join(other_specs + ["".join(letters), out_spec]) + "->" + specs[i],
            *other_vals, table, g)
        grads.append(gi)
    return tuple(grads)


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "neg": _bw_neg,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "sum": _bw_sum,
    "prod": _bw_prod,
    "mean": _bw_mean,
    "log": _bw_log,
    "exp": _bw_exp,
    "powc": _bw_powc,
    "logistic": _bw_logistic,
    "softmax_temp": _bw_softmax_temp,
    "straight_through": _bw_straight_through,
    "circ_conv": _bw_circ_conv,
    "reverse_last": _bw_reverse_last,
    "permute_last": _bw_permute_last,
    "take_last": _bw_take_last,
    "subset_replace": _bw_subset_replace,
    "take0": _bw_take0,
    "take_axis1": _bw_take_axis1,
    "stack_last": _bw_stack_last,
    "reshape": _bw_reshape,
    "logsumexp": _bw_logsumexp,
    "masked_lookup": _bw_masked_lookup,
    "cpt_select": _bw_cpt_select,
    "table_contract": _bw_table_contract,
}


def _topo_order(root: Node):
    """Iterative post-order; raises on a cycle (cannot arise from the public ops)."""
    order, state = [], {}
    stack = [root]
    while stack:
        node = stack[-1]
        st = state.get(id(node), 0)
        if st == 0:
            state[id(node)] = 1
            for p in node.parents:
                ps = state.get(id(p), 0)
                if ps == 1:
                    raise RuntimeError("cycle detected in trace graph")
                if ps == 0:
                    stack.append(p)
        else:
            stack.pop()
            if st == 1:
                state[id(node)] = 2
                order.append(node)
    return order


def reverse_sweep(root: Node):
    """Backpropagate d(root)/d(leaf) to every reachable node.

    root must be scalar-valued.  Gradient accumulators are reset first, so
    repeated sweeps over the same graph give identical results.  Returns the
    list of reachable `param` leaves (read their .grad).
    """
    if root.value.size != 1:
        raise ValueError("reverse_sweep expects a scalar root")
    order = _topo_order(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.rule in ("param", "const"):
            continue
        rule = _BACKWARD.get(node.rule)
        if rule is None:
            raise RuntimeError(f"no backward rule for {node.rule!r}")
        for parent, g in zip(node.parents, rule(node, node.grad)):
            if g is not None:
                parent.grad = parent.grad + g
    return [n for n in order if n.rule == "param"]
