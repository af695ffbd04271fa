"""Mixture of discrete normalizing flows.

The distribution is q(x) = sum_b rho^b prod_d p_u^{b,d}(inv f^{b,d}(x_d)):
B weighted components, each owning one flow stack and one base distribution
per dimension, with the component index shared across dimensions.  Sampling
draws (b, u) and pushes u forward; evaluation pulls x back through every
component and log-sum-exps.

Two traced implementations coexist:

* a packed fast path for the common case where every stack is a single
  shift-only layer: per dimension, all B shift logit rows live in one
  (B, K_d) matrix so a whole sample batch costs a handful of array ops;
* a general path that walks stacks layer by layer (needed for multi-layer
  compositions, partial flows, loc-scale).

Both paths share the log-table convention: delta bases contribute 0 at the
atom and LOG_FLOOR elsewhere, keeping the trace finite and differentiable
instead of branching on coverage.
"""

from __future__ import annotations

import json
import math

import numpy as np

from . import diffcore as dc
from .dists import CategoricalParams, DeltaBase, SeededRng, sample_categorical
from .flows import DiscreteFlow, FlowStack

__all__ = [
    "FlowMixture",
    "SampleBatch",
    "assignment_masks",
    "sample_forward",
    "sample_batch_masked",
    "sample_deterministic",
    "log_prob",
    "constructive_fit",
    "save_mixture",
    "load_mixture",
]

MIXTURE_FORMAT = "mdnf-mixture-v1"


def _base_cardinality(base) -> int:
    if isinstance(base, DeltaBase):
        return base.cardinality
    if isinstance(base, CategoricalParams):
        return base.cardinality
    raise TypeError(f"unsupported base distribution {type(base).__name__}")


def _base_log_table(base, k: int) -> np.ndarray:
    """Length-K log-prob table, floored so the trace never sees -inf."""
    if isinstance(base, DeltaBase):
        table = np.full(k, dc.LOG_FLOOR)
        table[base.atom] = 0.0
        return table
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(base.probs), dc.LOG_FLOOR)


def _base_prob_vector(base, k: int) -> np.ndarray:
    if isinstance(base, DeltaBase):
        v = np.zeros(k)
        v[base.atom] = 1.0
        return v
    return base.probs.copy()


def _base_sample_indices(base, n: int, rng: SeededRng) -> np.ndarray:
    """n draws from the base; delta bases consume no randomness."""
    if isinstance(base, DeltaBase):
        return np.full(n, base.atom, dtype=np.intp)
    return np.atleast_1d(sample_categorical(base, rng, size=n))


def _one_hot_rows(indices: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((indices.size, k))
    out[np.arange(indices.size), indices] = 1.0
    return out


def assignment_masks(assignments: np.ndarray, b: int) -> np.ndarray:
    """Dense (n, B) 0/1 masks; each row activates exactly one component."""
    assignments = np.asarray(assignments, dtype=np.intp)
    if np.any(assignments < 0) or np.any(assignments >= b):
        raise ValueError("assignment outside component range")
    return _one_hot_rows(assignments, b)


class SampleBatch:
    """A traced batch of joint one-hot samples.

    xs: one Node of shape (n, K_d) per dimension; assignments: the (n,)
    component index drawn for each sample (the mask set in index form).
    """

    def __init__(self, xs, assignments):
        self.xs = list(xs)
        self.assignments = np.asarray(assignments, dtype=np.intp)

    @property
    def n(self) -> int:
        return self.assignments.size

    def values(self):
        return [x.value for x in self.xs]


class FlowMixture:
    """B flow components with mixing weights and per-dimension bases."""

    def __init__(self, rho, components, bases):
        rho = np.asarray(rho, dtype=np.float64)
        if rho.ndim != 1 or rho.size < 1:
            raise ValueError("rho must be a non-empty vector")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-9:
            raise ValueError("rho must be a simplex vector (sum 1 within 1e-9)")
        self.rho = rho
        b = rho.size
        if len(components) != b or len(bases) != b:
            raise ValueError("components and bases must have one entry per weight")
        self.components = [[_as_stack(s) for s in comp] for comp in components]
        self.bases = [list(row) for row in bases]
        d = len(self.components[0])
        if d < 1:
            raise ValueError("mixture needs at least one dimension")
        if any(len(c) != d for c in self.components) or any(len(r) != d for r in self.bases):
            raise ValueError("every component needs one stack and one base per dimension")
        self.cardinalities = [self.components[0][dd].cardinality for dd in range(d)]
        for bb in range(b):
            for dd in range(d):
                k = self.cardinalities[dd]
                if self.components[bb][dd].cardinality != k:
                    raise ValueError(f"dimension {dd} cardinality mismatch across components")
                if _base_cardinality(self.bases[bb][dd]) != k:
                    raise ValueError(f"dimension {dd} base cardinality mismatch")

    @property
    def n_components(self) -> int:
        return self.rho.size

    @property
    def n_dims(self) -> int:
        return len(self.cardinalities)

    # -- packed fast path ----------------------------------------------------

    def is_packed(self) -> bool:
        """True when every stack is one shift-only layer (the training case)."""
        return all(len(s.layers) == 1 and s.layers[0].kind == "shift_only"
                   for comp in self.components for s in comp)

    def packed_shift_logits(self):
        """Per-dimension (B, K_d) matrices gathered from the component flows."""
        if not self.is_packed():
            raise ValueError("mixture has multi-layer or non-shift flows")
        out = []
        for d in range(self.n_dims):
            out.append(np.stack([self.components[b][d].layers[0].shift_logits
                                 for b in range(self.n_components)]))
        return out

    def set_packed_shift_logits(self, mats) -> None:
        if len(mats) != self.n_dims:
            raise ValueError("need one matrix per dimension")
        for d, mat in enumerate(mats):
            mat = np.asarray(mat, dtype=np.float64)
            if mat.shape != (self.n_components, self.cardinalities[d]):
                raise ValueError(f"dimension {d} expects shape "
                                 f"({self.n_components}, {self.cardinalities[d]})")
            for b in range(self.n_components):
                self.components[b][d].layers[0].shift_logits[:] = mat[b]

    def packed_base_log_tables(self):
        """Per-dimension (B, K_d) log-prob tables for the bases."""
        out = []
        for d in range(self.n_dims):
            k = self.cardinalities[d]
            out.append(np.stack([_base_log_table(self.bases[b][d], k)
                                 for b in range(self.n_components)]))
        return out

    def packed_mu_nodes(self, tau, shift_nodes=None):
        """Discretized shifts, one ST node of shape (B, K_d) per dimension."""
        if shift_nodes is None:
            shift_nodes = [dc.param(m) for m in self.packed_shift_logits()]
        return [dc.straight_through(dc.softmax_temp(node, tau))
                for node in shift_nodes]

    def draw_assignments(self, n: int, rng: SeededRng) -> np.ndarray:
        return np.atleast_1d(sample_categorical(CategoricalParams(self.rho), rng, size=n))

    def draw_base_batch(self, assignments: np.ndarray, rng: SeededRng):
        """Constant base one-hots (n, K_d) per dimension, grouped by component."""
        n = assignments.size
        out = []
        for d in range(self.n_dims):
            k = self.cardinalities[d]
            idx = np.empty(n, dtype=np.intp)
            for b in range(self.n_components):
                rows = np.nonzero(assignments == b)[0]
                if rows.size:
                    idx[rows] = _base_sample_indices(self.bases[b][d], rows.size, rng)
            out.append(_one_hot_rows(idx, k))
        return out

    def sample_batch_from(self, mu_nodes, assignments, u_values):
        """Traced pushforward of base samples through their assigned flows."""
        xs = []
        for d in range(self.n_dims):
            rows = dc.take0(mu_nodes[d], assignments)
            xs.append(dc.circular_convolve(rows, dc.const(u_values[d])))
        return SampleBatch(xs, assignments)

    def component_log_probs_from(self, mu_nodes, xs):
        """Traced per-component log p_u^b(inv f^b(x)) summed over dims: (n, B)."""
        tables = self.packed_base_log_tables()
        n = xs[0].value.shape[0]
        total = None
        for d in range(self.n_dims):
            k = self.cardinalities[d]
            inv_mu = dc.reverse_last(mu_nodes[d])
            wide = dc.reshape_(xs[d], (n, 1, k))
            inv = dc.circular_convolve(inv_mu, wide)
            term = dc.log_lookup(inv, tables[d])
            total = term if total is None else dc.add(total, term)
        return total

    def log_prob_from(self, mu_nodes, xs, log_rho_node=None):
        """Traced log q for a batch: (n,) node via log-sum-exp over components."""
        total = self.component_log_probs_from(mu_nodes, xs)
        log_rho = log_rho_node if log_rho_node is not None \
            else dc.const(np.log(self.rho + 1e-300))
        return dc.logsumexp_(dc.add(total, log_rho), axis=-1)

    def packed_base_prob_tables(self):
        """Per-dimension (B, K_d) probability tables for the bases."""
        out = []
        for d in range(self.n_dims):
            k = self.cardinalities[d]
            out.append(np.stack([_base_prob_vector(self.bases[b][d], k)
                                 for b in range(self.n_components)]))
        return out

    def component_probs_from(self, mu_nodes, xs):
        """Traced per-component pushforward mass at each sample: (n, B).

        Every factor stays in probability space.  The log-space variant
        computes the same values, but its lookup backward hands LOG_FLOOR
        sized table entries to the sample coordinates, and once an adaptive
        optimizer rescales steps those floors drown the crowding signal the
        entropy term is supposed to provide.  Dot products keep all
        coordinate gradients within [0, 1] times the upstream scale.
        """
        tables = self.packed_base_prob_tables()
        n = xs[0].value.shape[0]
        total = None
        for d in range(self.n_dims):
            k = self.cardinalities[d]
            push = dc.circular_convolve(mu_nodes[d], dc.const(tables[d]))
            wide = dc.reshape_(xs[d], (n, 1, k))
            dot = dc.sum_(dc.mul(wide, push), axis=-1)
            total = dot if total is None else dc.mul(total, dot)
        return total

    def log_prob_probspace(self, mu_nodes, xs, rho_node=None):
        """Traced log q for a batch: (n,) node, mixture summed before the log.

        Values match log_prob_from exactly at any sampled configuration
        (where q >= rho_b > 0); this is the form the ascent loops should
        differentiate.
        """
        total = self.component_probs_from(mu_nodes, xs)
        rho = rho_node if rho_node is not None else dc.const(self.rho)
        return dc.log(dc.sum_(dc.mul(total, rho), axis=-1))

    def neighbor_move_tables(self, mu_values, x_values, assignments, rho):
        """Mixture mass around each sample, untraced: (q_x (n,), tables).

        tables[d][s, k] is log of the mixture mass at sample s's configuration
        with dimension d moved to category k, counting the generating
        component's own mass at the midpoint of departure and arrival
        (half has left the current category, half has arrived at k).  Feeding
        these as the entropy gradient of the sample coordinates makes a
        single ascent step approximate the discrete gain of relocating one
        component's mass, which is the comparison that decides whether a
        crowd of atoms should keep or shed a member.  Differentiating the
        mixture density directly gets this wrong from both directions: in
        log space empty categories contribute log(0) floors that drown every
        other force, and in probability space the crowding penalty scales
        with the mass ratio instead of its log, so concentrated posteriors
        repel the atoms they need most.
        """
        rho = np.asarray(rho, dtype=np.float64)
        assignments = np.asarray(assignments, dtype=np.intp)
        n = x_values[0].shape[0]
        d_total = self.n_dims
        dots = np.empty((n, self.n_components, d_total))
        pushes = []
        for d in range(d_total):
            base = np.stack([_base_prob_vector(self.bases[b][d], self.cardinalities[d])
                             for b in range(self.n_components)])
            push = dc.circular_convolve(dc.const(mu_values[d]), dc.const(base)).value
            pushes.append(push)
            dots[:, :, d] = x_values[d] @ push.T
        ones = np.ones((n, self.n_components, 1))
        before = np.concatenate([ones, np.cumprod(dots[..., :-1], axis=-1)], axis=-1)
        after = np.concatenate([np.cumprod(dots[..., :0:-1], axis=-1)[..., ::-1], ones],
                               axis=-1)
        loo = before * after
        q_x = dots.prod(axis=-1) @ rho
        rho_b = rho[assignments]
        loo_self = loo[np.arange(n), assignments]
        tables = []
        for d in range(d_total):
            q_nb = np.einsum("nc,c,ck->nk", loo[:, :, d], rho, pushes[d])
            own = pushes[d][assignments]
            mid = 0.5 * (rho_b * loo_self[:, d])[:, None] * (1.0 - 2.0 * own)
            tables.append(np.log(q_nb + mid))
        return q_x, tables

    # -- grouped fast path (uniform cardinality) -------------------------------
    #
    # When every dimension shares one K, the per-dimension matrices collapse
    # into a single (B, D, K) block so a whole trace costs a constant number
    # of array ops regardless of D.  This is what makes wide factorized
    # posteriors (one dimension per data point) affordable.

    def is_grouped(self) -> bool:
        return self.is_packed() and len(set(self.cardinalities)) == 1

    def grouped_shift_logits(self) -> np.ndarray:
        if not self.is_grouped():
            raise ValueError("grouped packing needs uniform cardinality shift flows")
        return np.stack([np.stack([self.components[b][d].layers[0].shift_logits
                                   for d in range(self.n_dims)])
                         for b in range(self.n_components)])

    def set_grouped_shift_logits(self, block) -> None:
        block = np.asarray(block, dtype=np.float64)
        want = (self.n_components, self.n_dims, self.cardinalities[0])
        if block.shape != want:
            raise ValueError(f"expected block of shape {want}")
        for b in range(self.n_components):
            for d in range(self.n_dims):
                self.components[b][d].layers[0].shift_logits[:] = block[b, d]

    def grouped_base_log_tables(self) -> np.ndarray:
        k = self.cardinalities[0]
        return np.stack([np.stack([_base_log_table(self.bases[b][d], k)
                                   for d in range(self.n_dims)])
                         for b in range(self.n_components)])

    def grouped_mu_nodes(self, tau, shift_node=None) -> dc.Node:
        node = shift_node if shift_node is not None \
            else dc.param(self.grouped_shift_logits())
        return dc.straight_through(dc.softmax_temp(node, tau))

    def grouped_draw_base_batch(self, assignments: np.ndarray, rng: SeededRng) -> np.ndarray:
        """(n, D, K) constant one-hots from each sample's assigned bases."""
        per_dim = self.draw_base_batch(assignments, rng)
        return np.stack(per_dim, axis=1)

    def grouped_sample_from(self, mu_node: dc.Node, assignments, u_values) -> dc.Node:
        """Traced (n, D, K) batch routed through each sample's component."""
        rows = dc.take0(mu_node, np.asarray(assignments, dtype=np.intp))
        return dc.circular_convolve(rows, dc.const(u_values))

    def grouped_component_log_probs(self, mu_node: dc.Node, x_node: dc.Node) -> dc.Node:
        """(n, B) log p_u^b(inv f^b(x)) summed over all dimensions at once."""
        n = x_node.value.shape[0]
        d, k = self.n_dims, self.cardinalities[0]
        inv_mu = dc.reverse_last(mu_node)
        wide = dc.reshape_(x_node, (n, 1, d, k))
        inv = dc.circular_convolve(inv_mu, wide)
        return dc.masked_lookup(inv, self.grouped_base_log_tables(), n_reduce=2)

    def grouped_log_prob(self, mu_node: dc.Node, x_node: dc.Node,
                         log_rho_node=None) -> dc.Node:
        total = self.grouped_component_log_probs(mu_node, x_node)
        log_rho = log_rho_node if log_rho_node is not None \
            else dc.const(np.log(self.rho + 1e-300))
        return dc.logsumexp_(dc.add(total, log_rho), axis=-1)

    def grouped_base_prob_tables(self) -> np.ndarray:
        k = self.cardinalities[0]
        return np.stack([np.stack([_base_prob_vector(self.bases[b][d], k)
                                   for d in range(self.n_dims)])
                         for b in range(self.n_components)])

    def grouped_component_probs(self, mu_node: dc.Node, x_node: dc.Node) -> dc.Node:
        """(n, B) pushforward mass, probability space (see component_probs_from)."""
        n = x_node.value.shape[0]
        d, k = self.n_dims, self.cardinalities[0]
        push = dc.circular_convolve(mu_node, dc.const(self.grouped_base_prob_tables()))
        wide = dc.reshape_(x_node, (n, 1, d, k))
        dots = dc.sum_(dc.mul(wide, push), axis=-1)
        return dc.prod_(dots, axis=-1)

    def grouped_log_prob_probspace(self, mu_node: dc.Node, x_node: dc.Node,
                                   rho_node=None) -> dc.Node:
        total = self.grouped_component_probs(mu_node, x_node)
        rho = rho_node if rho_node is not None else dc.const(self.rho)
        return dc.log(dc.sum_(dc.mul(total, rho), axis=-1))

    # -- general path --------------------------------------------------------

    def _general_sample_batch(self, assignments, u_values, tau):
        masks = assignment_masks(assignments, self.n_components)
        xs = []
        for d in range(self.n_dims):
            acc = None
            for b in range(self.n_components):
                pushed = self.components[b][d].forward_node(dc.const(u_values[d]), tau)
                masked = dc.mul(dc.const(masks[:, b:b + 1]), pushed)
                acc = masked if acc is None else dc.add(acc, masked)
            xs.append(acc)
        return SampleBatch(xs, assignments)

    def _general_log_prob(self, xs, tau, log_rho_node=None):
        per_component = []
        for b in range(self.n_components):
            total = None
            for d in range(self.n_dims):
                k = self.cardinalities[d]
                inv = self.components[b][d].inverse_node(xs[d], tau)
                term = dc.log_lookup(inv, _base_log_table(self.bases[b][d], k))
                total = term if total is None else dc.add(total, term)
            per_component.append(total)
        stacked = dc.stack_last(per_component)
        log_rho = log_rho_node if log_rho_node is not None \
            else dc.const(np.log(self.rho + 1e-300))
        return dc.logsumexp_(dc.add(stacked, log_rho), axis=-1)

    # -- untraced exact table ------------------------------------------------

    def dim_marginals(self):
        """Per-dimension marginals of the discretized mixture.

        One (K_d,) probability row per dimension: each component's base mass
        pushed through its hard permutation, averaged under rho.  Cheap even
        when the joint table is far beyond the enumeration cap.
        """
        out = []
        for d in range(self.n_dims):
            k = self.cardinalities[d]
            row = np.zeros(k)
            for b in range(self.n_components):
                v = _base_prob_vector(self.bases[b][d], k)
                row[self.components[b][d].permutation()] += self.rho[b] * v
            out.append(row)
        return out

    def q_table(self, max_configs: int = 10 ** 6) -> np.ndarray:
        """Exact joint probability table, shape (K_1, ..., K_D)."""
        size = math.prod(self.cardinalities)
        if size > max_configs:
            raise ValueError(f"{size} configurations exceed the cap {max_configs}")
        table = np.zeros(self.cardinalities)
        for b in range(self.n_components):
            factors = []
            for d in range(self.n_dims):
                k = self.cardinalities[d]
                v = _base_prob_vector(self.bases[b][d], k)
                pushed = np.zeros(k)
                pushed[self.components[b][d].permutation()] = v
                factors.append(pushed)
            joint = factors[0]
            for f in factors[1:]:
                joint = np.multiply.outer(joint, f)
            table = table + self.rho[b] * joint
        return table


def _as_stack(s) -> FlowStack:
    if isinstance(s, FlowStack):
        return s
    if isinstance(s, DiscreteFlow):
        return FlowStack([s])
    raise TypeError(f"component must be a flow or stack, got {type(s).__name__}")


def _as_batched(x, k: int):
    arr = np.asarray(x.value if isinstance(x, dc.Node) else x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != k:
        raise ValueError(f"expected one-hot rows of length {k}")
    if not np.all(np.isin(arr, (0.0, 1.0))) or np.any(arr.sum(axis=1) != 1.0):
        raise ValueError("every row must be an exact one-hot")
    return arr, single


# -- public operations --------------------------------------------------------


def sample_forward(m: FlowMixture, rng: SeededRng, tau=1.0) -> SampleBatch:
    """One three-stage draw: b ~ rho, u ~ base^b, x = f^b(u).  Batch of 1."""
    return sample_batch_masked(m, 1, rng, tau)


def sample_batch_masked(m: FlowMixture, n: int, rng: SeededRng, tau=1.0,
                        assignments=None) -> SampleBatch:
    """n independent draws in a single trace, masked by component assignment."""
    if n < 1:
        raise ValueError("batch size must be >= 1")
    if assignments is None:
        assignments = m.draw_assignments(n, rng)
    else:
        assignments = np.asarray(assignments, dtype=np.intp)
        if assignments.shape != (n,):
            raise ValueError("assignments must have one entry per sample")
        assignment_masks(assignments, m.n_components)
    u_values = m.draw_base_batch(assignments, rng)
    if m.is_packed():
        return m.sample_batch_from(m.packed_mu_nodes(tau), assignments, u_values)
    return m._general_sample_batch(assignments, u_values, tau)


def sample_deterministic(m: FlowMixture, rng: SeededRng, tau=1.0) -> SampleBatch:
    """S = B batch with sample i routed through component i, in order."""
    assignments = np.arange(m.n_components, dtype=np.intp)
    return sample_batch_masked(m, m.n_components, rng, tau, assignments=assignments)


def log_prob(m: FlowMixture, x, tau=1.0) -> dc.Node:
    """Traced log q(x); a list of per-dimension one-hots (or (n, K_d) batches)."""
    if isinstance(x, SampleBatch):
        xs_nodes, single = x.xs, False
    else:
        if not isinstance(x, (list, tuple)):
            x = [x]
        if len(x) != m.n_dims:
            raise ValueError(f"expected {m.n_dims} per-dimension one-hots")
        xs_nodes, single = [], None
        for d, part in enumerate(x):
            arr, was_single = _as_batched(part, m.cardinalities[d])
            if single is None:
                single = was_single
            elif single != was_single:
                raise ValueError("mix of single and batched dimensions")
            xs_nodes.append(part if isinstance(part, dc.Node) else dc.const(arr))
        if single:
            xs_nodes = [n if n.value.ndim == 2 else dc.reshape_(n, (1, -1))
                        for n in xs_nodes]
    if m.is_packed():
        out = m.log_prob_from(m.packed_mu_nodes(tau), xs_nodes)
    else:
        out = m._general_log_prob(xs_nodes, tau)
    if not isinstance(x, SampleBatch) and single:
        return dc.sum_(out)
    return out


def constructive_fit(p_t: CategoricalParams, b: int, free_rho: bool = False) -> FlowMixture:
    """Delta-base shift mixture within 1/B of the target in every category.

    Floor allocation: P(x) = floor(p_t(x) * B) components per category (the
    top-B categories only when K > B), then the unallocated components go one
    per category in descending order of residual p_t(x)*B - floor, ties to
    the lower index.  With free_rho (requires B = K) the weights are set to
    p_t itself and the fit is exact.
    """
    if b < 1:
        raise ValueError("component count must be >= 1")
    probs = p_t.probs
    k = p_t.cardinality
    if free_rho:
        if b != k:
            raise ValueError("free rho needs exactly one component per category")
        targets = np.arange(k, dtype=np.intp)
        rho = probs.copy()
        if rho.sum() != 1.0:
            rho = rho / rho.sum()
        return _shift_mixture(targets, rho, k)

    kept = np.argsort(-probs, kind="stable")[:b] if k > b else np.arange(k)
    counts = np.zeros(k, dtype=np.intp)
    counts[kept] = np.floor(probs[kept] * b).astype(np.intp)
    leftovers = b - counts.sum()
    residual = probs[kept] * b - np.floor(probs[kept] * b)
    order = kept[np.argsort(-residual, kind="stable")]
    counts[order[:leftovers]] += 1
    targets = np.repeat(np.arange(k, dtype=np.intp), counts)
    rho = np.full(b, 1.0 / b)
    return _shift_mixture(targets, rho, k)


def _shift_mixture(targets: np.ndarray, rho: np.ndarray, k: int) -> FlowMixture:
    components, bases = [], []
    for t in targets:
        logits = np.zeros(k)
        logits[t] = 2.0
        components.append([DiscreteFlow("shift_only", k, shift_logits=logits)])
        bases.append([DeltaBase(0, k)])
    return FlowMixture(rho, components, bases)


# -- serialization --------------------------------------------------------------


def _flow_to_dict(f: DiscreteFlow) -> dict:
    return {
        "kind": f.kind,
        "cardinality": f.cardinality,
        "shift_logits": f.shift_logits.tolist(),
        "sigma": f.sigma,
        "subset": None if f.subset is None else f.subset.tolist(),
        "trainable_scale": f.trainable_scale,
        "scale_logits": None if f.scale_logits is None else f.scale_logits.tolist(),
    }


def _flow_from_dict(d: dict) -> DiscreteFlow:
    return DiscreteFlow(d["kind"], d["cardinality"],
                        shift_logits=np.asarray(d["shift_logits"]),
                        sigma=d.get("sigma", 1),
                        subset=d.get("subset"),
                        trainable_scale=d.get("trainable_scale", False),
                        scale_logits=None if d.get("scale_logits") is None
                        else np.asarray(d["scale_logits"]))


def _base_to_dict(base) -> dict:
    if isinstance(base, DeltaBase):
        return {"type": "delta", "atom": base.atom, "cardinality": base.cardinality}
    return {"type": "categorical", "probs": base.probs.tolist()}


def _base_from_dict(d: dict):
    if d["type"] == "delta":
        return DeltaBase(d["atom"], d["cardinality"])
    if d["type"] == "categorical":
        return CategoricalParams(np.asarray(d["probs"]))
    raise ValueError(f"unknown base type {d['type']!r}")


def save_mixture(m: FlowMixture, path) -> None:
    """Versioned flat-file dump: format tag, rho, then stacks and bases in
    component-major, dimension-minor, layer order."""
    payload = {
        "format": MIXTURE_FORMAT,
        "rho": m.rho.tolist(),
        "cardinalities": list(m.cardinalities),
        "components": [[[_flow_to_dict(f) for f in stack.layers]
                        for stack in comp] for comp in m.components],
        "bases": [[_base_to_dict(base) for base in row] for row in m.bases],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_mixture(path) -> FlowMixture:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != MIXTURE_FORMAT:
        raise ValueError(f"unsupported mixture file format {payload.get('format')!r}")
    components = [[FlowStack([_flow_from_dict(f) for f in stack])
                   for stack in comp] for comp in payload["components"]]
    bases = [[_base_from_dict(b) for b in row] for row in payload["bases"]]
    return FlowMixture(np.asarray(payload["rho"]), components, bases)
