"""Discrete flow layers on one-hot encodings.

A flow is a trainable bijection of {0..K-1}.  Three kinds:

* ``shift_only``: x = (mu + u) mod K
* ``loc_scale``:  x = (mu + sigma * u) mod K with gcd(sigma, K) = 1
* ``partial``:    a shift flow acting inside a K'-subset of positions,
  identity elsewhere (K'=2 gives a trainable transposition)

The shift mu is always materialized as straight_through(softmax(logits /
tau)), so the discretized forward stays an exact one-hot while gradients
reach the logits through the relaxed path.  Index-space equivalents
(`*_index` / `permutation`) are provided for untraced bulk evaluation; they
agree with the traced path by construction and by test.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc

__all__ = [
    "DiscreteFlow",
    "FlowStack",
    "validate_coprime",
    "modular_inverse",
    "coprime_residues",
    "flow_forward",
    "flow_inverse",
    "build_sorting_network",
]


def validate_coprime(sigma: int, k: int) -> None:
    """Reject scale factors that would not be bijective mod K."""
    if sigma < 1 or k < 1:
        raise ValueError("sigma and K must be positive integers")
    if math.gcd(sigma, k) != 1:
        raise ValueError(f"sigma={sigma} and K={k} must be coprime")


def modular_inverse(sigma: int, k: int) -> int:
    """sigma^{-1} mod K via extended Euclid (computed once and cached on the flow)."""
    validate_coprime(sigma, k)
    r0, r1 = k, sigma % k
    t0, t1 = 0, 1
    while r1:
        q = r0 // r1
        r0, r1 = r1, r0 - q * r1
        t0, t1 = t1, t0 - q * t1
    return t0 % k if k > 1 else 0


def coprime_residues(k: int) -> np.ndarray:
    """All valid scale factors mod K, ascending (so index 0 is the identity scale)."""
    if k < 1:
        raise ValueError("K must be positive")
    if k == 1:
        return np.array([1], dtype=np.intp)
    return np.array([c for c in range(1, k) if math.gcd(c, k) == 1], dtype=np.intp)


class DiscreteFlow:
    """One trainable layer; see module docstring for the three kinds."""

    def __init__(self, kind: str, cardinality: int, shift_logits=None,
                 sigma: int = 1, subset=None, trainable_scale: bool = False,
                 scale_logits=None):
        if kind not in ("shift_only", "loc_scale", "partial"):
            raise ValueError(f"unknown flow kind {kind!r}")
        if cardinality < 1:
            raise ValueError("cardinality must be >= 1")
        self.kind = kind
        self.cardinality = int(cardinality)
        if kind == "partial":
            if subset is None:
                raise ValueError("partial flows need a subset of positions")
            sub = np.asarray(subset, dtype=np.intp)
            if sub.ndim != 1 or len(set(sub.tolist())) != sub.size:
                raise ValueError("subset positions must be distinct")
            if np.any(sub < 0) or np.any(sub >= cardinality):
                raise ValueError("subset positions out of range")
            self.subset = sub
            width = sub.size
        else:
            if subset is not None:
                raise ValueError("subset applies only to partial flows")
            self.subset = None
            width = cardinality
        if trainable_scale and kind != "loc_scale":
            raise ValueError("trainable scale applies only to loc_scale flows")
        self.trainable_scale = bool(trainable_scale)
        if kind == "loc_scale":
            validate_coprime(sigma, cardinality)
            self.sigma = int(sigma)
            self.sigma_inv = modular_inverse(self.sigma, cardinality)
            self.scale_candidates = coprime_residues(cardinality)
            self._cand_inverse = np.array(
                [modular_inverse(int(c), cardinality) for c in self.scale_candidates],
                dtype=np.intp)
        else:
            if sigma != 1:
                raise ValueError("sigma applies only to loc_scale flows")
            self.sigma = 1
            self.sigma_inv = 1
            self.scale_candidates = None
            self._cand_inverse = None
        if self.trainable_scale:
            if scale_logits is None:
                scale_logits = np.zeros(self.scale_candidates.size)
            self.scale_logits = np.asarray(scale_logits, dtype=np.float64).copy()
            if self.scale_logits.shape != (self.scale_candidates.size,):
                raise ValueError("scale_logits must have one entry per coprime residue")
            if not np.all(np.isfinite(self.scale_logits)):
                raise ValueError("scale_logits must be finite")
        else:
            if scale_logits is not None:
                raise ValueError("scale_logits requires trainable_scale")
            self.scale_logits = None
        if shift_logits is None:
            shift_logits = np.zeros(width)
        self.shift_logits = np.asarray(shift_logits, dtype=np.float64).copy()
        if self.shift_logits.shape != (width,):
            raise ValueError(f"shift_logits must have length {width}")
        if not np.all(np.isfinite(self.shift_logits)):
            raise ValueError("shift_logits must be finite")

    # -- discretized (index-space) view -------------------------------------

    def shift_position(self) -> int:
        """Current discretized shift (argmax of the logits, ties to lowest)."""
        return int(np.argmax(self.shift_logits))

    def current_sigma(self) -> int:
        if self.trainable_scale:
            return int(self.scale_candidates[np.argmax(self.scale_logits)])
        return self.sigma

    def current_sigma_inv(self) -> int:
        if self.trainable_scale:
            return int(self._cand_inverse[np.argmax(self.scale_logits)])
        return self.sigma_inv

    def forward_index(self, u: int) -> int:
        k = self.cardinality
        if self.kind == "shift_only":
            return (self.shift_position() + u) % k
        if self.kind == "loc_scale":
            return (self.shift_position() + self.current_sigma() * u) % k
        sub = self.subset
        pos = np.nonzero(sub == u)[0]
        if pos.size == 0:
            return u
        kp = sub.size
        return int(sub[(self.shift_position() + pos[0]) % kp])

    def inverse_index(self, x: int) -> int:
        k = self.cardinality
        if self.kind == "shift_only":
            return (x - self.shift_position()) % k
        if self.kind == "loc_scale":
            return (self.current_sigma_inv() * (x - self.shift_position())) % k
        sub = self.subset
        pos = np.nonzero(sub == x)[0]
        if pos.size == 0:
            return x
        kp = sub.size
        return int(sub[(pos[0] - self.shift_position()) % kp])

    def permutation(self) -> np.ndarray:
        """perm[u] = forward_index(u) at the current discretized parameters."""
        return np.array([self.forward_index(u) for u in range(self.cardinality)],
                        dtype=np.intp)

    # -- traced view ---------------------------------------------------------

    def mu_node(self, tau, logits_node: dc.Node | None = None) -> dc.Node:
        """Discretized shift one-hot with the relaxed gradient path attached."""
        node = logits_node if logits_node is not None else dc.param(self.shift_logits)
        return dc.straight_through(dc.softmax_temp(node, tau))

    def _scale_weights(self, tau, scale_node=None) -> dc.Node:
        node = scale_node if scale_node is not None else dc.param(self.scale_logits)
        return dc.straight_through(dc.softmax_temp(node, tau))

    def _scaled(self, a: dc.Node, tau, scale_node, invert: bool) -> dc.Node:
        """Apply the scale permutation; trainable scales mix over all candidates."""
        k = self.cardinality
        idx = np.arange(k)
        if not self.trainable_scale:
            factor = self.sigma_inv if not invert else self.sigma
            return dc.permute_last(a, (factor * idx) % k)
        w = self._scale_weights(tau, scale_node)
        out = None
        for j in range(self.scale_candidates.size):
            factor = self._cand_inverse[j] if not invert else self.scale_candidates[j]
            term = dc.mul(dc.take_last(w, [j]), dc.permute_last(a, (factor * idx) % k))
            out = term if out is None else dc.add(out, term)
        return out

    def forward_node(self, u: dc.Node, tau, logits_node=None, scale_node=None) -> dc.Node:
        """Push one-hot batches (..., K) through the flow inside the trace."""
        mu = self.mu_node(tau, logits_node)
        if self.kind == "shift_only":
            return dc.circular_convolve(mu, u)
        if self.kind == "loc_scale":
            return dc.circular_convolve(mu, self._scaled(u, tau, scale_node, invert=False))
        sub_view = dc.take_last(u, self.subset)
        shifted = dc.circular_convolve(mu, sub_view)
        return dc.subset_replace(u, self.subset, shifted)

    def inverse_node(self, x: dc.Node, tau, logits_node=None, scale_node=None) -> dc.Node:
        """Traced inverse map; gradients w.r.t. the shift logits flow through."""
        mu = self.mu_node(tau, logits_node)
        inv_mu = dc.reverse_last(mu)
        if self.kind == "shift_only":
            return dc.circular_convolve(inv_mu, x)
        if self.kind == "loc_scale":
            unshifted = dc.circular_convolve(inv_mu, x)
            return self._scaled(unshifted, tau, scale_node, invert=True)
        sub_view = dc.take_last(x, self.subset)
        unshifted = dc.circular_convolve(inv_mu, sub_view)
        return dc.subset_replace(x, self.subset, unshifted)


def _require_one_hot(u: np.ndarray) -> None:
    if u.ndim != 1 or not np.all(np.isin(u, (0.0, 1.0))) or u.sum() != 1.0:
        raise ValueError("input must be an exact one-hot vector")


def flow_forward(f: DiscreteFlow, u, tau=1.0) -> dc.Node:
    """Traced forward of a single one-hot vector (validated)."""
    arr = np.asarray(u.value if isinstance(u, dc.Node) else u, dtype=np.float64)
    _require_one_hot(arr)
    node = u if isinstance(u, dc.Node) else dc.const(arr)
    return f.forward_node(node, tau)


def flow_inverse(f: DiscreteFlow, x, tau=1.0) -> dc.Node:
    """Traced inverse of a single one-hot vector (validated)."""
    arr = np.asarray(x.value if isinstance(x, dc.Node) else x, dtype=np.float64)
    _require_one_hot(arr)
    node = x if isinstance(x, dc.Node) else dc.const(arr)
    return f.inverse_node(node, tau)


class FlowStack:
    """Ordered composition of flows sharing one cardinality."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("a flow stack needs at least one layer")
        k = layers[0].cardinality
        if any(f.cardinality != k for f in layers):
            raise ValueError("all layers in a stack must share cardinality")
        self.layers = layers
        self.cardinality = k

    def forward_node(self, u: dc.Node, tau, logits_nodes=None, scale_nodes=None) -> dc.Node:
        out = u
        for i, f in enumerate(self.layers):
            out = f.forward_node(out, tau,
                                 logits_nodes[i] if logits_nodes else None,
                                 scale_nodes[i] if scale_nodes else None)
        return out

    def inverse_node(self, x: dc.Node, tau, logits_nodes=None, scale_nodes=None) -> dc.Node:
        out = x
        for i in reversed(range(len(self.layers))):
            out = self.layers[i].inverse_node(out, tau,
                                              logits_nodes[i] if logits_nodes else None,
                                              scale_nodes[i] if scale_nodes else None)
        return out

    def permutation(self) -> np.ndarray:
        """Composition of all layers at the current discretized parameters."""
        perm = np.arange(self.cardinality, dtype=np.intp)
        for f in self.layers:
            perm = f.permutation()[perm]
        return perm


def build_sorting_network(k: int) -> FlowStack:
    """Bubble-sort arrangement of K(K-1)/2 adjacent-pair partial flows (K'=2).

    Pass j compares positions (0,1)..(K-1-j-1, K-1-j); with hand-set swap
    states the stack expresses every permutation of {0..K-1}.
    """
    if k < 2:
        raise ValueError("a sorting network needs K >= 2")
    layers = []
    for length in range(k - 1, 0, -1):
        for i in range(length):
            layers.append(DiscreteFlow("partial", k, subset=[i, i + 1]))
    return FlowStack(layers)
