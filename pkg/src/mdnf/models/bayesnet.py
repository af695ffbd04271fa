"""Discrete Bayesian networks: file parsing, differentiable joint log
probability, and exact posterior enumeration.

File format (YAML key-value tree):

    nodes:
      - name: A
        cardinality: 2
        parents: []
        cpt: [0.7, 0.3]
      - name: B
        cardinality: 2
        parents: [A]
        cpt: [0.8, 0.2, 0.1, 0.9]

The cpt list is row-major over the parents in declaration order with the
child category as the last axis: one row (of length K_child, summing to 1)
per joint parent configuration.  Declaration order is free; parents may be
declared after their children.
"""

from __future__ import annotations

import math
import string
from importlib import resources

import numpy as np
import yaml

from .. import diffcore as dc

__all__ = [
    "BayesNode",
    "BayesNet",
    "parse_bn",
    "load_bn",
    "bundled_networks",
    "validate_evidence",
    "latent_nodes",
    "latent_cardinalities",
    "bn_joint_log_prob",
    "bn_exact_posterior",
]


class BayesNode:
    def __init__(self, name: str, cardinality: int, parents, cpt: np.ndarray):
        self.name = name
        self.cardinality = cardinality
        self.parents = list(parents)
        self.cpt = cpt  # shape (K_p1, ..., K_pm, K_child)

    @property
    def log_cpt(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.cpt)


class BayesNet:
    """Validated network; nodes keep their declaration order."""

    def __init__(self, nodes):
        self.nodes = list(nodes)
        self.index = {n.name: i for i, n in enumerate(self.nodes)}
        self.topological = self._topological_order()
        self._log_cpts = [n.log_cpt for n in self.nodes]

    @property
    def names(self):
        return [n.name for n in self.nodes]

    def node(self, name: str) -> BayesNode:
        return self.nodes[self.index[name]]

    def _topological_order(self):
        indegree = {n.name: len(n.parents) for n in self.nodes}
        children = {n.name: [] for n in self.nodes}
        for n in self.nodes:
            for p in n.parents:
                children[p].append(n.name)
        ready = [n.name for n in self.nodes if indegree[n.name] == 0]
        order = []
        while ready:
            ready.sort(key=lambda nm: self.index[nm])
            name = ready.pop(0)
            order.append(name)
            for child in children[name]:
                indegree[child] -= 1
                if indegree[child] == 0:
                    ready.append(child)
        if len(order) != len(self.nodes):
            stuck = sorted(nm for nm, deg in indegree.items() if deg > 0)
            raise ValueError(f"cycle detected involving nodes {stuck}")
        return order

    def log_cpt(self, name: str) -> np.ndarray:
        return self._log_cpts[self.index[name]]


def parse_bn(text: str) -> BayesNet:
    """Parse and validate a network description (see module docstring)."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValueError(f"network file is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict) or "nodes" not in doc:
        raise ValueError("network file needs a top-level 'nodes' list")
    raw = doc["nodes"]
    if not isinstance(raw, list) or not raw:
        raise ValueError("'nodes' must be a non-empty list")

    cards = {}
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ValueError(f"node {i}: expected a mapping")
        for field in ("name", "cardinality", "parents", "cpt"):
            if field not in entry:
                raise ValueError(f"node {i}: missing field '{field}'")
        name = entry["name"]
        if not isinstance(name, str) or not name:
            raise ValueError(f"node {i}: name must be a non-empty string")
        if name in cards:
            raise ValueError(f"duplicate node name '{name}'")
        k = entry["cardinality"]
        if not isinstance(k, int) or k < 1:
            raise ValueError(f"node '{name}': cardinality must be a positive integer")
        cards[name] = k

    nodes = []
    for entry in raw:
        name, k = entry["name"], cards[entry["name"]]
        parents = entry["parents"] or []
        for p in parents:
            if p not in cards:
                raise ValueError(f"node '{name}': unknown parent '{p}'")
        if name in parents:
            raise ValueError(f"cycle detected involving nodes ['{name}']")
        flat = np.asarray(entry["cpt"], dtype=np.float64)
        want = k * math.prod(cards[p] for p in parents)
        if flat.ndim != 1 or flat.size != want:
            raise ValueError(f"node '{name}': cpt needs {want} entries, got {flat.size}")
        if np.any(flat < 0) or not np.all(np.isfinite(flat)):
            raise ValueError(f"node '{name}': cpt entries must be finite and >= 0")
        table = flat.reshape([cards[p] for p in parents] + [k])
        rows = table.reshape(-1, k)
        bad = np.nonzero(np.abs(rows.sum(axis=1) - 1.0) > 1e-9)[0]
        if bad.size:
            raise ValueError(f"node '{name}': cpt row {bad[0]} does not sum to 1")
        nodes.append(BayesNode(name, k, parents, table))
    return BayesNet(nodes)


def load_bn(path) -> BayesNet:
    """Load a network from a file path or from a bundled name.

    A bare name with no path separator and no extension (for example
    "asia") resolves against the networks shipped in mdnf/data.
    """
    text = str(path)
    if "/" not in text and "\\" not in text and not text.endswith(".bn"):
        res = resources.files("mdnf").joinpath(f"data/{text}.bn")
        if not res.is_file():
            raise ValueError(f"no bundled network named '{text}' "
                             f"(have: {', '.join(bundled_networks())})")
        return parse_bn(res.read_text())
    with open(path) as fh:
        return parse_bn(fh.read())


def bundled_networks():
    """Names of the networks shipped with the package, sorted."""
    data = resources.files("mdnf").joinpath("data")
    return sorted(p.name[:-3] for p in data.iterdir() if p.name.endswith(".bn"))


def validate_evidence(net: BayesNet, ev: dict) -> dict:
    """Normalize an evidence map; must observe a strict subset of the nodes."""
    out = {}
    for name, idx in ev.items():
        if name not in net.index:
            raise ValueError(f"evidence names unknown node '{name}'")
        idx = int(idx)
        if not (0 <= idx < net.node(name).cardinality):
            raise ValueError(f"evidence for '{name}': index out of range "
                             f"(cardinality {net.node(name).cardinality})")
        out[name] = idx
    if len(out) >= len(net.nodes):
        raise ValueError("evidence must leave at least one node latent")
    return out


def latent_nodes(net: BayesNet, ev: dict):
    """Latent node names in declaration order (the dimension order everywhere)."""
    return [n.name for n in net.nodes if n.name not in ev]


def latent_cardinalities(net: BayesNet, ev: dict):
    return [net.node(nm).cardinality for nm in latent_nodes(net, ev)]


def _one_hot(i: int, k: int) -> np.ndarray:
    v = np.zeros(k)
    v[i] = 1.0
    return v


def bn_joint_log_prob(net: BayesNet, xs, ev: dict) -> dc.Node:
    """Traced log p(evidence, x): sum of CPT contractions over all nodes.

    xs: one Node (or array) per latent node in declaration order; rows may be
    relaxed (soft) vectors, and batches of shape (S, K) are supported.
    Gradients flow to the latent vectors; exact zero-probability entries
    surface as -inf only when they carry weight.
    """
    ev = validate_evidence(net, ev)
    latents = latent_nodes(net, ev)
    if len(xs) != len(latents):
        raise ValueError(f"expected {len(latents)} latent vectors, got {len(xs)}")
    vecs = {}
    for name, x in zip(latents, xs):
        vecs[name] = x if isinstance(x, dc.Node) else dc.const(np.asarray(x, dtype=np.float64))
    for name, idx in ev.items():
        vecs[name] = dc.const(_one_hot(idx, net.node(name).cardinality))
    total = None
    for node in net.nodes:
        term = dc.cpt_select(net.log_cpt(node.name),
                             [vecs[p] for p in node.parents] + [vecs[node.name]])
        total = term if total is None else dc.add(total, term)
    return total


def bn_exact_posterior(net: BayesNet, ev: dict, cap: int = 10 ** 6):
    """Posterior table over latent configurations plus the log evidence.

    The table axes follow latent declaration order.  Enumeration is explicit,
    so the latent configuration count must stay within `cap`.
    """
    ev = validate_evidence(net, ev)
    latents = latent_nodes(net, ev)
    shape = [net.node(nm).cardinality for nm in latents]
    size = math.prod(shape)
    if size > cap:
        raise ValueError(f"{size} latent configurations exceed the enumeration "
                         f"cap {cap}; exact inference refused")
    if len(latents) > len(string.ascii_lowercase):
        raise ValueError("too many latent nodes for explicit enumeration")
    letters = {nm: string.ascii_lowercase[i] for i, nm in enumerate(latents)}
    specs, factors = [], []
    for node in net.nodes:
        slicer, spec = [], ""
        for var in node.parents + [node.name]:
            if var in ev:
                slicer.append(ev[var])
            else:
                slicer.append(slice(None))
                spec += letters[var]
        factors.append(node.cpt[tuple(slicer)])
        specs.append(spec)
    out_spec = "".join(letters[nm] for nm in latents)
    joint = np.einsum(",".join(specs) + "->" + out_spec, *factors)
    evidence_prob = joint.sum()
    if evidence_prob <= 0.0:
        raise ValueError("evidence has probability zero under the network")
    return joint / evidence_prob, float(np.log(evidence_prob))
