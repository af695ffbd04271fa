"""Variational training: Monte Carlo ELBO, jointly trained shift mixtures,
boosted variants, and Gumbel-Softmax baselines.

All fitters maximize an evidence lower bound by rebuilding a trace every
iteration and ascending with per-parameter adaptive steps.  Mixtures with
point-mass bases admit a stratified, rho-weighted objective (one pushforward
per component) that is exact and free of sampling noise; everything else is
estimated from cfg.s Monte Carlo samples.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import diffcore as dc
from .dists import CategoricalParams, DeltaBase, SeededRng, categorical_entropy
from .flows import DiscreteFlow, FlowStack
from .mixture import FlowMixture
from .models import (bn_joint_log_prob, bn_exact_posterior, gmm_log_joint,
                     gmm_log_joint_table, latent_cardinalities, latent_nodes,
                     validate_evidence)

__all__ = [
    "AnnealSchedule",
    "FitConfig",
    "FitRecord",
    "FitReport",
    "BnTarget",
    "GmmTarget",
    "RmsProp",
    "Adam",
    "anneal",
    "build_mixture",
    "elbo_estimate",
    "fit",
    "fit_vif",
    "fit_bvif",
    "fit_bvi",
    "fit_gs",
    "gs_log_density_node",
    "gs_discretized_elbo",
]

CHECKPOINT_EVERY = 100
ENUMERATION_CAP = 10 ** 6
ALGORITHMS = ("vif", "bvif", "bvi", "gs", "st_gs")


# ---------------------------------------------------------------------------
# schedules and configuration


@dataclass(frozen=True)
class AnnealSchedule:
    """Exponential temperature decay tau_t = tau0 * exp(-gamma * t)."""

    tau0: float = 1.0
    gamma: float = 0.0

    def __post_init__(self):
        if not (self.tau0 > 0):
            raise ValueError("tau0 must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


def anneal(schedule: AnnealSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("iteration index must be nonnegative")
    return schedule.tau0 * math.exp(-schedule.gamma * t)


@dataclass
class FitConfig:
    algorithm: str = "vif"
    b: int = 1
    s: int = 100
    iterations: int = 1000
    lr: float = 0.01
    seed: int = 0
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    tau_p: float = 1.0  # prior relaxation temperature, gs only

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm '{self.algorithm}'")
        if self.b < 1 or self.s < 1 or self.iterations < 1:
            raise ValueError("b, s and iterations must all be >= 1")
        if not (self.lr > 0) or not (self.tau_p > 0):
            raise ValueError("lr and tau_p must be positive")


@dataclass
class FitRecord:
    iteration: int
    objective: float
    tau: float
    wall_ms: float
    external_elbo: float | None = None
    kl_exact: float | None = None


@dataclass
class FitReport:
    config: FitConfig
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    mixture: FlowMixture | None = None
    gs_logits: list | None = None
    nonfinite_clips: int = 0
    diagnostics: dict = field(default_factory=dict)

    def trajectory(self):
        """Timing-free view of the run, safe to compare across replays."""
        return [(r.iteration, r.objective, r.tau) for r in self.records]


# ---------------------------------------------------------------------------
# optimizers


class RmsProp:
    """Ascent steps scaled by a running squared-gradient average."""

    def __init__(self, lr: float = 0.01, decay: float = 0.9, eps: float = 1e-8):
        self.lr, self.decay, self.eps = lr, decay, eps
        self.cache: dict = {}

    def step(self, key: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        avg = self.cache.get(key)
        if avg is None:
            avg = np.zeros_like(value)
        avg = self.decay * avg + (1.0 - self.decay) * grad * grad
        self.cache[key] = avg
        return value + self.lr * grad / (np.sqrt(avg) + self.eps)


class Adam:
    """Ascent variant with bias-corrected first and second moments."""

    def __init__(self, lr: float = 0.1, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.cache: dict = {}

    def step(self, key: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        m, v, t = self.cache.get(key, (np.zeros_like(value),
                                       np.zeros_like(value), 0))
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.cache[key] = (m, v, t)
        mhat = m / (1.0 - self.beta1 ** t)
        vhat = v / (1.0 - self.beta2 ** t)
        return value + self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_nonfinite(grad: np.ndarray):
    """Replace non-finite gradient entries (nan -> 0, +-inf -> +-1e6)."""
    bad = ~np.isfinite(grad)
    n_bad = int(bad.sum())
    if n_bad:
        grad = np.nan_to_num(grad, nan=0.0, posinf=1e6, neginf=-1e6)
    return grad, n_bad


# ---------------------------------------------------------------------------
# targets


class BnTarget:
    """Posterior-inference target: p(latents, evidence) of a discrete network.

    Dimension order of latent variables follows their declaration order.
    When the latent space is enumerable the exact posterior and log evidence
    are computed once up front and reused for external diagnostics.
    """

    def __init__(self, net, evidence, cap: int = ENUMERATION_CAP):
        self.net = net
        self.evidence = validate_evidence(net, evidence)
        self.latents = latent_nodes(net, self.evidence)
        self.cardinalities = latent_cardinalities(net, self.evidence)
        self.posterior_table = None
        self.log_evidence = None
        if math.prod(self.cardinalities) <= cap:
            self.posterior_table, self.log_evidence = \
                bn_exact_posterior(net, self.evidence, cap=cap)

    def log_joint_rows(self, xs):
        return bn_joint_log_prob(self.net, xs, self.evidence)

    def log_joint_grouped(self, x_node: dc.Node):
        dims = [dc.take_axis1(x_node, d) for d in range(len(self.cardinalities))]
        return self.log_joint_rows(dims)

    def relaxed_log_joint(self, soft_nodes, tau_p: float):
        """Joint with latent factors replaced by relaxed-categorical densities
        of temperature tau_p evaluated at the soft samples; factors of
        observed nodes enter as expected log-CPT entries (multilinear)."""
        soft = dict(zip(self.latents, soft_nodes))
        total = None
        for nd in self.net.nodes:
            vecs = [soft[p] if p in soft
                    else dc.const(_one_hot(self.evidence[p], self.net.node(p).cardinality))
                    for p in nd.parents]
            if nd.name in self.evidence:
                child = dc.const(_one_hot(self.evidence[nd.name], nd.cardinality))
                term = dc.cpt_select(self.net.log_cpt(nd.name), vecs + [child])
            else:
                if vecs:
                    probs = dc.table_contract(nd.cpt, vecs)
                    log_p = dc.log(probs)
                else:
                    log_p = dc.const(nd.log_cpt)
                term = gs_log_density_node(log_p, soft[nd.name], tau_p, nd.cardinality)
            total = term if total is None else dc.add(total, term)
        return total


class GmmTarget:
    """Cluster-allocation target: one dimension per data point, the expected
    log joint is a fixed (n_points, K) table linear in each one-hot row."""

    def __init__(self, state):
        self.state = state
        self.cardinalities = [state.n_clusters] * state.n_points
        self.posterior_table = None
        self.log_evidence = None

    def log_joint_rows(self, xs):
        stacked = dc.stack_last(xs)  # (n, K, n_points)
        return dc.masked_lookup(stacked, gmm_log_joint_table(self.state).T,
                                n_reduce=2)

    def log_joint_grouped(self, x_node: dc.Node):
        return gmm_log_joint(self.state, x_node)


def _one_hot(i: int, k: int) -> np.ndarray:
    v = np.zeros(k)
    v[i] = 1.0
    return v


def _joint_callbacks(model):
    if callable(model) and not hasattr(model, "log_joint_rows"):
        return model, None
    return (getattr(model, "log_joint_rows", None),
            getattr(model, "log_joint_grouped", None))


def _all_delta(m: FlowMixture) -> bool:
    return all(isinstance(base, DeltaBase) for row in m.bases for base in row)


# ---------------------------------------------------------------------------
# mixture construction


def build_mixture(cardinalities, b: int, rng: SeededRng, bases=None,
                  init_scale: float = 0.01) -> FlowMixture:
    """Uniform-weight mixture of single-layer shift flows.

    Default bases are point masses at category 0, so each component is a
    learnable atom placed by its shift argmax.  Logits start at small seeded
    noise: the softmax is near uniform but the argmaxes scatter, which breaks
    the component symmetry.
    """
    cards = list(cardinalities)
    if bases is None:
        bases = [[DeltaBase(0, k) for k in cards] for _ in range(b)]
    if len(bases) != b:
        raise ValueError("bases must have one row per component")
    components = []
    for bi in range(b):
        row = []
        for k in cards:
            logits = rng.normal(0.0, init_scale, size=k)
            row.append(FlowStack([DiscreteFlow("shift_only", k,
                                               shift_logits=logits)]))
        components.append(row)
    return FlowMixture(np.full(b, 1.0 / b), components, bases)


# ---------------------------------------------------------------------------
# the ELBO estimator


def elbo_estimate(m: FlowMixture, log_joint, s: int, rng: SeededRng,
                  tau: float = 1.0) -> dc.Node:
    """Traced S-sample estimate of E_q[log p(D, x) - log q(x)].

    With all-point-mass bases and s equal to the component count, allocation
    is stratified (one deterministic sample per component, rho-weighted),
    making the value exact and repeat calls identical.
    """
    if s < 1:
        raise ValueError("sample count must be >= 1")
    rows_fn, grouped_fn = _joint_callbacks(log_joint)
    if _all_delta(m) and s == m.n_components:
        assignments = np.arange(m.n_components)
        weights = m.rho.copy()
    else:
        assignments = m.draw_assignments(s, rng)
        weights = np.full(s, 1.0 / s)
    if m.is_grouped() and grouped_fn is not None:
        mu = m.grouped_mu_nodes(tau)
        u = m.grouped_draw_base_batch(assignments, rng)
        x = m.grouped_sample_from(mu, assignments, u)
        lp, lq = grouped_fn(x), m.grouped_log_prob(mu, x)
    elif m.is_packed() and rows_fn is not None:
        mu = m.packed_mu_nodes(tau)
        u = m.draw_base_batch(assignments, rng)
        batch = m.sample_batch_from(mu, assignments, u)
        lp, lq = rows_fn(batch.xs), m.log_prob_from(mu, batch.xs)
    else:
        u = m.draw_base_batch(assignments, rng)
        batch = m._general_sample_batch(assignments, u, tau)
        lp, lq = rows_fn(batch.xs), m._general_log_prob(batch.xs, tau)
    return dc.sum_(dc.mul(dc.const(weights), dc.sub(lp, lq)))


# ---------------------------------------------------------------------------
# shared fit plumbing


def _require(cfg: FitConfig, algorithm: str):
    if cfg.algorithm != algorithm:
        raise ValueError(f"config names algorithm '{cfg.algorithm}', "
                         f"expected '{algorithm}'")


def _exact_tables(target):
    """(joint log table, posterior table) flattened, or None when no oracle."""
    post = getattr(target, "posterior_table", None)
    if post is None:
        return None
    log_ev = target.log_evidence
    with np.errstate(divide="ignore"):
        joint = np.log(post.ravel()) + log_ev
    return joint, post.ravel()


def _mixture_externals(m: FlowMixture, tables):
    if tables is None:
        return None, None
    joint_log, post = tables
    if math.prod(m.cardinalities) > ENUMERATION_CAP:
        return None, None
    q = m.q_table().ravel()
    return _table_externals(q, joint_log, post)


def _table_externals(q, joint_log, post):
    held = q > 0
    if np.any(post[held] == 0.0):
        return -np.inf, np.inf
    kl = float(np.sum(q[held] * (np.log(q[held]) - np.log(post[held]))))
    elbo = float(np.sum(q[held] * (joint_log[held] - np.log(q[held]))))
    return elbo, kl


def _abort_if_divergent(value: float, t: int):
    if not np.isfinite(value):
        raise RuntimeError(f"objective diverged to {value} at iteration {t}; "
                           "check temperatures and learning rate")


class _Run:
    """Record/snapshot bookkeeping shared by every fitter."""

    def __init__(self, cfg: FitConfig):
        self.report = FitReport(config=cfg)

    def record(self, t, value, tau, started, external=(None, None)):
        ms = (time.perf_counter() - started) * 1000.0
        ext, kl = external
        self.report.records.append(FitRecord(t, value, tau, ms, ext, kl))

    def snapshot(self, t, payload: dict):
        self.report.snapshots.append((t, payload))


def _checkpoint(t: int, total: int) -> bool:
    return t % CHECKPOINT_EVERY == 0 or t == total - 1


# ---------------------------------------------------------------------------
# VIF: joint training of all components


def _value_with_grads(value_vec, *carriers):
    """Node carrying `value_vec` forward while the carriers supply gradients.

    Each carrier enters as (carrier - const(carrier.value)), contributing zero
    to the forward pass; reverse sweeps still flow through it unchanged.
    """
    node = dc.const(np.asarray(value_vec))
    for c in carriers:
        node = dc.add(node, dc.sub(c, dc.const(np.array(c.value, copy=True))))
    return node


def _vif_stage(m, target, cfg, rng, run, opt, iters, t_offset, total_iters,
               tables, trainable_rows=None, w_value=None, rho_old=None):
    """Inner ascent loop shared by fit_vif and the boosting stages.

    Plain joint training when w_value is None.  In a boosting stage the last
    component is new: its weight is logistic(w), previous weights rescale by
    (1 - logistic(w)), and only `trainable_rows` of the shift block (plus w)
    receive updates.  Returns the final w value.
    """
    rows_fn, grouped_fn = _joint_callbacks(target)
    grouped = m.is_grouped() and grouped_fn is not None
    if not m.is_packed():
        raise ValueError("fitting trains single-layer shift mixtures only")
    b = m.n_components
    stratified = _all_delta(m)
    stage_tag = f"s{t_offset}"
    for i in range(iters):
        started = time.perf_counter()
        t = t_offset + i
        tau = anneal(cfg.schedule, t)
        if stratified:
            assignments = np.arange(b)
            weights = None  # rho comes from the traced weight node
        else:
            assignments = m.draw_assignments(cfg.s, rng)
            weights = np.full(cfg.s, 1.0 / cfg.s)

        w_node = None
        if w_value is not None:
            w_node = dc.param(np.asarray(w_value))
            keep = dc.logistic(dc.neg(w_node))
            parts = [dc.mul(keep, dc.const(np.asarray(rho_old[j])))
                     for j in range(b - 1)] + [dc.logistic(w_node)]
            rho_node = dc.stack_last(parts)
        else:
            rho_node = dc.const(m.rho)

        rho_val = _staged_rho(m.rho, w_value, rho_old)
        if grouped:
            block = m.grouped_shift_logits()
            p = dc.param(block)
            mu = m.grouped_mu_nodes(tau, shift_node=p)
            u = m.grouped_draw_base_batch(assignments, rng)
            x = m.grouped_sample_from(mu, assignments, u)
            lp = grouped_fn(x)
            dims = range(m.n_dims)
            q_x, tabs = m.neighbor_move_tables(
                [mu.value[:, d] for d in dims], [x.value[:, d] for d in dims],
                assignments, rho_val)
            coord = dc.masked_lookup(x, np.stack(tabs, axis=1), n_reduce=2)
            dens = m.grouped_log_prob_probspace(mu, dc.const(x.value), rho_node)
            lq = _value_with_grads(np.log(q_x), coord, dens)
            params = [("shift", p, block)]
        else:
            mats = m.packed_shift_logits()
            ps = [dc.param(mat) for mat in mats]
            mu = m.packed_mu_nodes(tau, shift_nodes=ps)
            u = m.draw_base_batch(assignments, rng)
            batch = m.sample_batch_from(mu, assignments, u)
            lp = rows_fn(batch.xs)
            q_x, tabs = m.neighbor_move_tables(
                [node.value for node in mu], [node.value for node in batch.xs],
                assignments, rho_val)
            coord = None
            for d, x_node in enumerate(batch.xs):
                term = dc.masked_lookup(x_node, tabs[d])
                coord = term if coord is None else dc.add(coord, term)
            dens = m.log_prob_probspace(
                mu, [dc.const(node.value) for node in batch.xs], rho_node)
            lq = _value_with_grads(np.log(q_x), coord, dens)
            params = [(f"shift{d}", ps[d], mats[d]) for d in range(len(ps))]

        gaps = dc.sub(lp, lq)
        if stratified:
            # exact mixture expectation: sum_b rho_b * gap_b, rho traced
            obj = dc.sum_(dc.mul(rho_node, gaps))
        else:
            obj = dc.sum_(dc.mul(dc.const(weights), gaps))
        value = float(obj.value)
        _abort_if_divergent(value, t)
        # externals must describe the parameters the objective was scored at,
        # so capture them before the update touches the mixture
        snap = None
        ext = (None, None)
        if _checkpoint(t, total_iters):
            snap_rho = _staged_rho(m.rho, w_value, rho_old)
            ext = _mixture_externals(_reweighted(m, snap_rho), tables)
            snap = {"shift": _shift_copy(m), "rho": snap_rho.copy()}
        dc.reverse_sweep(obj)

        for key, node, current in params:
            grad, n_bad = clip_nonfinite(node.grad)
            run.report.nonfinite_clips += n_bad
            if trainable_rows is not None:
                mask = np.zeros_like(grad)
                mask[trainable_rows] = 1.0
                grad = grad * mask
            new = opt.step(f"{stage_tag}:{key}", current, grad)
            if grouped:
                m.set_grouped_shift_logits(new)
            else:
                mats[int(key[5:])] = new
        if not grouped:
            m.set_packed_shift_logits(mats)
        if w_node is not None:
            grad, n_bad = clip_nonfinite(np.atleast_1d(w_node.grad))
            run.report.nonfinite_clips += n_bad
            w_value = float(opt.step(f"{stage_tag}:w", np.asarray(w_value),
                                     grad[0] if grad.shape else grad))

        run.record(t, value, tau, started, ext)
        if snap is not None:
            run.snapshot(t, snap)
    return w_value


def _staged_rho(rho, w_value, rho_old):
    if w_value is None:
        return np.asarray(rho)
    r = 1.0 / (1.0 + math.exp(-w_value))
    return np.append((1.0 - r) * np.asarray(rho_old), r)


def _reweighted(m: FlowMixture, rho) -> FlowMixture:
    return FlowMixture(rho, m.components, m.bases)


def _shift_copy(m: FlowMixture):
    if m.is_grouped():
        return m.grouped_shift_logits()
    return [mat.copy() for mat in m.packed_shift_logits()]


def fit_vif(model, cfg: FitConfig, rng: SeededRng = None, bases=None,
            mixture: FlowMixture = None) -> FitReport:
    """Jointly train every component's shift logits; weights stay fixed.

    Point-mass bases give the exact stratified objective; categorical bases
    (for example Dirichlet draws) fall back to cfg.s Monte Carlo samples.
    """
    _require(cfg, "vif")
    rng = rng if rng is not None else SeededRng(cfg.seed)
    m = mixture if mixture is not None \
        else build_mixture(model.cardinalities, cfg.b, rng, bases=bases)
    tables = _exact_tables(model)
    run = _Run(cfg)
    opt = RmsProp(cfg.lr)
    _vif_stage(m, model, cfg, rng, run, opt, cfg.iterations, 0,
               cfg.iterations, tables)
    run.report.mixture = m
    _finalize_mixture_report(run.report, m, tables)
    return run.report


def _finalize_mixture_report(report, m, tables):
    ext, kl = _mixture_externals(m, tables)
    report.diagnostics = {"final_objective": report.records[-1].objective,
                          "external_elbo": ext, "kl_exact": kl}


# ---------------------------------------------------------------------------
# boosting variants


def _boosted_fit(model, cfg, rng, train_shifts: bool, atoms=None) -> FitReport:
    """Sequential stages; stage j trains component j's weight through a
    logistic map (and its shifts, for the flow-training variant) while all
    earlier components stay frozen and rescale by (1 - rho_j)."""
    rng = rng if rng is not None else SeededRng(cfg.seed)
    cards = list(model.cardinalities)
    tables = _exact_tables(model)
    stage_iters = max(1, cfg.iterations // cfg.b)
    run = _Run(cfg)

    m = None
    for j in range(cfg.b):
        new = build_mixture(cards, 1, rng)
        if atoms is not None:
            new.set_packed_shift_logits([_atom_logits(atoms[j][d], cards[d])
                                         for d in range(len(cards))])
        opt = RmsProp(cfg.lr)
        if m is None:
            # first stage: plain single-component training, no boosting knobs;
            # matches fit_vif with B=1 draw for draw
            m = new
            _vif_stage(m, model, cfg, rng, run, opt, stage_iters, 0,
                       stage_iters * cfg.b, tables,
                       trainable_rows=None if train_shifts else [])
        else:
            rho_old = m.rho.copy()
            placeholder = np.append(rho_old, 0.5)
            m = FlowMixture(placeholder / placeholder.sum(),
                            m.components + new.components,
                            m.bases + new.bases)
            rows = [m.n_components - 1] if train_shifts else []
            w = _vif_stage(m, model, cfg, rng, run, opt, stage_iters,
                           j * stage_iters, stage_iters * cfg.b, tables,
                           trainable_rows=rows, w_value=0.0, rho_old=rho_old)
            m = _reweighted(m, _staged_rho(None, w, rho_old))
    run.report.mixture = m
    _finalize_mixture_report(run.report, m, tables)
    return run.report


def _atom_logits(index: int, k: int) -> np.ndarray:
    row = np.zeros((1, k))
    row[0, index] = 2.0
    return row


def fit_bvif(model, cfg: FitConfig, rng: SeededRng = None) -> FitReport:
    """Boosted flow training: add one trained component per stage.

    With B=1 this is exactly fit_vif on a single component (same seed, same
    draw order, same trajectory).
    """
    _require(cfg, "bvif")
    return _boosted_fit(model, cfg, rng, train_shifts=True)


def fit_bvi(model, cfg: FitConfig, rng: SeededRng = None) -> FitReport:
    """Boosting over weights only: atoms are fixed point masses drawn without
    replacement from the configuration space (when it is large enough)."""
    _require(cfg, "bvi")
    rng = rng if rng is not None else SeededRng(cfg.seed)
    cards = list(model.cardinalities)
    total = math.prod(cards)
    if total <= ENUMERATION_CAP:
        if cfg.b <= total:
            flat = rng.permutation(total)[:cfg.b]
        else:
            flat = rng.integers(0, total, size=cfg.b)
        atoms = np.stack(np.unravel_index(np.asarray(flat), cards), axis=-1)
    else:
        seen, rows = set(), []
        while len(rows) < cfg.b:
            cand = tuple(int(rng.integers(0, k)) for k in cards)
            if cand not in seen or len(seen) >= total:
                seen.add(cand)
                rows.append(cand)
        atoms = np.asarray(rows)
    return _boosted_fit(model, cfg, rng, train_shifts=False, atoms=atoms)


# ---------------------------------------------------------------------------
# Gumbel-Softmax baselines


def gs_log_density_node(log_p, y: dc.Node, tau: float, k: int) -> dc.Node:
    """Traced relaxed-categorical log density on the open simplex.

    log_p is a constant or traced log-probability row (normalization shifts
    cancel); y holds soft samples along the last axis.
    """
    t = float(tau)
    if not (t > 0):
        raise ValueError("temperature must be positive")
    ly = dc.log(y)
    a = dc.sub(log_p, dc.scale(ly, t))
    tot = dc.sum_(dc.sub(a, ly), axis=-1)
    lse = dc.logsumexp_(a, axis=-1)
    const_part = (k - 1) * math.log(t) + float(gammaln(k))
    return dc.add(dc.const(np.float64(const_part)),
                  dc.sub(tot, dc.scale(lse, float(k))))


def _factorized_q_table(logit_rows):
    table = np.ones(())
    for row in logit_rows:
        z = row - row.max()
        p = np.exp(z)
        p /= p.sum()
        table = np.multiply.outer(table, p)
    return table


def _gs_externals(logit_rows, tables):
    if tables is None:
        return None, None
    joint_log, post = tables
    q = _factorized_q_table(logit_rows).ravel()
    return _table_externals(q, joint_log, post)


def fit_gs(model, cfg: FitConfig, rng: SeededRng = None) -> FitReport:
    """Gumbel-Softmax baselines over a factorized relaxed posterior.

    algorithm "gs": soft samples scored against a relaxed joint (latent
    factors become tau_p relaxed densities) minus the sampler's own density.
    algorithm "st_gs": samples are discretized straight-through into the
    exact discrete joint, plus the closed-form factorized entropy.
    """
    if cfg.algorithm not in ("gs", "st_gs"):
        raise ValueError(f"config names algorithm '{cfg.algorithm}', "
                         "expected 'gs' or 'st_gs'")
    if not hasattr(model, "relaxed_log_joint") and cfg.algorithm == "gs":
        raise ValueError("gs fitting needs a factorized network target")
    rng = rng if rng is not None else SeededRng(cfg.seed)
    cards = list(model.cardinalities)
    logits = [rng.normal(0.0, 0.01, size=k) for k in cards]
    tables = _exact_tables(model)
    run = _Run(cfg)
    opt = RmsProp(cfg.lr)
    for t in range(cfg.iterations):
        started = time.perf_counter()
        tau = anneal(cfg.schedule, t)
        phis = [dc.param(v) for v in logits]
        softs = []
        for d, k in enumerate(cards):
            g = rng.gumbel(size=(cfg.s, k))
            z = dc.add(phis[d], dc.const(g))
            softs.append(dc.softmax_temp(z, tau))
        if cfg.algorithm == "st_gs":
            hard = [dc.straight_through(sft) for sft in softs]
            lp = model.log_joint_rows(hard)
            obj = dc.mean(lp)
            for d in range(len(cards)):
                p = dc.softmax_temp(phis[d], 1.0)
                ent = dc.neg(dc.sum_(dc.mul(p, dc.log(p))))
                obj = dc.add(obj, ent)
        else:
            lp = model.relaxed_log_joint(softs, cfg.tau_p)
            lq = None
            for d, k in enumerate(cards):
                log_p = dc.log(dc.softmax_temp(phis[d], 1.0))
                term = gs_log_density_node(log_p, softs[d], tau, k)
                lq = term if lq is None else dc.add(lq, term)
            obj = dc.mean(dc.sub(lp, lq))
        value = float(obj.value)
        _abort_if_divergent(value, t)
        snap = None
        ext = (None, None)
        if _checkpoint(t, cfg.iterations):
            ext = _gs_externals(logits, tables)
            snap = {"logits": [v.copy() for v in logits]}
        dc.reverse_sweep(obj)
        for d, phi in enumerate(phis):
            grad, n_bad = clip_nonfinite(phi.grad)
            run.report.nonfinite_clips += n_bad
            logits[d] = opt.step(f"phi{d}", logits[d], grad)
        run.record(t, value, tau, started, ext)
        if snap is not None:
            run.snapshot(t, snap)
    run.report.gs_logits = logits
    ext, kl = _gs_externals(logits, tables)
    est, se = gs_discretized_elbo(logits, model, rng=rng.derive("final-eval"))
    run.report.diagnostics = {
        "final_objective": run.report.records[-1].objective,
        "external_elbo": ext, "kl_exact": kl,
        "discretized_elbo": est, "discretized_se": se,
    }
    return run.report


def fit(model, cfg: FitConfig, rng: SeededRng = None) -> FitReport:
    """Run the trainer selected by cfg.algorithm."""
    if cfg.algorithm in ("gs", "st_gs"):
        return fit_gs(model, cfg, rng)
    return {"vif": fit_vif, "bvif": fit_bvif,
            "bvi": fit_bvi}[cfg.algorithm](model, cfg, rng)


def gs_discretized_elbo(logits, log_joint, s: int = 10 ** 4,
                        rng: SeededRng = None):
    """Discrete ELBO of the argmax sampler behind relaxed logits.

    Joint term: mean discrete log joint of s straight-through samples.
    Entropy term: closed-form categorical entropy of per-dimension empirical
    frequencies.  Returns (estimate, jackknife standard error).
    """
    if s < 2:
        raise ValueError("need at least 2 samples")
    rng = rng if rng is not None else SeededRng(0)
    rows_fn, _ = _joint_callbacks(log_joint)
    idx_cols, one_hots = [], []
    for row in logits:
        k = row.size
        z = row + rng.gumbel(size=(s, k))
        idx = z.argmax(axis=-1)
        idx_cols.append(idx)
        oh = np.zeros((s, k))
        oh[np.arange(s), idx] = 1.0
        one_hots.append(dc.const(oh))
    lp = np.asarray(rows_fn(one_hots).value, dtype=np.float64)

    mean_lp = lp.mean()
    entropy_total = 0.0
    # leave-one-out pseudo-values: dropping sample i changes each dimension's
    # empirical entropy only through which category i landed on
    pseudo = (s * mean_lp - lp) / (s - 1.0)
    for idx, row in zip(idx_cols, logits):
        k = row.size
        counts = np.bincount(idx, minlength=k).astype(np.float64)
        freqs = counts / s
        entropy_total += categorical_entropy(CategoricalParams(freqs))
        drop_h = np.zeros(k)
        for c in range(k):
            if counts[c] == 0:
                continue
            loo = counts.copy()
            loo[c] -= 1.0
            loo /= (s - 1.0)
            drop_h[c] = categorical_entropy(CategoricalParams(loo))
        pseudo = pseudo + drop_h[idx]
    estimate = float(mean_lp + entropy_total)
    theta_bar = pseudo.mean()
    se = math.sqrt((s - 1.0) / s * float(((pseudo - theta_bar) ** 2).sum()))
    return estimate, se
