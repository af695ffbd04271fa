"""Scripted studies: temperature grids, algorithm and base-distribution
comparisons, permutation recovery, and variational EM with gradient E-steps.

Every study hashes a master seed with a stable per-cell key to derive that
cell's random stream, so results never depend on execution order and a rerun
with the same configuration reproduces the same rows bit for bit.  Cells run
on a bounded thread pool; rows come back keyed by cell, not completion order.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .dists import SeededRng, sample_dirichlet_base
from .flows import DiscreteFlow, FlowStack, build_sorting_network
from .infer import Adam, AnnealSchedule, BnTarget, FitConfig, GmmTarget, fit, \
    fit_gs, fit_vif
from .models import gmm_elbo, gmm_init, gmm_m_step, gmm_responsibilities, \
    simulated_clusters

__all__ = [
    "RECOVERY_TARGETS",
    "RecoveryResult",
    "GmmComparison",
    "cell_rng",
    "run_temp_grid",
    "run_algo_comparison",
    "run_base_sweep",
    "run_permutation_recovery",
    "run_gmm_comparison",
]

# supplement-published target marginals for the recovery study
RECOVERY_TARGETS = {
    5: np.array([0.07, 0.13, 0.20, 0.27, 0.33]),
    7: np.array([0.04, 0.07, 0.11, 0.14, 0.18, 0.21, 0.25]),
}


def cell_rng(master_seed: int, key: str) -> SeededRng:
    """Independent stream for one grid cell, stable under reordering."""
    return SeededRng(int(master_seed)).derive(key)


def _seed_list(seeds):
    if isinstance(seeds, (int, np.integer)):
        return list(range(int(seeds)))
    return [int(s) for s in seeds]


def _run_cells(specs, worker, workers):
    """Map cells through a bounded pool; results follow spec order, so the
    worker count can never change what a study returns."""
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(specs) <= 1:
        return [worker(sp) for sp in specs]
    with ThreadPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(worker, specs))


def _finals(report):
    return report.diagnostics.get("external_elbo"), \
        report.diagnostics.get("kl_exact")


def _error_string(exc: Exception) -> str:
    return f"{type(exc).__name__}: {exc}"


# ---------------------------------------------------------------------------
# temperature grid


def run_temp_grid(net, evidence, method: str, taus, tau_ps=(1.0,),
                  seeds=5, *, b: int = 40, s: int = 100,
                  iterations: int = 10000, lr: float = 0.01,
                  gamma: float = 0.0, master_seed: int = 0,
                  workers: int | None = None) -> list[dict]:
    """Final accuracy of one fitter across a temperature grid.

    method "mdnf" trains flows (the prior stays discrete, so tau_p has no
    effect and those rows carry an empty tau_p); "gs" runs the relaxation
    baseline over the full (tau, tau_p) product; "st_gs" discretizes into
    the exact joint and ignores tau_p as well.  A cell that raises is
    recorded as an error string and the grid keeps going.
    """
    if method not in ("mdnf", "gs", "st_gs"):
        raise ValueError(f"unknown temperature-grid method {method!r}")
    algorithm = "vif" if method == "mdnf" else method
    prior_temps = [float(tp) for tp in tau_ps] if method == "gs" else [None]
    target = BnTarget(net, evidence)
    seeds = _seed_list(seeds)

    specs = [(float(tau), tau_p, seed)
             for tau in taus for tau_p in prior_temps for seed in seeds]

    def one_cell(spec):
        tau, tau_p, seed = spec
        key = f"temp/{method}/tau={tau!r}/tau_p={tau_p!r}/seed={seed}"
        row = {"method": method, "tau": tau, "tau_p": tau_p, "seed": seed,
               "final_elbo": None, "final_kl": None, "error": None}
        try:
            cfg = FitConfig(algorithm=algorithm, b=b, s=s,
                            iterations=iterations, lr=lr, seed=seed,
                            schedule=AnnealSchedule(tau, gamma),
                            tau_p=1.0 if tau_p is None else tau_p)
            report = fit(target, cfg, cell_rng(master_seed, key))
        except Exception as exc:
            row["error"] = _error_string(exc)
        else:
            row["final_elbo"], row["final_kl"] = _finals(report)
        return row

    return _run_cells(specs, one_cell, workers)


# ---------------------------------------------------------------------------
# algorithm comparison


def run_algo_comparison(net, evidence, b_list=(1, 10, 40),
                        algorithms=("vif", "bvif", "bvi"), seeds=10, *,
                        s: int = 100, iterations: int = 10000,
                        lr: float = 0.01, tau0: float = 1.0,
                        gamma: float = 0.0, tau_p: float = 1.0,
                        master_seed: int = 0, workers: int | None = None):
    """Per-seed finals plus quartile summaries for every (algorithm, B) cell.

    Returns (rows, summary): rows carry one final ELBO/KL per seed, summary
    one 25/50/75-percentile line per cell (computed over non-failed seeds).
    """
    target = BnTarget(net, evidence)
    seeds = _seed_list(seeds)
    specs = [(algo, int(b), seed)
             for algo in algorithms for b in b_list for seed in seeds]

    def one_cell(spec):
        algo, b, seed = spec
        # streams are keyed by (b, seed) alone: algorithms see common random
        # numbers, and bvif at B=1 reproduces vif exactly
        key = f"algo/b={b}/seed={seed}"
        row = {"algorithm": algo, "b": b, "seed": seed,
               "final_elbo": None, "final_kl": None, "error": None}
        try:
            cfg = FitConfig(algorithm=algo, b=b, s=s, iterations=iterations,
                            lr=lr, seed=seed,
                            schedule=AnnealSchedule(tau0, gamma), tau_p=tau_p)
            report = fit(target, cfg, cell_rng(master_seed, key))
        except Exception as exc:
            row["error"] = _error_string(exc)
        else:
            row["final_elbo"], row["final_kl"] = _finals(report)
        return row

    rows = _run_cells(specs, one_cell, workers)
    summary = []
    for algo in algorithms:
        for b in b_list:
            cell = [r for r in rows
                    if r["algorithm"] == algo and r["b"] == int(b)]
            summary.append(_quartile_row(algo, int(b), cell))
    return rows, summary


def _quartile_row(algo: str, b: int, cell_rows) -> dict:
    row = {"algorithm": algo, "b": b}
    for name in ("elbo", "kl"):
        vals = [r[f"final_{name}"] for r in cell_rows
                if r[f"final_{name}"] is not None]
        for q in (25, 50, 75):
            row[f"{name}_p{q}"] = float(np.percentile(vals, q)) if vals else None
    return row


# ---------------------------------------------------------------------------
# base-distribution sweep


def run_base_sweep(net, evidence, alphas=(0.01, 1.0, 100.0), seeds=5, *,
                   b: int = 40, s: int = 100, iterations: int = 10000,
                   lr: float = 0.01, tau0: float = 1.0, gamma: float = 0.0,
                   master_seed: int = 0, workers: int | None = None) -> list[dict]:
    """Flow training over Dirichlet-drawn categorical bases, one row per
    (alpha, seed).

    Sharp draws (small alpha) act like point masses; flat draws leave the
    base mass spread out where a single shift cannot refocus it.
    """
    target = BnTarget(net, evidence)
    seeds = _seed_list(seeds)
    cards = list(target.cardinalities)
    specs = [(float(alpha), seed) for alpha in alphas for seed in seeds]

    def one_cell(spec):
        alpha, seed = spec
        key = f"base/alpha={alpha!r}/seed={seed}"
        rng = cell_rng(master_seed, key)
        row = {"alpha": alpha, "seed": seed,
               "final_elbo": None, "final_kl": None, "error": None}
        try:
            cfg = FitConfig(algorithm="vif", b=b, s=s, iterations=iterations,
                            lr=lr, seed=seed,
                            schedule=AnnealSchedule(tau0, gamma))
            bases = [[sample_dirichlet_base(alpha, k, rng) for k in cards]
                     for _ in range(b)]
            report = fit_vif(target, cfg, rng, bases=bases)
        except Exception as exc:
            row["error"] = _error_string(exc)
        else:
            row["final_elbo"], row["final_kl"] = _finals(report)
        return row

    return _run_cells(specs, one_cell, workers)


# ---------------------------------------------------------------------------
# permutation recovery


class RecoveryResult(NamedTuple):
    success_fraction: float
    median_iterations: float | None
    rows: list


def _recovery_stack(flow_kind: str, k: int, n_layers: int) -> FlowStack:
    if flow_kind == "partial":
        return build_sorting_network(k)
    return FlowStack([DiscreteFlow("loc_scale", k, trainable_scale=True)
                      for _ in range(n_layers)])


def _recovery_layers(flow_kind: str, k: int, layers) -> int:
    if flow_kind == "partial":
        full = k * (k - 1) // 2
        if layers is not None and int(layers) != full:
            raise ValueError("partial recovery uses the full sorting "
                             f"network, {full} layers for K={k}")
        return full
    if flow_kind == "loc_scale":
        return 10 if layers is None else int(layers)
    raise ValueError(f"unknown recovery flow kind {flow_kind!r}")


def _recover_permutation(k: int, flow_kind: str, n_layers: int,
                         shuffle: np.ndarray, max_iters: int,
                         step_size: float, tau: float):
    """Fit one stack by maximum likelihood until its hard permutation undoes
    the shuffle.  Returns (recovered, iterations to first success)."""
    p_x = RECOVERY_TARGETS[k]
    p_u = p_x[shuffle]
    stack = _recovery_stack(flow_kind, k, n_layers)
    opt = Adam(step_size)
    x_eye = dc.const(np.eye(k))
    p_u_node = dc.const(p_u)
    p_x_node = dc.const(p_x)
    for it in range(max_iters + 1):
        # all-zero logits discretize to the identity, so an identity shuffle
        # counts as recovered before the first update
        if np.array_equal(stack.permutation(), shuffle):
            return True, it
        if it == max_iters:
            break
        shift_nodes = [dc.param(f.shift_logits) for f in stack.layers]
        scale_nodes = [dc.param(f.scale_logits) if f.scale_logits is not None
                       else None for f in stack.layers]
        u = stack.inverse_node(x_eye, tau, logits_nodes=shift_nodes,
                               scale_nodes=scale_nodes)
        q = dc.sum_(dc.mul(u, p_u_node), axis=-1)
        obj = dc.sum_(dc.mul(p_x_node, dc.log(q)))
        dc.reverse_sweep(obj)
        for i, f in enumerate(stack.layers):
            f.shift_logits[:] = opt.step(f"shift{i}", f.shift_logits,
                                         shift_nodes[i].grad)
            if scale_nodes[i] is not None:
                f.scale_logits[:] = opt.step(f"scale{i}", f.scale_logits,
                                             scale_nodes[i].grad)
    return False, max_iters


def run_permutation_recovery(k: int = 5, flow_kind: str = "partial",
                             layers: int | None = None, runs: int = 40,
                             max_iters: int = 5000,
                             rng: SeededRng | None = None, *,
                             step_size: float = 0.1, tau: float = 1.0,
                             workers: int | None = None) -> RecoveryResult:
    """Shuffle the pinned target marginals, then fit a flow stack by maximum
    likelihood and count exact recoveries of the original distribution.

    Recovery means the stack's hard permutation equals the shuffle, checked
    before every update; partial stacks use the full sorting network while
    loc-scale stacks default to 10 layers.  Median iterations are taken over
    successful runs only (None when every run fails).
    """
    if k not in RECOVERY_TARGETS:
        supported = sorted(RECOVERY_TARGETS)
        raise ValueError(f"no pinned target for K={k}; supported: {supported}")
    n_layers = _recovery_layers(flow_kind, k, layers)
    rng = rng if rng is not None else SeededRng(0)
    shuffles = [rng.derive(f"recover/{flow_kind}/k={k}/run={r}").permutation(k)
                for r in range(runs)]
    specs = list(enumerate(shuffles))

    def one_cell(spec):
        r, shuffle = spec
        ok, iters = _recover_permutation(k, flow_kind, n_layers, shuffle,
                                         max_iters, step_size, tau)
        return {"kind": flow_kind, "k": k, "layers": n_layers, "run": r,
                "success": int(ok), "iterations": iters if ok else None}

    rows = _run_cells(specs, one_cell, workers)
    hits = [row["iterations"] for row in rows if row["success"]]
    fraction = len(hits) / runs if runs else 0.0
    median = float(np.median(hits)) if hits else None
    return RecoveryResult(fraction, median, rows)


# ---------------------------------------------------------------------------
# variational EM with gradient E-steps


class GmmComparison(NamedTuple):
    rows: list
    reference_traces: dict


def _reference_em(y, k: int, em_steps: int, rng: SeededRng):
    state = gmm_init(y, k, rng)
    trace, resp = [], None
    for _ in range(em_steps):
        resp = gmm_responsibilities(state)
        state = gmm_m_step(state, resp)
        trace.append(gmm_elbo(state, resp))
    return state, resp, trace


def _softmax_rows(rows):
    out = []
    for row in rows:
        z = row - row.max()
        p = np.exp(z)
        out.append(p / p.sum())
    return np.stack(out)


def _assignment_agreement(resp_a, resp_b) -> float:
    """Best hard-assignment match rate over cluster relabelings."""
    a = np.argmax(resp_a, axis=1)
    b = np.argmax(resp_b, axis=1)
    k = resp_a.shape[1]
    best = 0.0
    for perm in itertools.permutations(range(k)):
        best = max(best, float(np.mean(np.asarray(perm)[a] == b)))
    return best


def _gradient_em(y, k: int, algo: str, b: int, em_steps: int,
                 inner_iters: int, lr: float, tau0: float, gamma: float,
                 s: int | None, seed: int, init_rng: SeededRng,
                 rng: SeededRng):
    """EM loop with the closed-form E-step replaced by a fitted sampler.

    Flow mixtures warm-start across steps and read responsibilities off the
    per-point marginals; the straight-through baseline refits its factorized
    logits each step.  The annealing clock keeps counting as t = step +
    iteration, matching a single run that never resets its temperature.
    """
    state = gmm_init(y, k, init_rng)
    mixture = None
    resp = None
    for step in range(em_steps):
        target = GmmTarget(state)
        schedule = AnnealSchedule(tau0 * math.exp(-gamma * step), gamma)
        if algo == "vif":
            cfg = FitConfig(algorithm="vif", b=b, s=s if s is not None else b,
                            iterations=inner_iters, lr=lr, seed=seed,
                            schedule=schedule)
            report = fit_vif(target, cfg, rng, mixture=mixture)
            mixture = report.mixture
            resp = np.stack(mixture.dim_marginals())
        else:
            cfg = FitConfig(algorithm=algo, b=b,
                            s=s if s is not None else 100,
                            iterations=inner_iters, lr=lr, seed=seed,
                            schedule=schedule)
            report = fit_gs(target, cfg, rng)
            resp = _softmax_rows(report.gs_logits)
        state = gmm_m_step(state, resp)
    return state, resp


def run_gmm_comparison(dataset=None, k: int = 3, b_list=(10,),
                       algorithms=("vif",), seeds=3, *, em_steps: int = 50,
                       inner_iters: int = 200, lr: float = 0.01,
                       s: int | None = None, tau0: float = 1.0,
                       gamma: float = 0.0, master_seed: int = 0,
                       workers: int | None = None) -> GmmComparison:
    """Variational EM on a Gaussian mixture with gradient-based E-steps.

    The closed-form reference and every gradient variant share the same
    seeded initialization, then alternate E and M steps for em_steps rounds.
    Rows compare the final conjugate bound and hard-assignment agreement
    against the reference run of the same seed; reference_traces maps each
    seed to its per-step ELBO trace (monotone non-decreasing by coordinate
    ascent).  algorithm "exact" rows carry the reference itself.
    """
    y = dataset if dataset is not None \
        else simulated_clusters(cell_rng(master_seed, "gmm/data"))[0]
    seeds = _seed_list(seeds)

    references = {}
    for seed in seeds:
        init_rng = cell_rng(master_seed, f"gmm/init/seed={seed}")
        references[seed] = _reference_em(y, k, em_steps, init_rng)
    rows = [{"algorithm": "exact", "b": None, "seed": seed,
             "final_elbo": references[seed][2][-1],
             "reference_elbo": references[seed][2][-1],
             "agreement": 1.0, "error": None} for seed in seeds]

    specs = [(algo, int(b), seed)
             for algo in algorithms for b in b_list for seed in seeds]

    def one_cell(spec):
        algo, b, seed = spec
        _, ref_resp, ref_trace = references[seed]
        row = {"algorithm": algo, "b": b, "seed": seed, "final_elbo": None,
               "reference_elbo": ref_trace[-1], "agreement": None,
               "error": None}
        try:
            init_rng = cell_rng(master_seed, f"gmm/init/seed={seed}")
            rng = cell_rng(master_seed, f"gmm/{algo}/b={b}/seed={seed}")
            state, resp = _gradient_em(y, k, algo, b, em_steps, inner_iters,
                                       lr, tau0, gamma, s, seed, init_rng,
                                       rng)
        except Exception as exc:
            row["error"] = _error_string(exc)
        else:
            row["final_elbo"] = gmm_elbo(state, resp)
            row["agreement"] = _assignment_agreement(resp, ref_resp)
        return row

    rows.extend(_run_cells(specs, one_cell, workers))
    traces = {seed: references[seed][2] for seed in seeds}
    return GmmComparison(rows, traces)
