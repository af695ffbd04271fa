"""Shared test utilities: finite-difference oracle and random trace graphs."""

from __future__ import annotations

import numpy as np

from mdnf import diffcore as dc


def fd_grad(build, values, h=1e-5):
    """Central finite differences of a scalar trace w.r.t. every entry of `values`.

    `build` maps a list of plain arrays to a scalar Node (rebuilding the trace
    from scratch each call, which is how the engine is used in training).
    """
    grads = [np.zeros_like(v) for v in values]
    for i, v in enumerate(values):
        flat = v.reshape(-1)
        gflat = grads[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(build(values).value)
            flat[j] = orig - h
            down = float(build(values).value)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * h)
    return grads


def trace_grads(build, values):
    """Analytic gradients of the same scalar trace, via one reverse sweep."""
    params = [dc.param(v) for v in values]
    root = build(values, params=params)
    dc.reverse_sweep(root)
    return [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]


def assert_grads_close(ga, gf, rtol=1e-4, floor=1e-6):
    """Relative comparison with an absolute floor for near-zero derivatives."""
    for a, f in zip(ga, gf):
        denom = np.maximum(np.abs(f), floor)
        err = np.abs(a - f) / denom
        assert err.max() <= rtol, f"gradient mismatch: rel err {err.max():.3e}"


def random_simplex(rng, k):
    p = rng.random(k) + 0.05
    return p / p.sum()


def random_composite_graph(seed):
    """A randomized soft-path scalar computation over 2-4 parameter vectors.

    Mixes softmax, convolution, permutation/subset ops, table lookups, the
    Gumbel-Softmax style log/pow arithmetic, and reductions.  Returns
    (build, initial_values) where build(values, params=None) -> scalar Node.
    """
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 7))
    n_par = int(rng.integers(2, 5))
    shapes = [(k,) for _ in range(n_par)]
    values = [rng.normal(0.0, 1.0, s) for s in shapes]
    tau = float(rng.uniform(0.5, 3.0))
    table = rng.normal(0.0, 1.0, k)
    ptable = rng.random((k, k)) + 0.1
    cpt_log = np.log(rng.random((k, k)) + 0.05)
    perm = rng.permutation(k)
    subset = np.sort(rng.choice(k, size=max(2, k // 2), replace=False))
    mode = seed % 5

    def build(vals, params=None):
        nodes = params if params is not None else [dc.param(v) for v in vals]
        soft = [dc.softmax_temp(n, tau) for n in nodes]
        if mode == 0:
            conv = dc.circular_convolve(soft[0], soft[1])
            out = dc.log_lookup(conv, table)
            for extra in soft[2:]:
                out = dc.add(out, dc.log_lookup(dc.reverse_last(extra), table))
        elif mode == 1:
            x = dc.permute_last(soft[0], perm)
            y = dc.circular_convolve(x, soft[1 % len(soft)])
            out = dc.sum_(dc.mul(y, dc.log(soft[-1])))
        elif mode == 2:
            out = dc.cpt_select(cpt_log, [soft[0], soft[1]])
            if len(soft) > 2:
                contracted = dc.table_contract(ptable, [soft[2]])
                out = dc.add(out, dc.logsumexp_(dc.log(contracted)))
        elif mode == 3:
            sub = dc.take_last(soft[0], subset)
            small = dc.softmax_temp(dc.log(sub), 1.0)
            patched = dc.subset_replace(soft[1 % len(soft)], subset,
                                        dc.circular_convolve(small, small))
            out = dc.log_lookup(patched, table)
            out = dc.add(out, dc.scale(dc.powc(dc.logistic(dc.sum_(nodes[-1])), 2.0), 0.7))
        else:
            stacked = dc.stack_last([dc.log_lookup(s, table) for s in soft])
            out = dc.logsumexp_(stacked, axis=-1)
            out = dc.add(out, dc.mean(dc.exp_(dc.scale(soft[0], 0.3))))
        return out if out.value.shape == () else dc.sum_(out)

    return build, values
