"""Turn experiment CSVs into figure-style charts.

Every figure kind is an explicit flag naming the columns it consumes, so a
mismatched file fails with the missing column instead of a silent mis-plot.
Rendering computes nothing beyond means and percentiles of the given rows;
output bytes are deterministic for fixed inputs (fixed layout, fixed image
metadata, no clock anywhere).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "mdnf-plots"  # stable element ids

import matplotlib.pyplot as plt  # noqa: E402  backend must be pinned first

FIGURE_KINDS = ("objective-gap", "temp-heat", "algo-box", "base-box",
                "variance-bars")

__all__ = ["FIGURE_KINDS", "RenderError", "render", "main"]


class RenderError(Exception):
    pass


# ---------------------------------------------------------------------------
# CSV intake


def read_rows(path):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise RenderError(str(exc))
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise RenderError(f"{path}: empty file, expected a CSV header")
        rows = list(reader)
    if not rows:
        raise RenderError(f"{path}: no data rows")
    return list(reader.fieldnames), rows


def require_columns(path, fieldnames, needed) -> None:
    missing = [c for c in needed if c not in fieldnames]
    if missing:
        raise RenderError(f"{path}: missing column(s) "
                          f"{', '.join(missing)} (have: "
                          f"{', '.join(fieldnames)})")


def live_rows(rows):
    """Rows whose error cell is empty; failed grid cells carry no numbers."""
    return [r for r in rows if not r.get("error")]


def _group_order(values):
    seen = []
    for v in values:
        if v not in seen:
            seen.append(v)
    return seen


def _box_stats(label, values):
    v = np.asarray(values, dtype=np.float64)
    return {"label": label, "med": float(np.percentile(v, 50)),
            "q1": float(np.percentile(v, 25)),
            "q3": float(np.percentile(v, 75)),
            "whislo": float(v.min()), "whishi": float(v.max()),
            "fliers": []}


# ---------------------------------------------------------------------------
# figure kinds


def _fig_objective_gap(inputs):
    """Dual-series run chart: dense internal objective, sparse external ELBO."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for path, fieldnames, rows in inputs:
        require_columns(path, fieldnames,
                        ["iteration", "internal_objective", "external_elbo"])
        stem = Path(path).stem
        its = [int(r["iteration"]) for r in rows]
        ax.plot(its, [float(r["internal_objective"]) for r in rows],
                lw=1.0, label=f"{stem} internal")
        marked = [(int(r["iteration"]), float(r["external_elbo"]))
                  for r in rows if r["external_elbo"] not in ("", None)]
        if marked:
            ax.plot(*zip(*marked), "o--", ms=4, lw=1.0,
                    label=f"{stem} external")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective (nats)")
    ax.legend(fontsize=8)
    ax.set_title("internal objective vs external ELBO")
    fig.tight_layout()
    return fig


def _fig_temp_heat(inputs):
    """One heat panel per method: mean final KL over the temperature grid."""
    rows = []
    for path, fieldnames, file_rows in inputs:
        require_columns(path, fieldnames,
                        ["method", "tau", "tau_p", "seed", "final_kl"])
        rows.extend(live_rows(file_rows))
    if not rows:
        raise RenderError("every grid cell failed, nothing to draw")
    methods = _group_order([r["method"] for r in rows])
    fig, axes = plt.subplots(1, len(methods),
                             figsize=(4.4 * len(methods), 3.8), squeeze=False)
    for ax, method in zip(axes[0], methods):
        sub = [r for r in rows if r["method"] == method]
        taus = sorted({float(r["tau"]) for r in sub})
        tau_ps = sorted({r["tau_p"] for r in sub},
                        key=lambda v: (v != "", float(v or 0.0)))
        grid = np.full((len(tau_ps), len(taus)), np.nan)
        for i, tp in enumerate(tau_ps):
            for j, tau in enumerate(taus):
                vals = [float(r["final_kl"]) for r in sub
                        if r["tau_p"] == tp and float(r["tau"]) == tau
                        and r["final_kl"] != ""]
                if vals:
                    grid[i, j] = float(np.mean(vals))
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(taus)), [f"{t:g}" for t in taus])
        ax.set_yticks(range(len(tau_ps)),
                      [tp if tp else "-" for tp in tau_ps])
        ax.set_xlabel("tau")
        ax.set_ylabel("tau_p")
        ax.set_title(f"{method}: mean final KL")
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    return fig


def _fig_algo_box(inputs):
    """25/50/75 boxes of final ELBO per (algorithm, B) cell."""
    rows = []
    for path, fieldnames, file_rows in inputs:
        require_columns(path, fieldnames,
                        ["algorithm", "b", "seed", "final_elbo"])
        rows.extend(r for r in live_rows(file_rows)
                    if r["final_elbo"] != "")
    if not rows:
        raise RenderError("no successful runs to draw")
    cells = _group_order([(r["algorithm"], r["b"]) for r in rows])
    stats = []
    for algo, b in cells:
        vals = [float(r["final_elbo"]) for r in rows
                if (r["algorithm"], r["b"]) == (algo, b)]
        label = algo if b in ("", None) else f"{algo}\nB={b}"
        stats.append(_box_stats(label, vals))
    fig, ax = plt.subplots(figsize=(1.1 + 1.05 * len(stats), 4.0))
    ax.bxp(stats, showfliers=False)
    ax.set_ylabel("final ELBO (nats)")
    ax.set_title("algorithm comparison, 25/50/75 percentiles")
    fig.tight_layout()
    return fig


def _fig_base_box(inputs):
    """25/50/75 boxes of final KL per Dirichlet strength alpha."""
    rows = []
    for path, fieldnames, file_rows in inputs:
        require_columns(path, fieldnames, ["alpha", "seed", "final_kl"])
        rows.extend(r for r in live_rows(file_rows) if r["final_kl"] != "")
    if not rows:
        raise RenderError("no successful runs to draw")
    alphas = _group_order([r["alpha"] for r in rows])
    stats = [_box_stats(f"{float(a):g}",
                        [float(r["final_kl"]) for r in rows
                         if r["alpha"] == a]) for a in alphas]
    fig, ax = plt.subplots(figsize=(1.1 + 1.05 * len(stats), 4.0))
    ax.bxp(stats, showfliers=False)
    ax.set_xlabel("Dirichlet alpha")
    ax.set_ylabel("final KL (nats)")
    ax.set_title("base-distribution sweep, 25/50/75 percentiles")
    fig.tight_layout()
    return fig


def _fig_variance_bars(inputs):
    """Relative deviation of the objective estimator per sample count."""
    rows = []
    for path, fieldnames, file_rows in inputs:
        require_columns(path, fieldnames,
                        ["s", "repetitions", "mean", "std", "ratio"])
        rows.extend(file_rows)
    labels = [f"S={r['s']}" for r in rows]
    ratios = [float(r["ratio"]) for r in rows]
    fig, ax = plt.subplots(figsize=(1.4 + 0.9 * len(rows), 3.8))
    ax.bar(range(len(rows)), ratios, color="#4878cf")
    ax.set_xticks(range(len(rows)), labels)
    ax.set_ylabel("std / |mean|")
    reps = rows[0]["repetitions"]
    ax.set_title(f"estimator spread over {reps} repetitions")
    for i, v in enumerate(ratios):
        ax.annotate(f"{v:.3g}", (i, v), ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    return fig


_FIGURES = {
    "objective-gap": _fig_objective_gap,
    "temp-heat": _fig_temp_heat,
    "algo-box": _fig_algo_box,
    "base-box": _fig_base_box,
    "variance-bars": _fig_variance_bars,
}


# ---------------------------------------------------------------------------
# entry points


def _metadata(out_path):
    # strip anything clock-dependent so identical inputs give identical bytes
    suffix = Path(out_path).suffix.lower()
    if suffix == ".png":
        return {"Software": "mdnf-plots"}
    if suffix == ".svg":
        return {"Date": None}
    if suffix == ".pdf":
        return {"CreationDate": None}
    return None


def render(csv_paths, kind: str, out_path) -> str:
    """Draw one figure of the named kind from the given CSVs."""
    if kind not in FIGURE_KINDS:
        raise RenderError(f"unknown figure kind '{kind}' "
                          f"(have: {', '.join(FIGURE_KINDS)})")
    if not csv_paths:
        raise RenderError("at least one CSV is required")
    inputs = []
    for path in csv_paths:
        fieldnames, rows = read_rows(path)
        inputs.append((str(path), fieldnames, rows))
    fig = _FIGURES[kind](inputs)
    try:
        fig.savefig(out_path, dpi=120, metadata=_metadata(out_path))
    finally:
        plt.close(fig)
    return str(out_path)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mdnf-plots",
        description="render experiment CSVs as figure-style charts")
    parser.add_argument("csvs", nargs="+", metavar="CSV")
    parser.add_argument("--kind", required=True, choices=FIGURE_KINDS)
    parser.add_argument("--out", required=True, metavar="IMAGE")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        render(args.csvs, args.kind, args.out)
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
