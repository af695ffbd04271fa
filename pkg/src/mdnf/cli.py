"""Command-line entry point: train, sweep, and evaluate from the shell.

Subcommands map one-to-one onto the experiment helpers, and every run can
write a CSV whose schema the plotting scripts consume.  Exit codes: 0 on
success, 1 for usage problems (bad flags, malformed evidence, missing
files), 2 when the run itself fails.  Values from a JSON --config file are
overridden by flags given explicitly on the command line.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .dists import SeededRng
from .evaluate import elbo_variance_study, kl_to_exact, mdnf_q_table
from .experiments import (run_algo_comparison, run_base_sweep,
                          run_gmm_comparison, run_permutation_recovery,
                          run_temp_grid)
from .infer import AnnealSchedule, BnTarget, FitConfig, fit
from .mixture import load_mixture, save_mixture
from .models import load_bn, validate_evidence

__all__ = ["main", "write_csv", "FIT_FIELDS"]

FIT_FIELDS = ["iteration", "internal_objective", "tau_t", "external_elbo",
              "kl_exact", "wallclock_ms"]
TEMP_FIELDS = ["method", "tau", "tau_p", "seed", "final_elbo", "final_kl",
               "error"]
ALGO_FIELDS = ["algorithm", "b", "seed", "final_elbo", "final_kl", "error"]
SUMMARY_FIELDS = ["algorithm", "b", "elbo_p25", "elbo_p50", "elbo_p75",
                  "kl_p25", "kl_p50", "kl_p75"]
BASE_FIELDS = ["alpha", "seed", "final_elbo", "final_kl", "error"]
RECOVERY_FIELDS = ["kind", "k", "layers", "run", "success", "iterations"]
GMM_FIELDS = ["algorithm", "b", "seed", "final_elbo", "reference_elbo",
              "agreement", "error"]
VARIANCE_FIELDS = ["s", "repetitions", "mean", "std", "ratio"]
EVAL_FIELDS = ["elbo", "kl", "log_evidence"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the contract reserves 2 for
    # runtime failures, so route usage problems through UsageError instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# CSV emission


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, fieldnames, rows) -> None:
    """One header plus one line per row dict; None cells write as empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fieldnames)
        for row in rows:
            w.writerow([_cell(row.get(f)) for f in fieldnames])


def _fit_rows(report):
    return [{"iteration": r.iteration, "internal_objective": r.objective,
             "tau_t": r.tau, "external_elbo": r.external_elbo,
             "kl_exact": r.kl_exact, "wallclock_ms": r.wall_ms}
            for r in report.records]


# ---------------------------------------------------------------------------
# option handling


_COMMON = dict(net=None, evidence=None, algo="vif", flows=1, samples=100,
               tau=1.0, gamma=0.0, tau_p=1.0, iters=10000, lr=0.01, seed=0,
               out=None, workers=None)

_EXTRAS = {
    "fit-bn": dict(save_mixture=None),
    "sweep-temp": dict(method="mdnf", taus="1,10,100", tau_ps="1.0",
                       seeds="5", flows=40),
    "algo-compare": dict(flows_grid="1,10,40", algos="vif,bvif,bvi",
                         seeds="10", summary_out=None),
    "base-sweep": dict(alphas="0.01,1,100", seeds="5", flows=40),
    "partial-flows": dict(k=5, kind="partial", layers=None, runs=40,
                          max_iters=5000, lr=0.1),
    "fit-gmm": dict(data=None, clusters=3, flows_grid="10", algos="vif",
                    seeds="3", em_steps=50, inner_iters=200, samples=None),
    "variance": dict(reps=100, samples_list="1", mixture=None, flows=40),
    "eval": dict(mixture=None),
}


def _float_list(value, flag):
    try:
        if isinstance(value, str):
            return [float(v) for v in value.split(",") if v.strip()]
        return [float(v) for v in value]
    except (TypeError, ValueError):
        raise UsageError(f"{flag} expects comma-separated numbers, "
                         f"got {value!r}")


def _seed_spec(value, flag="--seeds"):
    """An integer is a count of seeds 0..n-1; a comma list picks them."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, str) and "," not in value:
        try:
            return int(value)
        except ValueError:
            raise UsageError(f"{flag} expects a count or comma list, "
                             f"got {value!r}")
    return [int(v) for v in _float_list(value, flag)]


def _algo_names(value):
    names = value.split(",") if isinstance(value, str) else list(value)
    out = []
    for name in names:
        name = name.strip().replace("-", "_")
        if name not in ("vif", "bvif", "bvi", "gs", "st_gs"):
            raise UsageError(f"unknown algorithm '{name}'")
        out.append(name)
    if not out:
        raise UsageError("empty algorithm list")
    return out


def _evidence_dict(value) -> dict:
    if value is None:
        return {}
    if isinstance(value, dict):
        return {str(k): int(v) for k, v in value.items()}
    out = {}
    for item in value:
        name, sep, idx = str(item).partition("=")
        if not sep or not name:
            raise UsageError(f"evidence must look like NODE=INDEX, "
                             f"got '{item}'")
        try:
            out[name] = int(idx)
        except ValueError:
            raise UsageError(f"evidence index must be an integer, "
                             f"got '{item}'")
    return out


def _resolve(args) -> dict:
    """Merge precedence: explicit flag > config file entry > default."""
    table = vars(args)
    cfg = {}
    if table.get("config"):
        try:
            with open(table["config"]) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read --config: {exc}")
        if not isinstance(cfg, dict):
            raise UsageError("--config must hold a JSON object")
    defaults = {**_COMMON, **_EXTRAS[table["command"]]}
    opts = {"command": table["command"]}
    for key, default in defaults.items():
        flag = table.get(key)
        opts[key] = flag if flag is not None else cfg.get(key, default)
    opts["evidence"] = _evidence_dict(opts["evidence"])
    return opts


def _load_net(text):
    """Resolve --net: an existing file path first, then a bundled name."""
    if text is None:
        raise UsageError("--net is required for this subcommand")
    if os.path.exists(text):
        return load_bn(text)
    name = str(text)
    if name.endswith(".bn"):
        name = name[:-3]
    if "/" in name or "\\" in name:
        raise UsageError(f"network file not found: {text}")
    try:
        return load_bn(name)
    except ValueError as exc:
        raise UsageError(str(exc))


def _bn_inputs(opts):
    net = _load_net(opts["net"])
    try:
        ev = validate_evidence(net, opts["evidence"])
    except ValueError as exc:
        raise UsageError(str(exc))
    return net, ev


def _fit_config(opts, algorithm=None, iterations=None):
    try:
        return FitConfig(algorithm=algorithm or _algo_names(opts["algo"])[0],
                         b=int(opts["flows"]),
                         s=int(opts["samples"]),
                         iterations=int(iterations or opts["iters"]),
                         lr=float(opts["lr"]), seed=int(opts["seed"]),
                         schedule=AnnealSchedule(float(opts["tau"]),
                                                 float(opts["gamma"])),
                         tau_p=float(opts["tau_p"]))
    except ValueError as exc:
        raise UsageError(str(exc))


def _workers(opts):
    return None if opts["workers"] is None else int(opts["workers"])


# ---------------------------------------------------------------------------
# subcommands


def _cmd_fit_bn(opts) -> int:
    net, ev = _bn_inputs(opts)
    cfg = _fit_config(opts)
    if opts["save_mixture"] and cfg.algorithm in ("gs", "st_gs"):
        raise UsageError("--save-mixture needs a flow algorithm, "
                         "not a relaxation baseline")
    report = fit(BnTarget(net, ev), cfg)
    if opts["out"]:
        write_csv(opts["out"], FIT_FIELDS, _fit_rows(report))
    if opts["save_mixture"]:
        save_mixture(report.mixture, opts["save_mixture"])
    kl = report.diagnostics.get("kl_exact")
    tail = "" if kl is None else f"  kl {kl:.6f}"
    print(f"fit-bn {cfg.algorithm} B={cfg.b}: "
          f"objective {report.diagnostics['final_objective']:.6f}{tail}")
    return 0


def _cmd_sweep_temp(opts) -> int:
    net, ev = _bn_inputs(opts)
    method = str(opts["method"]).replace("-", "_")
    if method not in ("mdnf", "gs", "st_gs"):
        raise UsageError(f"unknown sweep method '{opts['method']}'")
    rows = run_temp_grid(net, ev, method,
                         taus=_float_list(opts["taus"], "--taus"),
                         tau_ps=_float_list(opts["tau_ps"], "--tau-ps"),
                         seeds=_seed_spec(opts["seeds"]),
                         b=int(opts["flows"]), s=int(opts["samples"]),
                         iterations=int(opts["iters"]),
                         lr=float(opts["lr"]), gamma=float(opts["gamma"]),
                         master_seed=int(opts["seed"]),
                         workers=_workers(opts))
    if opts["out"]:
        write_csv(opts["out"], TEMP_FIELDS, rows)
    failed = sum(1 for r in rows if r["error"] is not None)
    print(f"sweep-temp {method}: {len(rows)} cells, {failed} failed")
    return 0


def _cmd_algo_compare(opts) -> int:
    net, ev = _bn_inputs(opts)
    rows, summary = run_algo_comparison(
        net, ev,
        b_list=[int(b) for b in _float_list(opts["flows_grid"],
                                            "--flows-grid")],
        algorithms=_algo_names(opts["algos"]),
        seeds=_seed_spec(opts["seeds"]),
        s=int(opts["samples"]), iterations=int(opts["iters"]),
        lr=float(opts["lr"]), tau0=float(opts["tau"]),
        gamma=float(opts["gamma"]), tau_p=float(opts["tau_p"]),
        master_seed=int(opts["seed"]), workers=_workers(opts))
    if opts["out"]:
        write_csv(opts["out"], ALGO_FIELDS, rows)
    if opts["summary_out"]:
        write_csv(opts["summary_out"], SUMMARY_FIELDS, summary)
    print(f"algo-compare: {len(rows)} runs over "
          f"{len(summary)} (algorithm, B) cells")
    return 0


def _cmd_base_sweep(opts) -> int:
    net, ev = _bn_inputs(opts)
    rows = run_base_sweep(net, ev,
                          alphas=_float_list(opts["alphas"], "--alphas"),
                          seeds=_seed_spec(opts["seeds"]),
                          b=int(opts["flows"]), s=int(opts["samples"]),
                          iterations=int(opts["iters"]),
                          lr=float(opts["lr"]), tau0=float(opts["tau"]),
                          gamma=float(opts["gamma"]),
                          master_seed=int(opts["seed"]),
                          workers=_workers(opts))
    if opts["out"]:
        write_csv(opts["out"], BASE_FIELDS, rows)
    print(f"base-sweep: {len(rows)} cells")
    return 0


def _cmd_partial_flows(opts) -> int:
    kind = str(opts["kind"]).replace("-", "_")
    layers = None if opts["layers"] is None else int(opts["layers"])
    try:
        result = run_permutation_recovery(
            k=int(opts["k"]), flow_kind=kind, layers=layers,
            runs=int(opts["runs"]), max_iters=int(opts["max_iters"]),
            rng=SeededRng(int(opts["seed"])), step_size=float(opts["lr"]),
            tau=float(opts["tau"]), workers=_workers(opts))
    except ValueError as exc:
        raise UsageError(str(exc))
    if opts["out"]:
        write_csv(opts["out"], RECOVERY_FIELDS, result.rows)
    median = "-" if result.median_iterations is None \
        else f"{result.median_iterations:g}"
    print(f"partial-flows {kind} K={opts['k']}: "
          f"success {result.success_fraction:.2f}, median iters {median}")
    return 0


def _cmd_fit_gmm(opts) -> int:
    dataset = None
    if opts["data"]:
        try:
            dataset = np.loadtxt(opts["data"], delimiter=",", ndmin=2)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read --data: {exc}")
    samples = None if opts["samples"] is None else int(opts["samples"])
    result = run_gmm_comparison(
        dataset, k=int(opts["clusters"]),
        b_list=[int(b) for b in _float_list(opts["flows_grid"],
                                            "--flows-grid")],
        algorithms=_algo_names(opts["algos"]),
        seeds=_seed_spec(opts["seeds"]), em_steps=int(opts["em_steps"]),
        inner_iters=int(opts["inner_iters"]), lr=float(opts["lr"]),
        s=samples, tau0=float(opts["tau"]), gamma=float(opts["gamma"]),
        master_seed=int(opts["seed"]), workers=_workers(opts))
    if opts["out"]:
        write_csv(opts["out"], GMM_FIELDS, result.rows)
    failed = sum(1 for r in result.rows if r["error"] is not None)
    print(f"fit-gmm: {len(result.rows)} rows, {failed} failed")
    return 0


def _cmd_variance(opts) -> int:
    net, ev = _bn_inputs(opts)
    target = BnTarget(net, ev)
    if opts["mixture"]:
        try:
            m = load_mixture(opts["mixture"])
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read --mixture: {exc}")
    else:
        cfg = _fit_config(opts)
        if cfg.algorithm in ("gs", "st_gs"):
            raise UsageError("variance study needs a flow algorithm")
        m = fit(target, cfg).mixture
    rows = []
    for s in _float_list(opts["samples_list"], "--samples-list"):
        study = elbo_variance_study(m, target, repetitions=int(opts["reps"]),
                                    s=int(s),
                                    rng=SeededRng(int(opts["seed"]))
                                    .derive(f"variance/s={int(s)}"))
        rows.append({"s": int(s), "repetitions": int(opts["reps"]),
                     "mean": study.mean, "std": study.std,
                     "ratio": study.ratio})
    if opts["out"]:
        write_csv(opts["out"], VARIANCE_FIELDS, rows)
    for row in rows:
        print(f"variance S={row['s']}: mean {row['mean']:.6f} "
              f"std {row['std']:.6g} ratio {row['ratio']:.6g}")
    return 0


def _cmd_eval(opts) -> int:
    net, ev = _bn_inputs(opts)
    if not opts["mixture"]:
        raise UsageError("--mixture is required for eval")
    try:
        m = load_mixture(opts["mixture"])
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read --mixture: {exc}")
    target = BnTarget(net, ev)
    if target.posterior_table is None:
        raise UsageError("eval needs an enumerable network")
    result = kl_to_exact(mdnf_q_table(m), target.posterior_table)
    elbo = target.log_evidence - result.nats
    rows = [{"elbo": elbo, "kl": result.nats,
             "log_evidence": target.log_evidence}]
    if opts["out"]:
        write_csv(opts["out"], EVAL_FIELDS, rows)
    print(f"eval: elbo {elbo:.6f}  kl {result.nats:.6f}  "
          f"log-evidence {target.log_evidence:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--net", help="network file path or bundled name")
    p.add_argument("--evidence", action="append", metavar="NODE=INDEX",
                   help="observed node, repeatable")
    p.add_argument("--algo",
                   choices=["vif", "bvif", "bvi", "gs", "st-gs"])
    p.add_argument("--flows", type=int, metavar="B")
    p.add_argument("--samples", type=int, metavar="S")
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tau-p", dest="tau_p", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="FILE")
    p.add_argument("--config", metavar="FILE",
                   help="JSON defaults, overridden by explicit flags")
    p.add_argument("--workers", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="mdnf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    handlers = {
        "fit-bn": (_cmd_fit_bn, "train one approximation, write run CSV"),
        "sweep-temp": (_cmd_sweep_temp, "temperature grid study"),
        "algo-compare": (_cmd_algo_compare, "algorithm and B comparison"),
        "base-sweep": (_cmd_base_sweep, "Dirichlet base-distribution sweep"),
        "partial-flows": (_cmd_partial_flows, "permutation recovery study"),
        "fit-gmm": (_cmd_fit_gmm, "variational EM with gradient E-steps"),
        "variance": (_cmd_variance, "objective estimator variance study"),
        "eval": (_cmd_eval, "score a saved mixture against the posterior"),
    }
    for name, (handler, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(handler=handler)

    by_name = sub.choices
    by_name["fit-bn"].add_argument("--save-mixture", metavar="FILE")
    st = by_name["sweep-temp"]
    st.add_argument("--method", choices=["mdnf", "gs", "st-gs"])
    st.add_argument("--taus", help="comma list of sampler temperatures")
    st.add_argument("--tau-ps", dest="tau_ps",
                    help="comma list of prior temperatures (gs only)")
    st.add_argument("--seeds", help="seed count or comma list")
    ac = by_name["algo-compare"]
    ac.add_argument("--flows-grid", dest="flows_grid",
                    help="comma list of component counts")
    ac.add_argument("--algos", help="comma list of algorithms")
    ac.add_argument("--seeds")
    ac.add_argument("--summary-out", dest="summary_out", metavar="FILE")
    bs = by_name["base-sweep"]
    bs.add_argument("--alphas", help="comma list of Dirichlet strengths")
    bs.add_argument("--seeds")
    pf = by_name["partial-flows"]
    pf.add_argument("--k", type=int)
    pf.add_argument("--kind", choices=["partial", "loc-scale"])
    pf.add_argument("--layers", type=int)
    pf.add_argument("--runs", type=int)
    pf.add_argument("--max-iters", dest="max_iters", type=int)
    fg = by_name["fit-gmm"]
    fg.add_argument("--data", metavar="FILE",
                    help="points CSV, one row per observation")
    fg.add_argument("--clusters", type=int)
    fg.add_argument("--flows-grid", dest="flows_grid")
    fg.add_argument("--algos")
    fg.add_argument("--seeds")
    fg.add_argument("--em-steps", dest="em_steps", type=int)
    fg.add_argument("--inner-iters", dest="inner_iters", type=int)
    va = by_name["variance"]
    va.add_argument("--reps", type=int)
    va.add_argument("--samples-list", dest="samples_list",
                    help="comma list of estimator sample counts")
    va.add_argument("--mixture", metavar="FILE",
                    help="score a saved mixture instead of training")
    by_name["eval"].add_argument("--mixture", metavar="FILE")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        opts = _resolve(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.handler(opts)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
