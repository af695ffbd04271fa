"""Mixtures of discrete normalizing flows for categorical inference.

Modular permutation flows push simple base distributions onto arbitrary
categorical supports; mixtures of them train by stochastic gradient on a
relaxed ELBO and evaluate exactly wherever the joint table is enumerable.
Headline entry points are re-exported here; studies live in
mdnf.experiments and the shell interface in mdnf.cli.
"""

from .dists import CategoricalParams, DeltaBase, SeededRng
from .evaluate import elbo_variance_study, kl_to_exact, mdnf_q_table
from .flows import DiscreteFlow, FlowStack, build_sorting_network
from .infer import (AnnealSchedule, BnTarget, FitConfig, FitReport,
                    GmmTarget, build_mixture, elbo_estimate, fit, fit_bvi,
                    fit_bvif, fit_gs, fit_vif)
from .mixture import (FlowMixture, constructive_fit, load_mixture, log_prob,
                      sample_batch_masked, sample_forward, save_mixture)
from .models import bundled_networks, load_bn, parse_bn

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule", "BnTarget", "CategoricalParams", "DeltaBase",
    "DiscreteFlow", "FitConfig", "FitReport", "FlowMixture", "FlowStack",
    "GmmTarget", "SeededRng", "build_mixture", "build_sorting_network",
    "bundled_networks", "constructive_fit", "elbo_estimate",
    "elbo_variance_study", "fit", "fit_bvi", "fit_bvif", "fit_gs", "fit_vif",
    "kl_to_exact", "load_bn", "load_mixture", "log_prob", "mdnf_q_table",
    "parse_bn", "sample_batch_masked", "sample_forward", "save_mixture",
]
