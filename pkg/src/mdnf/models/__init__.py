"""Target models: discrete Bayesian networks and a conjugate Gaussian mixture."""

from .bayesnet import (BayesNet, BayesNode, bn_exact_posterior,
                       bn_joint_log_prob, bundled_networks,
                       latent_cardinalities, latent_nodes, load_bn, parse_bn,
                       validate_evidence)
from .gmm import (GmmState, gmm_elbo, gmm_init, gmm_log_joint,
                  gmm_log_joint_table, gmm_m_step, gmm_responsibilities,
                  simulated_clusters)

__all__ = [
    "BayesNet",
    "BayesNode",
    "parse_bn",
    "load_bn",
    "bundled_networks",
    "validate_evidence",
    "latent_nodes",
    "latent_cardinalities",
    "bn_joint_log_prob",
    "bn_exact_posterior",
    "GmmState",
    "gmm_init",
    "gmm_m_step",
    "gmm_responsibilities",
    "gmm_log_joint",
    "gmm_log_joint_table",
    "gmm_elbo",
    "simulated_clusters",
]
