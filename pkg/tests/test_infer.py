"""Training loops: schedules, the ELBO estimator, and the four algorithms."""

import math

import numpy as np
import pytest

from mdnf import diffcore as dc
from mdnf.dists import (CategoricalParams, DeltaBase, SeededRng,
                        categorical_entropy, gs_log_density)
from mdnf.infer import (Adam, AnnealSchedule, BnTarget, FitConfig, RmsProp,
                        anneal, build_mixture, elbo_estimate, fit_bvi,
                        fit_bvif, fit_gs, fit_vif, gs_discretized_elbo,
                        gs_log_density_node)
from mdnf.mixture import FlowMixture
from mdnf.models import bn_exact_posterior, load_bn


def tiny_target(evidence):
    return BnTarget(load_bn("tiny"), evidence)


def atom_mixture(rho, atoms, k_dims):
    """Point-mass components parked at explicit configurations."""
    from mdnf.flows import DiscreteFlow, FlowStack
    comps, bases = [], []
    for atom in atoms:
        comp, row = [], []
        for d, k in enumerate(k_dims):
            logits = np.zeros(k)
            logits[atom[d]] = 2.0
            comp.append(FlowStack([DiscreteFlow("shift_only", k,
                                                shift_logits=logits)]))
            row.append(DeltaBase(0, k))
        comps.append(comp)
        bases.append(row)
    return FlowMixture(rho, comps, bases)


class TestAnnealSchedule:
    def test_iteration_zero_returns_tau0(self):
        assert anneal(AnnealSchedule(10.0, 0.01), 0) == 10.0

    def test_zero_gamma_is_constant(self):
        s = AnnealSchedule(2.5, 0.0)
        assert anneal(s, 10 ** 6) == 2.5

    def test_decay_value(self):
        # tau0 * exp(-gamma t) at tau0=10, gamma=0.01, t=100 is 10/e
        got = anneal(AnnealSchedule(10.0, 0.01), 100)
        assert got == pytest.approx(10.0 / math.e, rel=1e-12)

    def test_default_is_constant_one(self):
        s = AnnealSchedule()
        assert (s.tau0, s.gamma) == (1.0, 0.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            AnnealSchedule(0.0, 0.1)
        with pytest.raises(ValueError):
            AnnealSchedule(1.0, -0.1)
        with pytest.raises(ValueError):
            anneal(AnnealSchedule(), -1)


class TestFitConfig:
    def test_unknown_algorithm(self):
        with pytest.raises(ValueError, match="algorithm"):
            FitConfig(algorithm="vi")

    def test_positivity_checks(self):
        for kw in ({"b": 0}, {"s": 0}, {"iterations": 0},
                   {"lr": 0.0}, {"tau_p": 0.0}):
            with pytest.raises(ValueError):
                FitConfig(**kw)

    def test_algorithm_gate(self):
        cfg = FitConfig(algorithm="gs")
        with pytest.raises(ValueError, match="algorithm"):
            fit_vif(tiny_target({"A": 0}), cfg)


class TestOptimizers:
    def test_rmsprop_first_step_magnitude(self):
        # ascent step; fresh accumulator holds avg = 0.1 g^2, so the first
        # update is close to lr * sign(g) / sqrt(0.1) per coordinate
        opt = RmsProp(lr=0.01)
        g = np.array([4.0, -2.0])
        new = opt.step("k", np.zeros(2), g)
        want = 0.01 * g / (np.sqrt(0.1 * g ** 2) + 1e-8)
        np.testing.assert_allclose(new, want, rtol=1e-12)

    def test_rmsprop_state_is_per_key(self):
        opt = RmsProp(lr=0.01)
        a1 = opt.step("a", np.zeros(1), np.array([1.0]))
        b1 = opt.step("b", np.zeros(1), np.array([1.0]))
        np.testing.assert_array_equal(a1, b1)

    def test_adam_bias_correction_first_step(self):
        # first Adam step equals lr * sign(g) regardless of magnitude
        opt = Adam(lr=0.003)
        new = opt.step("k", np.zeros(3), np.array([5.0, -0.2, 1e-4]))
        np.testing.assert_allclose(new, [0.003, -0.003, 0.003], rtol=1e-3)


class TestElboEstimate:
    def test_stratified_delta_value_is_exact(self):
        # 3 atoms on config 0 and 1 on config 1 against the A=0 slice of the
        # tiny network: value must equal the hand-built mixture expectation
        target = tiny_target({"A": 0})
        m = atom_mixture([0.25] * 4, [(0,), (0,), (0,), (1,)], [2])
        got = float(elbo_estimate(m, target, s=4, rng=SeededRng(0)).value)
        want = 0.75 * (math.log(0.7 * 0.8) - math.log(0.75)) \
            + 0.25 * (math.log(0.7 * 0.2) - math.log(0.25))
        assert got == pytest.approx(want, rel=1e-12)

    def test_stratified_repeat_calls_identical(self):
        target = tiny_target({"A": 0})
        m = atom_mixture([0.2] * 5, [(0,)] * 4 + [(1,)], [2])
        vals = [float(elbo_estimate(m, target, s=5, rng=SeededRng(seed)).value)
                for seed in range(5)]
        assert len(set(vals)) == 1

    def test_exact_grid_allocation_recovers_log_evidence(self):
        # 4 of 5 atoms on A=0: q equals the posterior (0.8, 0.2) exactly, so
        # the stratified estimate equals log evidence with zero gap
        target = tiny_target({"A": 0})
        m = atom_mixture([0.2] * 5, [(0,)] * 4 + [(1,)], [2])
        got = float(elbo_estimate(m, target, s=5, rng=SeededRng(1)).value)
        assert got == pytest.approx(math.log(0.7), rel=1e-12)

    def test_single_atom_is_joint_at_atom(self):
        target = tiny_target({"A": 0})
        m = atom_mixture([1.0], [(1,)], [2])
        got = float(elbo_estimate(m, target, s=1, rng=SeededRng(3)).value)
        assert got == pytest.approx(math.log(0.7 * 0.2), rel=1e-12)

    def test_unbiased_over_categorical_bases(self):
        # full-support mixture: single-sample estimates must average to the
        # enumerated ELBO within Monte Carlo noise
        target = tiny_target({"B": 1})
        from mdnf.flows import DiscreteFlow, FlowStack
        comps = [[FlowStack([DiscreteFlow("shift_only", 2,
                                          shift_logits=np.array([1.5, 0.0]))])],
                 [FlowStack([DiscreteFlow("shift_only", 2,
                                          shift_logits=np.array([0.0, 1.5]))])]]
        bases = [[CategoricalParams([0.7, 0.3])], [CategoricalParams([0.4, 0.6])]]
        m = FlowMixture([0.5, 0.5], comps, bases)

        q = m.q_table().ravel()
        lp = np.array([math.log(0.7 * 0.2), math.log(0.3 * 0.9)])
        true = float(q @ (lp - np.log(q)))

        draws = np.array([float(elbo_estimate(m, target, s=1,
                                              rng=SeededRng(i)).value)
                          for i in range(400)])
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        assert abs(draws.mean() - true) < 3.0 * se + 1e-12

    def test_sample_count_validation(self):
        m = atom_mixture([1.0], [(0,)], [2])
        with pytest.raises(ValueError):
            elbo_estimate(m, tiny_target({"A": 0}), s=0, rng=SeededRng(0))


class TestVifTraining:
    def test_tiny_network_reaches_grid_floor(self):
        # B=4 on a 2-state posterior (0.8, 0.2): the best quarter-grid split
        # is (0.75, 0.25), and 2000 iterations find it
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="vif", b=4, iterations=2000, seed=0)
        report = fit_vif(target, cfg)
        assert report.records[-1].kl_exact < 0.01

    def test_internal_objective_equals_external_elbo(self):
        # stratified point-mass training scores the mixture exactly, so the
        # internal value and the enumerated ELBO agree at every checkpoint
        target = tiny_target({"B": 1})
        cfg = FitConfig(algorithm="vif", b=4, iterations=301, seed=1)
        report = fit_vif(target, cfg)
        checked = 0
        for r in report.records:
            if r.external_elbo is not None:
                assert r.objective == pytest.approx(r.external_elbo, abs=1e-9)
                checked += 1
        assert checked == 4  # t = 0, 100, 200, 300

    def test_elbo_never_exceeds_log_evidence(self):
        target = tiny_target({"B": 1})
        cfg = FitConfig(algorithm="vif", b=4, iterations=500, seed=2)
        report = fit_vif(target, cfg)
        for r in report.records:
            if r.external_elbo is not None:
                assert r.external_elbo <= target.log_evidence + 1e-9

    def test_bitwise_reproducible(self):
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="vif", b=4, iterations=300, seed=7)
        r1, r2 = fit_vif(target, cfg), fit_vif(target, cfg)
        assert r1.trajectory() == r2.trajectory()
        for m1, m2 in zip(r1.mixture.packed_shift_logits(),
                          r2.mixture.packed_shift_logits()):
            np.testing.assert_array_equal(m1, m2)

    def test_temperature_robustness(self):
        # forward samples are argmax-hard, so sweeping tau0 across two orders
        # of magnitude must land on the same plateau
        target = tiny_target({"B": 1})
        finals = []
        for tau0 in (1.0, 10.0, 100.0):
            cfg = FitConfig(algorithm="vif", b=4, iterations=2000, seed=0,
                            schedule=AnnealSchedule(tau0, 0.0))
            finals.append(fit_vif(target, cfg).records[-1].kl_exact)
        assert max(finals) - min(finals) < 0.05
        assert max(finals) < 0.1

    def test_annealed_schedule_converges(self):
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="vif", b=4, iterations=2000, seed=0,
                        schedule=AnnealSchedule(10.0, 0.01))
        report = fit_vif(target, cfg)
        assert report.records[-1].kl_exact < 0.01

    def test_tau_column_follows_schedule(self):
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="vif", b=2, iterations=150, seed=0,
                        schedule=AnnealSchedule(10.0, 0.01))
        report = fit_vif(target, cfg)
        for r in report.records[:5]:
            assert r.tau == pytest.approx(10.0 * math.exp(-0.01 * r.iteration))

    def test_categorical_bases_use_monte_carlo(self):
        # non-point-mass bases cannot be stratified; the sampled path should
        # still improve the objective and stay finite
        target = tiny_target({"A": 0})
        bases = [[CategoricalParams([0.6, 0.4])], [CategoricalParams([0.3, 0.7])]]
        cfg = FitConfig(algorithm="vif", b=2, s=32, iterations=400, seed=0)
        report = fit_vif(target, cfg, bases=bases)
        assert len(report.records) == 400
        assert np.isfinite(report.records[-1].objective)
        assert report.records[-1].kl_exact < 1.0

    def test_divergent_objective_aborts(self):
        class BadTarget:
            cardinalities = [2]

            def log_joint_rows(self, xs):
                n = xs[0].value.shape[0]
                return dc.const(np.full(n, np.inf))

        cfg = FitConfig(algorithm="vif", b=2, iterations=10, seed=0)
        with pytest.raises(RuntimeError, match="diverged"):
            fit_vif(BadTarget(), cfg)

    def test_clean_run_reports_zero_clips(self):
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="vif", b=4, iterations=200, seed=0)
        assert fit_vif(target, cfg).nonfinite_clips == 0

    def test_checkpoint_spacing(self):
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="vif", b=2, iterations=250, seed=0)
        report = fit_vif(target, cfg)
        with_ext = [r.iteration for r in report.records
                    if r.external_elbo is not None]
        assert with_ext == [0, 100, 200, 249]
        assert [t for t, _ in report.snapshots] == with_ext
        assert len(report.records) == 250

    def test_trajectory_drops_wallclock(self):
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="vif", b=2, iterations=5, seed=0)
        report = fit_vif(target, cfg)
        assert report.trajectory() == [(r.iteration, r.objective, r.tau)
                                       for r in report.records]
        assert all(r.wall_ms >= 0.0 for r in report.records)


class TestBvifTraining:
    def test_single_component_matches_vif(self):
        target = tiny_target({"A": 0})
        kw = dict(b=1, iterations=200, seed=5)
        rv = fit_vif(target, FitConfig(algorithm="vif", **kw))
        rb = fit_bvif(target, FitConfig(algorithm="bvif", **kw))
        assert rb.trajectory() == rv.trajectory()

    def test_free_weights_beat_the_uniform_grid(self):
        # boosting owns its mixture weights, so it can pass the 1/B grid
        # floor that uniform-weight training is stuck with
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="bvif", b=4, iterations=2000, seed=3)
        report = fit_bvif(target, cfg)
        assert report.records[-1].kl_exact < 1e-3
        assert report.diagnostics["kl_exact"] < 1e-3

    def test_weights_stay_simplex(self):
        target = tiny_target({"B": 1})
        cfg = FitConfig(algorithm="bvif", b=3, iterations=300, seed=1)
        m = fit_bvif(target, cfg).mixture
        assert m.rho.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(m.rho > 0)
        assert m.n_components == 3

    def test_stage_records_cover_all_iterations(self):
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="bvif", b=4, iterations=400, seed=0)
        report = fit_bvif(target, cfg)
        assert [r.iteration for r in report.records] == list(range(400))


class TestBviTraining:
    def test_weights_over_full_atom_cover(self):
        # two atoms cover the whole 2-state space; weight-only training then
        # matches the posterior nearly exactly
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="bvi", b=2, iterations=1500, lr=0.05, seed=0)
        report = fit_bvi(target, cfg)
        assert report.records[-1].kl_exact < 1e-3

    def test_single_atom_scores_its_joint(self):
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="bvi", b=1, iterations=50, seed=2)
        report = fit_bvi(target, cfg)
        q = report.mixture.q_table().ravel()
        atom = int(np.argmax(q))
        assert q[atom] == pytest.approx(1.0)
        want = float(np.log(target.posterior_table.ravel()[atom]))
        assert report.diagnostics["kl_exact"] == pytest.approx(-want, rel=1e-9)

    def test_atoms_fixed_across_learning_rates(self):
        # the support comes from the seeded atom draw, not from training, so
        # changing the learning rate only moves the weights
        target = tiny_target({"B": 1})
        runs = [fit_bvi(target, FitConfig(algorithm="bvi", b=2, lr=lr,
                                          iterations=200, seed=9))
                for lr in (0.01, 0.2)]
        supports = [r.mixture.q_table().ravel() > 1e-12 for r in runs]
        np.testing.assert_array_equal(supports[0], supports[1])


class TestGsBaselines:
    def test_density_node_matches_scalar_reference(self):
        rng = np.random.default_rng(11)
        for k in (2, 4):
            p = rng.random(k) + 0.1
            p /= p.sum()
            y = rng.dirichlet(np.ones(k), size=3)
            node = gs_log_density_node(dc.const(np.log(p)), dc.const(y),
                                       tau=0.7, k=k)
            for i in range(3):
                want = gs_log_density(y[i], CategoricalParams(p), 0.7)
                assert node.value[i] == pytest.approx(want, rel=1e-10)

    def test_gs_fits_tiny_network(self):
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="gs", s=50, iterations=1500, lr=0.05, seed=0)
        report = fit_gs(target, cfg)
        assert report.records[-1].kl_exact < 0.1

    def test_st_gs_fits_tiny_network(self):
        target = tiny_target({"A": 0})
        cfg = FitConfig(algorithm="st_gs", s=50, iterations=1500, lr=0.05,
                        seed=0)
        report = fit_gs(target, cfg)
        assert report.records[-1].kl_exact < 0.1

    def test_externals_use_closed_form_marginals(self):
        # the reported KL must come from softmax(logits), not from samples
        target = tiny_target({"B": 1})
        cfg = FitConfig(algorithm="st_gs", s=20, iterations=120, lr=0.05,
                        seed=4)
        report = fit_gs(target, cfg)
        row = report.gs_logits[0]
        p = np.exp(row - row.max())
        p /= p.sum()
        post = target.posterior_table.ravel()
        want = float(np.sum(p * (np.log(p) - np.log(post))))
        assert report.diagnostics["kl_exact"] == pytest.approx(want, rel=1e-9)

    def test_gs_requires_factorized_target(self):
        class Rows:
            cardinalities = [2]

            def log_joint_rows(self, xs):
                return dc.const(np.zeros(xs[0].value.shape[0]))

        cfg = FitConfig(algorithm="gs", iterations=5)
        with pytest.raises(ValueError, match="factorized"):
            fit_gs(Rows(), cfg)

    def test_wrong_algorithm_rejected(self):
        cfg = FitConfig(algorithm="vif")
        with pytest.raises(ValueError):
            fit_gs(tiny_target({"A": 0}), cfg)


class TestDiscretizedElbo:
    def test_deterministic_given_rng(self):
        target = tiny_target({"B": 1})
        logits = [np.array([0.3, -0.2])]
        a = gs_discretized_elbo(logits, target, s=500, rng=SeededRng(8))
        b = gs_discretized_elbo(logits, target, s=500, rng=SeededRng(8))
        assert a == b

    def test_matches_enumeration_for_peaked_logits(self):
        # near-deterministic sampler: the estimate collapses to the joint at
        # the argmax and the jackknife error goes to zero
        target = tiny_target({"A": 0})
        logits = [np.array([50.0, -50.0])]
        est, se = gs_discretized_elbo(logits, target, s=2000,
                                      rng=SeededRng(1))
        assert est == pytest.approx(math.log(0.7 * 0.8), rel=1e-9)
        assert se == pytest.approx(0.0, abs=1e-9)

    def test_estimate_tracks_true_elbo(self):
        target = tiny_target({"B": 1})
        logits = [np.array([0.0, 0.7])]
        p = np.exp(logits[0]) / np.exp(logits[0]).sum()
        lp = np.array([math.log(0.7 * 0.2), math.log(0.3 * 0.9)])
        true = float(p @ lp + categorical_entropy(CategoricalParams(p)))
        est, se = gs_discretized_elbo(logits, target, s=4000,
                                      rng=SeededRng(2))
        assert abs(est - true) < 4.0 * se

    def test_sample_floor(self):
        with pytest.raises(ValueError):
            gs_discretized_elbo([np.zeros(2)], tiny_target({"A": 0}), s=1)
