import numpy as np
import pytest
from scipy.stats import norm

from randmcp.contrasts import contrast_matrix
from randmcp.data import TrialDataset
from randmcp.dose_response import (
    CandidateModel,
    CandidateSet,
    DoseGrid,
    calibrate_emax,
    default_candidate_set,
    eval_model,
    inverse_logit,
)
from randmcp.inference import (
    DegenerateVarianceError,
    TestMethod,
    exact_randomization_pvalue,
    fit_residual_model,
    glm_statistics_batch,
    max_tail_probability,
    population_test,
    randomization_test,
    residual_statistics_batch,
    shape_matrix,
)
from randmcp.randomization import RandomizationSpec, enumerate_sequences, sample_sequence
from randmcp.rng import substream

GRID4 = DoseGrid(doses=(0.0, 10.0, 25.0, 100.0))
GRID2 = DoseGrid(doses=(0.0, 100.0))
LINEAR_ONLY = CandidateSet(models=(CandidateModel(shape="linear", name="linear"),))


def toy_dataset(arms, outcomes, grid, covariates=None, endpoint="binary"):
    n = len(arms)
    cov = np.empty((n, 0)) if covariates is None else np.asarray(covariates, dtype=float)
    return TrialDataset(arms=np.asarray(arms), outcomes=np.asarray(outcomes, dtype=float),
                        covariates=cov, grid=grid, endpoint=endpoint)


class TestResidualStatistic:
    def test_arm_index_residuals_give_most_increasing_contrast(self):
        # Hand-checkable case: residuals j +/- eps in arm j, two patients
        # per arm, so every arm variance is 2*eps^2/... = eps^2 and the
        # per-contrast value is c'(0,1,2,3)/eps; the maximum over the
        # candidate set is attained by the steepest increasing contrast.
        eps = 0.01
        arms = np.repeat([0, 1, 2, 3], 2)
        r = np.repeat([0.0, 1.0, 2.0, 3.0], 2) + np.tile([-eps, eps], 4)
        contrasts = contrast_matrix(default_candidate_set(), GRID4, arm_sizes=(2, 2, 2, 2))
        stats, t_matrix, _, diag = residual_statistics_batch(
            r, arms[None, :], 4, contrasts=contrasts
        )
        means = np.array([0.0, 1.0, 2.0, 3.0])
        expected = contrasts.vectors @ means / eps
        assert np.allclose(t_matrix[0], expected, rtol=1e-10)
        assert stats[0] == pytest.approx(expected.max())
        assert diag["invalid_rows"] == 0

    def test_within_arm_permutation_leaves_statistic(self):
        rng = np.random.default_rng(0)
        arms = np.repeat([0, 1, 2, 3], 5)
        r = rng.normal(size=20)
        contrasts = contrast_matrix(default_candidate_set(), GRID4, arm_sizes=(5, 5, 5, 5))
        base = residual_statistics_batch(r, arms[None, :], 4, contrasts=contrasts)[0][0]
        shuffled = r.copy()
        for j in range(4):
            idx = np.flatnonzero(arms == j)
            shuffled[idx] = shuffled[rng.permutation(idx)]
        again = residual_statistics_batch(shuffled, arms[None, :], 4, contrasts=contrasts)[0][0]
        assert again == pytest.approx(base, rel=1e-12)

    def test_identical_residuals_guarded_to_zero(self):
        arms = np.repeat([0, 1], 3)
        r = np.full(6, 0.25)
        contrasts = contrast_matrix(LINEAR_ONLY, GRID2, arm_sizes=(3, 3))
        stats, t_matrix, _, _ = residual_statistics_batch(r, arms[None, :], 2,
                                                          contrasts=contrasts)
        assert stats[0] == 0.0
        assert t_matrix[0, 0] == 0.0

    def test_zero_variance_with_signal_is_infinite(self):
        arms = np.array([1, 1, 0, 0])
        r = np.array([0.5, 0.5, -0.5, -0.5])
        contrasts = contrast_matrix(LINEAR_ONLY, GRID2, arm_sizes=(2, 2))
        stats, _, _, _ = residual_statistics_batch(r, arms[None, :], 2, contrasts=contrasts)
        assert stats[0] == np.inf

    def test_small_arm_flagged_invalid(self):
        arms = np.array([0, 1, 1, 1])
        r = np.array([0.1, -0.2, 0.3, 0.4])
        contrasts = contrast_matrix(LINEAR_ONLY, GRID2, arm_sizes=(2, 2))
        stats, _, _, diag = residual_statistics_batch(r, arms[None, :], 2,
                                                      contrasts=contrasts)
        assert np.isnan(stats[0])
        assert diag["invalid_rows"] == 1

    def test_affine_candidate_rescaling_leaves_statistic(self):
        # Contrasts are invariant to a + b*shape (b > 0), so the whole
        # statistic is too.
        rng = np.random.default_rng(1)
        arms = np.repeat([0, 1, 2, 3], 4)
        r = rng.normal(size=16)
        shifted = CandidateSet(models=(
            CandidateModel(shape="emax", theta0=2.0, theta1=5.0, theta2=10.0, name="emax"),
        ))
        plain = CandidateSet(models=(
            CandidateModel(shape="emax", theta2=10.0, name="emax"),
        ))
        c1 = contrast_matrix(plain, GRID4, arm_sizes=(4, 4, 4, 4))
        c2 = contrast_matrix(shifted, GRID4, arm_sizes=(4, 4, 4, 4))
        s1 = residual_statistics_batch(r, arms[None, :], 4, contrasts=c1)[0][0]
        s2 = residual_statistics_batch(r, arms[None, :], 4, contrasts=c2)[0][0]
        assert s1 == pytest.approx(s2, rel=1e-12)


class TestRefitStatistic:
    def test_equal_arms_give_zero_statistic(self):
        data = toy_dataset([0, 0, 1, 1], [1.0, 0.0, 1.0, 0.0], GRID2)
        stats, t_matrix, _, _ = glm_statistics_batch(
            data, data.arms[None, :], LINEAR_ONLY
        )
        assert abs(stats[0]) < 1e-6

    def test_statistic_grows_with_effect_size(self):
        # Monte Carlo trend check over increasing top-dose response.
        spec = RandomizationSpec(procedure="ra", grid=GRID4, n=48, targets=(12, 12, 12, 12))
        means = []
        for pk in (0.3, 0.6, 0.9):
            theta0, theta1 = calibrate_emax(0.2, pk, 100.0, 10.0)
            truth = CandidateModel(shape="emax", theta0=theta0, theta1=theta1, theta2=10.0)
            vals = []
            for rep in range(40):
                rng = substream(100, int(pk * 10), rep)
                arms = sample_sequence(spec, rng)
                eta = np.asarray(eval_model(truth, GRID4.as_array()))[arms]
                y = (rng.random(48) < np.asarray(inverse_logit(eta))).astype(float)
                data = toy_dataset(arms, y, GRID4)
                vals.append(glm_statistics_batch(data, arms[None, :],
                                                 default_candidate_set())[0][0])
            means.append(np.mean(vals))
        assert means[0] < means[1] < means[2]

    def test_covariate_column_order_irrelevant(self):
        rng = np.random.default_rng(2)
        arms = np.repeat([0, 1, 2, 3], 8)
        x = rng.normal(size=(32, 2))
        y = (rng.random(32) < 0.5).astype(float)
        d1 = toy_dataset(arms, y, GRID4, covariates=x)
        d2 = toy_dataset(arms, y, GRID4, covariates=x[:, ::-1])
        s1 = glm_statistics_batch(d1, arms[None, :], default_candidate_set())[0][0]
        s2 = glm_statistics_batch(d2, arms[None, :], default_candidate_set())[0][0]
        assert s1 == pytest.approx(s2, rel=1e-9)


class TestRandomizationTest:
    def test_constant_outcomes_give_p_one(self):
        spec = RandomizationSpec(procedure="ra", grid=GRID2, n=8, targets=(4, 4))
        data = toy_dataset([0] * 4 + [1] * 4, [1.0] * 8, GRID2)
        out = randomization_test(data, spec, TestMethod(id="residual_firth", n_rand=200),
                                 LINEAR_ONLY, substream(5, 0))
        assert out.p_value == 1.0

    def test_duplicated_observed_sequence_ties_count(self):
        spec = RandomizationSpec(procedure="ra", grid=GRID2, n=8, targets=(4, 4))
        rng = substream(5, 1)
        data = toy_dataset([0, 1] * 4, (rng.random(8) < 0.5).astype(float), GRID2)
        sequences = np.tile(data.arms, (50, 1))
        out = randomization_test(data, spec, TestMethod(id="residual_firth", n_rand=50),
                                 LINEAR_ONLY, rng, sequences=sequences)
        assert out.p_value == 1.0  # ties count as >=

    def test_add_one_rule_never_zero(self):
        spec = RandomizationSpec(procedure="pbd", grid=GRID4, n=28, block=(1, 2, 2, 2))
        rng = substream(6, 0)
        arms = sample_sequence(spec, rng)
        # Strong increasing signal: observed statistic should top them all.
        y = (GRID4.as_array()[arms] >= 25).astype(float)
        data = toy_dataset(arms, y, GRID4)
        plain = randomization_test(data, spec, TestMethod(id="residual_firth", n_rand=400),
                                   default_candidate_set(), substream(6, 1))
        addone = randomization_test(
            data, spec,
            TestMethod(id="residual_firth", n_rand=400, pvalue_rule="add_one"),
            default_candidate_set(), substream(6, 1))
        assert plain.p_value == 0.0
        assert addone.p_value == pytest.approx(1 / 401)

    def test_monte_carlo_matches_exact_on_tiny_design(self):
        spec = RandomizationSpec(procedure="ra", grid=GRID2, n=6, targets=(3, 3))
        rng = substream(7, 0)
        data = toy_dataset([0, 1, 0, 1, 0, 1], [0.0, 1.0, 0.0, 1.0, 1.0, 0.0], GRID2)
        method = TestMethod(id="residual_firth", n_rand=100_000)
        exact = exact_randomization_pvalue(data, spec, method, LINEAR_ONLY)
        mc = randomization_test(data, spec, method, LINEAR_ONLY, rng)
        se = np.sqrt(exact.p_value * (1 - exact.p_value) / method.n_rand)
        assert abs(mc.p_value - exact.p_value) <= max(3 * se, 0.01)

    def test_observed_sequence_membership_warning(self):
        spec = RandomizationSpec(procedure="ra", grid=GRID2, n=6, targets=(3, 3))
        data = toy_dataset([0, 0, 0, 0, 1, 1], [0.0, 1.0, 0.0, 1.0, 1.0, 0.0], GRID2)
        with pytest.warns(UserWarning, match="reference set"):
            out = randomization_test(data, spec,
                                     TestMethod(id="residual_firth", n_rand=50),
                                     LINEAR_ONLY, substream(7, 1))
        assert out.diagnostics["observed_not_in_reference_set"]

    def test_mle_refit_separation_diagnostics_counted(self):
        spec = RandomizationSpec(procedure="pbd", grid=GRID4, n=28, block=(1, 2, 2, 2))
        rng = substream(8, 0)
        arms = sample_sequence(spec, rng)
        x = rng.normal(size=28)
        y = np.zeros(28)
        y[x > 0.8] = 1.0  # sparse successes force frequent degenerate arms
        data = toy_dataset(arms, y, GRID4, covariates=x[:, None])
        out = randomization_test(data, spec, TestMethod(id="glm_mle", n_rand=300),
                                 default_candidate_set(), substream(8, 1))
        assert out.diagnostics["separated_refits"] > 0
        assert "observed_separation" in out.diagnostics


class TestExactTest:
    def test_two_arm_allocation_toy_is_one_sixth(self):
        # Both successes land in the high arm; enumeration of the six
        # allocations leaves only the observed one at +inf.
        spec = RandomizationSpec(procedure="ra", grid=GRID2, n=4, targets=(2, 2))
        data = toy_dataset([1, 1, 0, 0], [1.0, 1.0, 0.0, 0.0], GRID2)
        out = exact_randomization_pvalue(
            data, spec, TestMethod(id="residual_mle"), LINEAR_ONLY
        )
        assert out.p_value == pytest.approx(1 / 6)
        assert out.statistic == np.inf
        assert out.diagnostics["reference_set_size"] == 6

    def test_constant_outcomes_exact_p_one(self):
        spec = RandomizationSpec(procedure="pbd", grid=GRID2, n=6, block=(1, 1))
        data = toy_dataset([0, 1, 1, 0, 0, 1], [1.0] * 6, GRID2)
        out = exact_randomization_pvalue(
            data, spec, TestMethod(id="residual_firth"), LINEAR_ONLY
        )
        assert out.p_value == 1.0

    def test_cr_exact_excludes_degenerate_sequences(self):
        spec = RandomizationSpec(procedure="cr", grid=GRID2, n=6)
        data = toy_dataset([0, 1, 0, 1, 0, 1], [0.0, 1.0, 1.0, 0.0, 0.0, 1.0], GRID2)
        out = exact_randomization_pvalue(
            data, spec, TestMethod(id="residual_firth"), LINEAR_ONLY
        )
        assert out.diagnostics["excluded_probability_mass"] > 0
        assert 0.0 <= out.p_value <= 1.0

    def test_exact_glm_statistic_runs(self):
        spec = RandomizationSpec(procedure="ra", grid=GRID2, n=8, targets=(4, 4))
        rng = substream(9, 0)
        y = (rng.random(8) < 0.5).astype(float)
        data = toy_dataset([0, 1] * 4, y, GRID2)
        out = exact_randomization_pvalue(
            data, spec, TestMethod(id="glm_firth"), LINEAR_ONLY
        )
        assert 0.0 <= out.p_value <= 1.0
        assert out.diagnostics["reference_set_size"] == 70

    def test_validity_over_all_outcomes_and_sequences(self):
        # Strong-null validity: for every outcome vector, the exact
        # p-value's distribution over equally likely observed sequences
        # satisfies P(p <= alpha) <= alpha at every level.
        spec = RandomizationSpec(procedure="ra", grid=GRID2, n=4, targets=(2, 2))
        method = TestMethod(id="residual_firth")
        sequences = [seq for seq, _ in enumerate_sequences(spec)]
        alphas = np.linspace(0.02, 1.0, 20)
        for bits in range(16):
            y = np.array([(bits >> i) & 1 for i in range(4)], dtype=float)
            pvals = []
            for seq in sequences:
                data = toy_dataset(seq, y, GRID2)
                pvals.append(
                    exact_randomization_pvalue(data, spec, method, LINEAR_ONLY).p_value
                )
            pvals = np.array(pvals)
            for alpha in alphas:
                assert np.mean(pvals <= alpha) <= alpha + 1e-12


class TestResidualModel:
    def test_firth_residual_model_handles_constant_outcomes(self):
        data = toy_dataset([0, 1] * 5, [0.0] * 10, GRID2)
        fit, r = fit_residual_model(data, "firth")
        assert fit.converged
        assert np.allclose(r, -(0.5) / 11.0, atol=1e-9)

    def test_mle_residual_model_raises_on_separation(self):
        from randmcp.inference import ResidualModelError
        x = np.arange(10.0)
        y = (x >= 5).astype(float)
        data = toy_dataset([0, 1] * 5, y, GRID2, covariates=x[:, None])
        with pytest.raises(ResidualModelError):
            fit_residual_model(data, "mle")

    def test_gaussian_endpoint_uses_least_squares(self):
        rng = np.random.default_rng(3)
        data = toy_dataset([0, 1] * 6, rng.normal(size=12), GRID2,
                           covariates=rng.normal(size=(12, 1)), endpoint="continuous")
        fit, r = fit_residual_model(data, "firth")
        assert fit.estimator == "gaussian_ls"
        assert abs(r.mean()) < 1e-10


class TestMaxTailProbability:
    def test_single_contrast_is_normal_tail(self):
        p, err, repaired = max_tail_probability(1.3, np.eye(1))
        assert p == norm.sf(1.3)
        assert err == 0.0
        assert not repaired

    def test_perfectly_correlated_pair_collapses(self):
        corr = np.array([[1.0, 1.0], [1.0, 1.0]])
        p, err, _ = max_tail_probability(1.5, corr, points=1 << 16, rng=substream(1, 0))
        assert p == pytest.approx(norm.sf(1.5), abs=5e-4)

    def test_independent_pair_closed_form(self):
        # P(max(Z1,Z2) >= t) = 1 - Phi(t)^2 under independence.
        t = 1.0
        p, err, _ = max_tail_probability(t, np.eye(2), points=1 << 16, rng=substream(1, 1))
        assert p == pytest.approx(1 - norm.cdf(t) ** 2, abs=5e-4)

    def test_five_contrast_trial_matches_mvn_sampling_oracle(self):
        contrasts = contrast_matrix(default_candidate_set(), GRID4,
                                    arm_sizes=(7, 14, 14, 14))
        S = np.diag(1.0 / np.array([7.0, 14, 14, 14]))
        cross = contrasts.vectors @ S @ contrasts.vectors.T
        scale = np.sqrt(np.diag(cross))
        corr = cross / np.outer(scale, scale)
        t = 2.0
        p, err, _ = max_tail_probability(t, corr, points=1 << 17, rng=substream(1, 2))

        # Oracle: plain Monte Carlo over 10^7 multivariate normal draws.
        chol = np.linalg.cholesky(corr + 1e-12 * np.eye(5))
        hits = 0
        draws_total = 10_000_000
        rng = substream(1, 3)
        for _ in range(10):
            z = rng.standard_normal((1_000_000, 5)) @ chol.T
            hits += int(np.sum(z.max(axis=1) >= t))
        oracle = hits / draws_total
        assert p == pytest.approx(oracle, abs=0.002)

    def test_non_psd_inputs_repaired_and_flagged(self):
        corr = np.array([
            [1.0, 0.9, 0.9],
            [0.9, 1.0, 0.9],
            [0.9, 0.9, 1.0],
        ])
        corr -= 0.05 * np.outer([1, -1, 0], [1, -1, 0])  # knock an eigenvalue negative
        corr = (corr + corr.T) / 2
        np.fill_diagonal(corr, 1.0)
        eigs = np.linalg.eigvalsh(corr)
        if eigs.min() > -1e-10:  # ensure the construction really is non-PSD
            corr[0, 1] = corr[1, 0] = 1.02
        p, err, repaired = max_tail_probability(1.0, corr, points=1 << 14,
                                                rng=substream(1, 4))
        assert repaired
        assert 0.0 <= p <= 1.0


class TestPopulationTest:
    def _trial_data(self, seed=0, pk=0.8, n=49):
        spec = RandomizationSpec(procedure="pbd", grid=GRID4, n=n, block=(1, 2, 2, 2))
        rng = substream(200, seed)
        arms = sample_sequence(spec, rng)
        theta0, theta1 = calibrate_emax(0.2, pk, 100.0, 10.0)
        truth = CandidateModel(shape="emax", theta0=theta0, theta1=theta1, theta2=10.0)
        x = rng.normal(size=n)
        eta = np.asarray(eval_model(truth, GRID4.as_array()))[arms] + 0.6 * x
        y = (rng.random(n) < np.asarray(inverse_logit(eta))).astype(float)
        return toy_dataset(arms, y, GRID4, covariates=x[:, None])

    def test_single_candidate_equals_normal_tail(self):
        data = self._trial_data(seed=1)
        out = population_test(data, LINEAR_ONLY, rng=substream(2, 0))
        assert out.p_value == pytest.approx(norm.sf(out.statistic), abs=1e-12)

    def test_five_candidates_reports_qmc_error(self):
        data = self._trial_data(seed=2)
        out = population_test(data, default_candidate_set(), rng=substream(2, 1))
        assert 0.0 <= out.p_value <= 1.0
        assert out.diagnostics["qmc_error"] < 1e-3
        assert out.per_contrast.shape == (5,)
        assert out.statistic == pytest.approx(out.per_contrast.max())

    def test_adjusted_p_exceeds_single_contrast_p(self):
        # Multiplicity can only make the one-sided p larger.
        data = self._trial_data(seed=3)
        full = population_test(data, default_candidate_set(), rng=substream(2, 2))
        assert full.p_value >= norm.sf(full.statistic) - 1e-3

    def test_separation_reported_for_mle_fit(self):
        data = self._trial_data(seed=4)
        y = data.outcomes.copy()
        y[data.arms == 0] = 0.0  # empty the placebo arm of successes
        forced = TrialDataset(arms=data.arms, outcomes=y, covariates=data.covariates,
                              grid=GRID4)
        out = population_test(forced, default_candidate_set(), rng=substream(2, 3))
        assert out.diagnostics["fit_separation"] in ("quasicomplete", "complete")
        assert not out.diagnostics["fit_converged"]
