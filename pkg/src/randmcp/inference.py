"""Multiple contrast test statistics and the five testing procedures.

Two statistics are available.  The refit statistic builds the full
dose-indicator GLM for a treatment assignment and standardizes the
population-average arm means against their fitted covariance.  The
residual statistic fits a covariate-only model once, then contrasts
group means of its residuals, so re-randomization never refits.

Either statistic can drive a Monte Carlo randomization test or, for
small designs, an exact test over the enumerated reference set.  The
population-based test standardizes the refit statistic against a
multivariate normal reference with the estimated contrast correlation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import chi2, norm, qmc
from scipy.stats import t as student_t

from . import glm
from .contrasts import ContrastMatrix, contrast_matrix, optimal_contrast
from .data import TrialDataset
from .dose_response import CandidateSet, DoseGrid, standardized_shape
from .randomization import (
    CR,
    ENUMERATION_CAP,
    RandomizationSpec,
    enumerate_sequences,
    is_member,
    sample_sequences,
)

METHOD_IDS = ("population", "glm_mle", "residual_mle", "glm_firth", "residual_firth")
# Conventional report numbering for the five procedures.
METHOD_NUMBERS = {
    "population": 1,
    "glm_mle": 2,
    "residual_mle": 3,
    "glm_firth": 4,
    "residual_firth": 5,
}
_MAX_REDRAW_ROUNDS = 1000


class DegenerateVarianceError(RuntimeError):
    """An arm received fewer than two patients; residual variances are undefined."""


class ResidualModelError(RuntimeError):
    """The covariate-only residual model could not be fit."""


@dataclass(frozen=True)
class TestMethod:
    """One of the five testing procedures plus its tuning knobs."""

    __test__ = False  # not a pytest class, despite the name

    id: str
    n_rand: int = 1000
    pvalue_rule: str = "plain"  # "plain" | "add_one"
    freeze_contrasts: bool = False  # refit statistic: contrasts from design weights
    qmc_points: int = 1 << 17  # population test integration budget
    qmc_reps: int = 8
    # Population-test reference: None uses correlated standard normals;
    # a finite value uses the multivariate t with that many degrees of
    # freedom (the finite-sample convention of standard dose-finding
    # software; the built-in scenario presets set n minus the parameter
    # count).
    df: float | None = None

    def __post_init__(self):
        if self.id not in METHOD_IDS:
            raise ValueError(f"unknown method {self.id!r}, expected one of {METHOD_IDS}")
        if self.pvalue_rule not in ("plain", "add_one"):
            raise ValueError(f"unknown p-value rule {self.pvalue_rule!r}")
        if self.id != "population" and self.n_rand < 1:
            raise ValueError("randomization methods need n_rand >= 1")
        if self.df is not None and self.df <= 0:
            raise ValueError("df must be positive when given")

    @property
    def number(self) -> int:
        return METHOD_NUMBERS[self.id]

    @property
    def estimator(self) -> str:
        return "firth" if self.id.endswith("_firth") else "mle"

    @property
    def statistic(self) -> str:
        if self.id == "population":
            return "glm"
        return "residual" if self.id.startswith("residual") else "glm"

    @property
    def is_randomization(self) -> bool:
        return self.id != "population"


def default_methods(n_rand: int = 1000) -> tuple[TestMethod, ...]:
    return tuple(TestMethod(id=mid, n_rand=n_rand) for mid in METHOD_IDS)


@dataclass(frozen=True)
class TestOutcome:
    """Observed statistic, p-value and diagnostics of one analysis."""

    __test__ = False  # not a pytest class, despite the name

    method: TestMethod
    statistic: float
    per_contrast: np.ndarray
    contrast_labels: tuple[str, ...]
    p_value: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        per = np.asarray(self.per_contrast, dtype=float)
        object.__setattr__(self, "per_contrast", per)
        if per.size:
            top = float(np.max(per))
            same = self.statistic == top or abs(self.statistic - top) <= 1e-12
            if not same:
                raise ValueError("statistic must be the maximum per-contrast value")
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")


def shape_matrix(candidates: CandidateSet, grid: DoseGrid):
    """Stacked mean vectors of the non-flat candidates: (M, k) plus labels."""
    models = candidates.non_flat()
    if not models:
        raise ValueError("need at least one non-flat candidate shape")
    mu0s = np.vstack([standardized_shape(m, grid) for m in models])
    return mu0s, tuple(m.name for m in models)


# ---------------------------------------------------------------------------
# Statistic evaluation over a batch of treatment assignments
# ---------------------------------------------------------------------------

def _family(data: TrialDataset) -> str:
    return "binomial" if data.endpoint == "binary" else "gaussian"


def glm_statistics_batch(
    data: TrialDataset,
    arms_matrix: np.ndarray,
    candidates: CandidateSet,
    estimator: str = "mle",
    frozen_contrasts: ContrastMatrix | None = None,
    track_separation: bool = False,
):
    """Refit statistic for every row of ``arms_matrix``.

    Returns ``(stats, t_matrix, labels, diag)`` where ``stats`` has one
    entry per assignment, ``t_matrix`` the per-contrast values, and
    ``diag`` counts non-convergent and (optionally) separated refits.
    Outcomes and covariates stay fixed; only the dose indicators move.
    """
    k = data.grid.k
    mu0s, labels = shape_matrix(candidates, data.grid)
    designs = glm.stack_designs(arms_matrix, k, data.covariates)
    family = _family(data)
    if family == "gaussian":
        fits = glm.fit_gaussian_many(designs, data.outcomes)
    elif estimator == "firth":
        fits = glm.fit_firth_many(designs, data.outcomes)
    else:
        fits = glm.fit_mle_many(designs, data.outcomes)
    mu, cov = glm.population_average_batch(fits, designs, k)
    if frozen_contrasts is not None:
        c = np.broadcast_to(frozen_contrasts.vectors, (arms_matrix.shape[0],) + frozen_contrasts.vectors.shape)
    else:
        c = _optimal_contrasts_batch(mu0s, cov)
    num = np.einsum("bmk,bk->bm", c, mu)
    den = np.einsum("bmk,bkl,bml->bm", c, cov, c)
    t_matrix = np.where(den > 0, num / np.sqrt(np.where(den > 0, den, 1.0)), 0.0)
    stats = t_matrix.max(axis=1)
    diag = {"nonconverged_refits": int(np.sum(~fits.converged))}
    if track_separation and family == "binomial" and estimator == "mle":
        diag["separation_codes"] = _classify_separation_batch(data, arms_matrix)
    return stats, t_matrix, labels, diag


def _classify_separation_batch(data: TrialDataset, arms_matrix: np.ndarray) -> np.ndarray:
    k = data.grid.k
    if data.n_covariates == 1:
        return glm.separation_batch(arms_matrix, data.outcomes, data.covariates[:, 0], k)
    codes = {"none": 0, "quasicomplete": 1, "complete": 2}
    out = np.zeros(arms_matrix.shape[0], dtype=int)
    for i, arms in enumerate(arms_matrix):
        design = glm.design_from_assignments(arms, k, data.covariates)
        out[i] = codes[glm.detect_separation(design, data.outcomes)]
    return out


def _optimal_contrasts_batch(mu0s: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Per-slice optimal contrasts: (B, M, k) from shapes (M, k) and covariances (B, k, k)."""
    b, k, _ = covs.shape
    m = mu0s.shape[0]
    rhs = np.concatenate([mu0s.T, np.ones((k, 1))], axis=1)  # (k, M+1)
    try:
        sol = np.linalg.solve(covs, np.broadcast_to(rhs, (b, k, m + 1)))
    except np.linalg.LinAlgError:
        sol = np.einsum("bkl,lm->bkm", np.linalg.pinv(covs), rhs)
    sinv_mu = sol[:, :, :m].transpose(0, 2, 1)  # (B, M, k)
    sinv_one = sol[:, :, m]  # (B, k)
    shift = np.einsum("mk,bk->bm", mu0s, sinv_one) / sinv_one.sum(axis=1)[:, None]
    c = sinv_mu - shift[:, :, None] * sinv_one[:, None, :]
    return _normalize_contrasts(c, mu0s)


def _optimal_contrasts_diag_batch(mu0s: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Optimal contrasts for diagonal covariances diag(1/n_j): counts has shape (B, k)."""
    sinv_mu = counts[:, None, :] * mu0s[None, :, :]
    sinv_one = counts
    shift = np.einsum("mk,bk->bm", mu0s, sinv_one) / sinv_one.sum(axis=1)[:, None]
    c = sinv_mu - shift[:, :, None] * sinv_one[:, None, :]
    return _normalize_contrasts(c, mu0s)


def _normalize_contrasts(c: np.ndarray, mu0s: np.ndarray) -> np.ndarray:
    c = c - c.mean(axis=2, keepdims=True)
    norms = np.linalg.norm(c, axis=2, keepdims=True)
    c = c / np.where(norms > 0, norms, 1.0)
    sign = np.sign(np.einsum("bmk,mk->bm", c, mu0s))
    return c * np.where(sign == 0, 1.0, sign)[:, :, None]


def residual_statistics_batch(
    residual: np.ndarray,
    arms_matrix: np.ndarray,
    k: int,
    contrasts: ContrastMatrix | None = None,
    mu0s: np.ndarray | None = None,
):
    """Residual statistic for every assignment row.

    With fixed target arm sizes, pass the precomputed ``contrasts``;
    under complete randomization pass ``mu0s`` instead and per-row
    contrasts are rebuilt from the realized arm sizes.  Rows with an
    arm of fewer than two patients are flagged invalid (NaN statistic).
    Arms with zero residual variance contribute no noise: if every
    contrast's variance vanishes, the statistic is 0 for a zero signal
    and +/-inf otherwise.
    """
    b, n = arms_matrix.shape
    r = np.asarray(residual, dtype=float)
    counts = np.stack([(arms_matrix == j).sum(axis=1) for j in range(k)], axis=1).astype(float)
    sums = np.stack([np.where(arms_matrix == j, r[None, :], 0.0).sum(axis=1) for j in range(k)], axis=1)
    sqs = np.stack([np.where(arms_matrix == j, r[None, :] ** 2, 0.0).sum(axis=1) for j in range(k)], axis=1)
    valid = np.all(counts >= 2, axis=1)
    safe = np.where(counts >= 1, counts, 1.0)
    means = sums / safe
    variances = np.clip(sqs - sums ** 2 / safe, 0.0, None) / np.where(counts >= 2, counts - 1.0, 1.0)

    if contrasts is not None:
        c = np.broadcast_to(contrasts.vectors, (b,) + contrasts.vectors.shape)
        labels = contrasts.labels
    else:
        if mu0s is None:
            raise ValueError("need either fixed contrasts or candidate shapes")
        c = _optimal_contrasts_diag_batch(mu0s, counts)
        labels = None
    num = np.einsum("bmk,bk->bm", c, means)
    den = np.einsum("bmk,bk->bm", c ** 2, variances / safe)
    scale = float(np.max(np.abs(r))) if r.size else 0.0
    zero_den = den <= (1e-14 * (scale + 1e-300)) ** 2
    zero_num = np.abs(num) <= 1e-12 * (scale + 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_matrix = num / np.sqrt(den)
    t_matrix = np.where(zero_den & zero_num, 0.0, t_matrix)
    signed_inf = np.where(num > 0, np.inf, -np.inf)
    t_matrix = np.where(zero_den & ~zero_num, signed_inf, t_matrix)
    stats = t_matrix.max(axis=1)
    stats = np.where(valid, stats, np.nan)
    return stats, t_matrix, labels, {"invalid_rows": int(np.sum(~valid))}


# ---------------------------------------------------------------------------
# Residual model
# ---------------------------------------------------------------------------

def fit_residual_model(data: TrialDataset, estimator: str = "mle"):
    """Covariate-only (intercept + covariates) fit and its residuals."""
    design = glm.covariate_design(data.covariates, n=data.n)
    family = _family(data)
    if family == "gaussian":
        fit = glm.fit_mle(design, data.outcomes, family="gaussian")
    elif estimator == "firth":
        fit = glm.fit_firth(design, data.outcomes, check_separation=False)
    else:
        fit = glm.fit_mle(design, data.outcomes, family="binomial", check_separation=True)
    if not fit.converged:
        raise ResidualModelError(
            f"covariate-only {estimator} model did not converge "
            f"(separation: {fit.separation}); use the firth estimator"
        )
    return fit, glm.residuals(fit, design, data.outcomes)


def residual_design_contrasts(
    spec: RandomizationSpec, candidates: CandidateSet
) -> ContrastMatrix | None:
    """Fixed design-weight contrasts, or None when sizes vary per draw (CR)."""
    if spec.procedure == CR:
        return None
    sizes = spec.expected_arm_sizes()
    if np.any(sizes < 2):
        raise DegenerateVarianceError(
            f"residual statistic needs every arm target >= 2, got {sizes.tolist()}"
        )
    return contrast_matrix(candidates, spec.grid, arm_sizes=sizes)


# ---------------------------------------------------------------------------
# Randomization tests
# ---------------------------------------------------------------------------

def _draw_valid_sequences(
    spec: RandomizationSpec,
    n_rand: int,
    rng: np.random.Generator,
    min_arm: int,
) -> tuple[np.ndarray, int]:
    """Sample sequences, redrawing any whose smallest arm is below ``min_arm``."""
    if spec.procedure != CR or min_arm == 0:
        return sample_sequences(spec, n_rand, rng), 0
    rows = []
    redraws = 0
    need = n_rand
    for _ in range(_MAX_REDRAW_ROUNDS):
        batch = sample_sequences(spec, need, rng)
        counts = np.stack([(batch == j).sum(axis=1) for j in range(spec.k)], axis=1)
        ok = np.all(counts >= min_arm, axis=1)
        redraws += int(np.sum(~ok))
        rows.append(batch[ok])
        need -= int(np.sum(ok))
        if need == 0:
            return np.concatenate(rows, axis=0), redraws
    raise DegenerateVarianceError(
        f"could not draw {n_rand} sequences with every arm >= {min_arm} patients"
    )


def randomization_test(
    data: TrialDataset,
    spec: RandomizationSpec,
    method: TestMethod,
    candidates: CandidateSet,
    rng: np.random.Generator,
    sequences: np.ndarray | None = None,
) -> TestOutcome:
    """Monte Carlo randomization test holding outcomes and covariates fixed.

    Draws ``method.n_rand`` sequences from the procedure, evaluates the
    method's statistic on each with the observed responses, and counts
    re-randomized statistics at least as large as the observed one.
    The plain p-value rule divides by ``n_rand`` exactly; the add-one
    rule returns ``(1 + count) / (1 + n_rand)`` and can never be zero.
    """
    if not method.is_randomization:
        raise ValueError("use population_test for the population-based method")
    _check_spec(data, spec)
    diagnostics: dict = {}
    if not is_member(spec, data.arms):
        warnings.warn("observed sequence is not a member of the declared reference set")
        diagnostics["observed_not_in_reference_set"] = True

    min_arm = 2 if method.statistic == "residual" else 1
    if sequences is None:
        sequences, redraws = _draw_valid_sequences(spec, method.n_rand, rng, min_arm)
        if redraws:
            diagnostics["redrawn_sequences"] = redraws
    elif spec.procedure == CR:
        counts = np.stack([(sequences == j).sum(axis=1) for j in range(spec.k)], axis=1)
        bad = ~np.all(counts >= min_arm, axis=1)
        if np.any(bad):
            extra, redraws = _draw_valid_sequences(spec, int(bad.sum()), rng, min_arm)
            sequences = np.concatenate([sequences[~bad], extra], axis=0)
            diagnostics["redrawn_sequences"] = int(bad.sum()) + redraws

    arms_all = np.concatenate([data.arms[None, :], sequences], axis=0)
    if method.statistic == "residual":
        obs_counts = data.arm_sizes()
        if np.any(obs_counts < 2):
            raise DegenerateVarianceError(
                f"observed data has an arm with < 2 patients: {obs_counts.tolist()}"
            )
        fit, residual = fit_residual_model(data, method.estimator)
        diagnostics["residual_fit"] = {
            "estimator": fit.estimator, "iterations": fit.iterations,
            "separation": fit.separation,
        }
        fixed = residual_design_contrasts(spec, candidates)
        mu0s, labels = shape_matrix(candidates, data.grid)
        stats, t_matrix, c_labels, diag = residual_statistics_batch(
            residual, arms_all, data.grid.k,
            contrasts=fixed, mu0s=None if fixed is not None else mu0s,
        )
        labels = c_labels if c_labels is not None else labels
    else:
        frozen = None
        if method.freeze_contrasts:
            frozen = contrast_matrix(candidates, data.grid, arm_sizes=spec.expected_arm_sizes())
        stats, t_matrix, labels, diag = glm_statistics_batch(
            data, arms_all, candidates, estimator=method.estimator,
            frozen_contrasts=frozen, track_separation=method.estimator == "mle",
        )
        codes = diag.pop("separation_codes", None)
        if codes is not None:
            names = {0: glm.SEP_NONE, 1: glm.SEP_QUASI, 2: glm.SEP_COMPLETE}
            diag["observed_separation"] = names[int(codes[0])]
            diag["separated_refits"] = int(np.sum(codes[1:] > 0))
    diagnostics.update(diag)

    s_obs = stats[0]
    s_rand = stats[1:]
    count = int(np.sum(s_rand >= s_obs))
    n_rand = s_rand.shape[0]
    if method.pvalue_rule == "plain":
        p_value = count / n_rand
    else:
        p_value = (1 + count) / (1 + n_rand)
    diagnostics["n_rand"] = n_rand
    diagnostics["count_geq"] = count
    diagnostics["mc_se"] = float(np.sqrt(max(p_value * (1 - p_value), 0.0) / n_rand))
    return TestOutcome(
        method=method,
        statistic=float(s_obs),
        per_contrast=t_matrix[0],
        contrast_labels=tuple(labels),
        p_value=float(p_value),
        diagnostics=diagnostics,
    )


def exact_randomization_pvalue(
    data: TrialDataset,
    spec: RandomizationSpec,
    method: TestMethod,
    candidates: CandidateSet,
    cap: int = ENUMERATION_CAP,
    chunk: int = 20_000,
) -> TestOutcome:
    """Exact p-value by weighted enumeration of the whole reference set.

    Sequences whose statistic is undefined (an arm below the method's
    minimum occupancy, possible only under complete randomization) are
    excluded and the remaining probabilities renormalized; the excluded
    mass is reported in the diagnostics.
    """
    if not method.is_randomization:
        raise ValueError("use population_test for the population-based method")
    _check_spec(data, spec)
    min_arm = 2 if method.statistic == "residual" else 1

    if method.statistic == "residual":
        obs_counts = data.arm_sizes()
        if np.any(obs_counts < 2):
            raise DegenerateVarianceError(
                f"observed data has an arm with < 2 patients: {obs_counts.tolist()}"
            )
        fit, residual = fit_residual_model(data, method.estimator)
        fixed = residual_design_contrasts(spec, candidates)
        mu0s, labels = shape_matrix(candidates, data.grid)

        def stat_fn(arms_matrix):
            return residual_statistics_batch(
                residual, arms_matrix, data.grid.k,
                contrasts=fixed, mu0s=None if fixed is not None else mu0s,
            )[:2]
    else:
        frozen = None
        if method.freeze_contrasts:
            frozen = contrast_matrix(candidates, data.grid, arm_sizes=spec.expected_arm_sizes())
        mu0s, labels = shape_matrix(candidates, data.grid)

        def stat_fn(arms_matrix):
            out = glm_statistics_batch(
                data, arms_matrix, candidates,
                estimator=method.estimator, frozen_contrasts=frozen,
            )
            return out[0], out[1]

    s_obs_arr, t_obs = stat_fn(data.arms[None, :])
    s_obs = float(s_obs_arr[0])

    mass_geq = 0.0
    mass_valid = 0.0
    mass_excluded = 0.0
    total = 0
    buf: list[np.ndarray] = []
    probs: list[float] = []

    def flush():
        nonlocal mass_geq, mass_valid, mass_excluded
        if not buf:
            return
        arms_matrix = np.stack(buf, axis=0)
        pvec = np.array(probs)
        counts = np.stack([(arms_matrix == j).sum(axis=1) for j in range(spec.k)], axis=1)
        ok = np.all(counts >= min_arm, axis=1)
        mass_excluded += float(pvec[~ok].sum())
        if np.any(ok):
            stats, _ = stat_fn(arms_matrix[ok])
            pv = pvec[ok]
            mass_valid += float(pv.sum())
            mass_geq += float(pv[stats >= s_obs].sum())
        buf.clear()
        probs.clear()

    for seq, prob in enumerate_sequences(spec, cap=cap):
        buf.append(seq)
        probs.append(prob)
        total += 1
        if len(buf) >= chunk:
            flush()
    flush()

    if mass_valid <= 0:
        raise DegenerateVarianceError("every reference-set sequence was degenerate")
    p_value = mass_geq / mass_valid
    diagnostics = {
        "reference_set_size": total,
        "excluded_probability_mass": mass_excluded,
        "exact": True,
    }
    return TestOutcome(
        method=method,
        statistic=s_obs,
        per_contrast=t_obs[0],
        contrast_labels=tuple(labels),
        p_value=float(min(max(p_value, 0.0), 1.0)),
        diagnostics=diagnostics,
    )


def _check_spec(data: TrialDataset, spec: RandomizationSpec) -> None:
    if data.n != spec.n:
        raise ValueError(f"dataset has {data.n} patients but the procedure expects {spec.n}")
    if data.grid.doses != spec.grid.doses:
        raise ValueError("dataset and randomization grids differ")


# ---------------------------------------------------------------------------
# Population-based test
# ---------------------------------------------------------------------------

def max_tail_probability(
    threshold: float,
    corr: np.ndarray,
    points: int = 1 << 17,
    reps: int = 8,
    rng: np.random.Generator | None = None,
    df: float | None = None,
):
    """Upper tail of the maximum of correlated standard variates by QMC.

    With ``df=None`` the variates are standard normals; a finite ``df``
    divides each draw by an independent chi scale, giving the
    multivariate-t reference.  The budget is split into ``reps``
    independently scrambled Sobol replicates; the spread across
    replicates yields the reported integration error.  Non-PSD
    correlation inputs are repaired by clipping eigenvalues at 1e-10
    (flagged).
    """
    corr = np.atleast_2d(np.asarray(corr, dtype=float))
    m = corr.shape[0]
    if m == 1:
        tail = norm.sf(threshold) if df is None else student_t.sf(threshold, df)
        return float(tail), 0.0, False
    eigval, eigvec = np.linalg.eigh(corr)
    repaired = bool(eigval.min() < -1e-10)
    eigval = np.clip(eigval, 1e-10, None)
    transform = eigvec * np.sqrt(eigval)  # (m, m): x = z @ transform.T

    rng = rng or np.random.default_rng()
    per_rep = 1 << max(int(np.ceil(np.log2(max(points, reps) / reps))), 4)
    dims = m + (0 if df is None else 1)
    estimates = np.empty(reps)
    for rep in range(reps):
        engine = qmc.Sobol(d=dims, scramble=True, seed=int(rng.integers(2 ** 63)))
        u = np.clip(engine.random(per_rep), 1e-15, 1 - 1e-15)
        z = ndtri(u[:, :m])
        draws = z @ transform.T
        if df is not None:
            scale = np.sqrt(chi2.ppf(u[:, m], df) / df)
            draws = draws / scale[:, None]
        estimates[rep] = np.mean(draws.max(axis=1) >= threshold)
    p = float(np.clip(estimates.mean(), 0.0, 1.0))
    err = float(estimates.std(ddof=1) / np.sqrt(reps))
    return p, err, repaired


def population_test(
    data: TrialDataset,
    candidates: CandidateSet,
    method: TestMethod | None = None,
    rng: np.random.Generator | None = None,
) -> TestOutcome:
    """Population-based multiple contrast test (asymptotic reference).

    Fits the dose-indicator GLM once, computes the per-contrast
    statistics against the fitted covariance of the population-average
    means, and reports the one-sided multiplicity-adjusted p-value
    ``P(max of M correlated standard normals >= observed max)``.  A
    finite ``method.df`` swaps the reference for the multivariate t
    with those degrees of freedom.
    """
    method = method or TestMethod(id="population")
    if method.id != "population":
        raise ValueError("population_test requires the population method")
    design = glm.design_from_assignments(data.arms, data.grid.k, data.covariates)
    family = _family(data)
    if family == "gaussian":
        fit = glm.fit_mle(design, data.outcomes, family="gaussian")
    elif method.estimator == "firth":
        fit = glm.fit_firth(design, data.outcomes, check_separation=True)
    else:
        fit = glm.fit_mle(design, data.outcomes, family="binomial", check_separation=True)
    avg = glm.population_average_means(fit, design)
    mu0s, labels = shape_matrix(candidates, data.grid)

    rows = [optimal_contrast(mu0, avg.covariance) for mu0 in mu0s]
    c = np.vstack(rows)
    num = c @ avg.mu
    den = np.einsum("mk,kl,ml->m", c, avg.covariance, c)
    t_vec = np.where(den > 0, num / np.sqrt(np.where(den > 0, den, 1.0)), 0.0)
    t_obs = float(t_vec.max())

    cross = np.einsum("mk,kl,nl->mn", c, avg.covariance, c)
    scale = np.sqrt(np.clip(np.diag(cross), 1e-300, None))
    corr = cross / np.outer(scale, scale)
    np.fill_diagonal(corr, 1.0)

    p, err, repaired = max_tail_probability(
        t_obs, corr, points=method.qmc_points, reps=method.qmc_reps, rng=rng,
        df=method.df,
    )
    diagnostics = {
        "qmc_error": err,
        "correlation_repaired": repaired,
        "fit_converged": fit.converged,
        "fit_separation": fit.separation,
        "estimator": fit.estimator,
        "reference": "normal" if method.df is None else f"t({method.df:g})",
        "fit": fit.summary(),
    }
    return TestOutcome(
        method=method,
        statistic=t_obs,
        per_contrast=t_vec,
        contrast_labels=labels,
        p_value=p,
        diagnostics=diagnostics,
    )


def analyze(
    data: TrialDataset,
    method: TestMethod,
    candidates: CandidateSet,
    spec: RandomizationSpec | None = None,
    rng: np.random.Generator | None = None,
    exact: bool = False,
    cap: int = ENUMERATION_CAP,
) -> TestOutcome:
    """Run one method on one dataset, dispatching on its kind."""
    if method.id == "population":
        return population_test(data, candidates, method=method, rng=rng)
    if spec is None:
        raise ValueError("randomization methods need the trial's randomization procedure")
    if exact:
        return exact_randomization_pvalue(data, spec, method, candidates, cap=cap)
    if rng is None:
        raise ValueError("Monte Carlo randomization tests need an rng")
    return randomization_test(data, spec, method, candidates, rng)
