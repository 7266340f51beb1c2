"""Trial simulation: data generation, power studies, potential-outcome replay.

A scenario fixes the design (grid, randomization procedure, sample
size), the truth curve (an emax shape calibrated to placebo/top-dose
response rates), the covariate strength, an optional enrollment-time
drift of the success probabilities, and the battery of test methods.
Each simulated trial draws its own counter-based RNG streams keyed by
the trial index, so a study is reproducible regardless of how trials
are scheduled; all methods see the same simulated data and share one
batch of re-randomization sequences per trial.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import PotentialOutcomeTable, TrialDataset
from .dose_response import (
    CandidateModel,
    CandidateSet,
    DoseGrid,
    calibrate_emax,
    candidate_set_from_config,
    default_candidate_set,
    eval_model,
    inverse_logit,
)
from .glm import separation_batch
from .inference import (
    TestMethod,
    default_methods,
    population_test,
    randomization_test,
)
from .randomization import RandomizationSpec, sample_sequence, sample_sequences
from .rng import substream

# Substream domains: one per independent random ingredient of a trial.
_GEN, _RERAND, _QMC = 0, 1, 2

TIME_TRENDS = ("none", "linear")


@dataclass(frozen=True)
class ScenarioConfig:
    """One data-generating scenario of the binary-endpoint study."""

    name: str
    spec: RandomizationSpec
    p0: float = 0.2
    pk: float = 0.8
    emax_ed50: float = 10.0
    covariate_coef: float = 0.6
    covariate_in_analysis: bool = True
    time_trend: str = "none"
    alpha: float = 0.10
    n_sim: int = 10_000
    n_rand: int = 1_000
    methods: tuple[TestMethod, ...] = ()
    candidates: CandidateSet = field(default_factory=default_candidate_set)
    seed: int = 1

    def __post_init__(self):
        if self.time_trend not in TIME_TRENDS:
            raise ValueError(f"time_trend must be one of {TIME_TRENDS}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_sim < 1:
            raise ValueError("n_sim must be positive")
        methods = self.methods or default_methods(self.n_rand)
        methods = tuple(
            m if m.n_rand == self.n_rand or m.id == "population"
            else replace(m, n_rand=self.n_rand)
            for m in methods
        )
        object.__setattr__(self, "methods", methods)

    @property
    def grid(self) -> DoseGrid:
        return self.spec.grid

    @property
    def is_null(self) -> bool:
        return self.pk == self.p0

    def truth_model(self) -> CandidateModel:
        theta0, theta1 = calibrate_emax(
            self.p0, self.pk, self.grid.doses[-1], self.emax_ed50
        )
        return CandidateModel(
            shape="emax", theta0=theta0, theta1=theta1, theta2=self.emax_ed50,
            name="truth_emax",
        )


def linear_time_trend(n: int) -> np.ndarray:
    """Probability-scale drift over enrollment: ramps from ~-0.2 to +0.2."""
    i = np.arange(1, n + 1, dtype=float)
    return 0.4 * i / n - 0.2


def generate_binary_trial(config: ScenarioConfig, rng: np.random.Generator) -> TrialDataset:
    """Simulate one trial of the scenario.

    Draws the treatment sequence from the randomization procedure, one
    standard-normal covariate per patient, success probabilities from
    the truth curve plus the covariate effect on the logit scale, an
    optional enrollment-time drift added on the probability scale and
    clamped to [0, 1], and finally the binary outcomes.
    """
    spec = config.spec
    truth = config.truth_model()
    arms = sample_sequence(spec, rng)
    x = rng.normal(size=spec.n)
    eta = np.asarray(eval_model(truth, spec.grid.as_array()))[arms] + config.covariate_coef * x
    gamma = np.asarray(inverse_logit(eta))
    if config.time_trend == "linear":
        gamma = np.clip(gamma + linear_time_trend(spec.n), 0.0, 1.0)
    y = (rng.random(spec.n) < gamma).astype(float)
    return TrialDataset(arms=arms, outcomes=y, covariates=x, grid=spec.grid,
                        endpoint="binary")


@dataclass
class MethodSummary:
    """Aggregated performance of one method over a study."""

    method_id: str
    number: int
    rejection_rate: float
    mcse: float
    n_sim: int
    alpha: float
    mean_runtime_s: float
    diagnostics: dict


@dataclass
class StudyResult:
    """All per-method summaries of one simulated scenario."""

    name: str
    sample_size: int
    procedure: str
    time_trend: str
    alpha: float
    p0: float
    pk: float
    n_sim: int
    n_rand: int
    seed: int
    methods: list[MethodSummary]
    separation: dict
    p_values: dict = field(default_factory=dict)  # method_id -> np.ndarray

    def summary(self, method_id: str) -> MethodSummary:
        for m in self.methods:
            if m.method_id == method_id:
                return m
        raise KeyError(method_id)


def _trial_diagnostics(data: TrialDataset, covariate_in_analysis: bool) -> dict:
    """Separation state of the analysis design plus degenerate-arm flags."""
    k = data.grid.k
    sizes = data.arm_sizes()
    succ = np.bincount(data.arms, weights=data.outcomes, minlength=k)
    degenerate = (succ == 0) | (succ == sizes)
    out = {
        "any_arm_degenerate": bool(np.any(degenerate & (sizes > 0))),
        "placebo_degenerate": bool(degenerate[0] and sizes[0] > 0),
    }
    if data.endpoint == "binary":
        if covariate_in_analysis and data.n_covariates == 1:
            code = int(separation_batch(data.arms[None, :], data.outcomes,
                                        data.covariates[:, 0], k)[0])
        elif not covariate_in_analysis or data.n_covariates == 0:
            # Indicators only: any degenerate arm is quasicomplete, all
            # degenerate is complete.
            if np.all(degenerate):
                code = 2
            elif np.any(degenerate):
                code = 1
            else:
                code = 0
        else:
            from .glm import design_from_assignments, detect_separation
            design = design_from_assignments(data.arms, k, data.covariates)
            code = {"none": 0, "quasicomplete": 1, "complete": 2}[
                detect_separation(design, data.outcomes)
            ]
        out["separation_code"] = code
    return out


def _run_methods_on_trial(
    data: TrialDataset,
    spec: RandomizationSpec,
    methods: tuple[TestMethod, ...],
    candidates: CandidateSet,
    seed: int,
    trial: int,
) -> dict[str, tuple[float, float, dict]]:
    """p-value, runtime and diagnostics per method, sharing one sequence batch."""
    shared: np.ndarray | None = None
    n_rand = max((m.n_rand for m in methods if m.is_randomization), default=0)
    if n_rand:
        shared = sample_sequences(spec, n_rand, substream(seed, _RERAND, trial))
    out = {}
    for method in methods:
        start = time.perf_counter()
        if method.id == "population":
            res = population_test(data, candidates, method=method,
                                  rng=substream(seed, _QMC, trial))
        else:
            seqs = shared[: method.n_rand] if shared is not None else None
            res = randomization_test(
                data, spec, method, candidates,
                rng=substream(seed, _RERAND, trial, method.number),
                sequences=seqs,
            )
        out[method.id] = (res.p_value, time.perf_counter() - start, res.diagnostics)
    return out


def _binary_trial_range(config: ScenarioConfig, lo: int, hi: int, progress=None):
    """Run trials [lo, hi) of a study; the worker unit for parallel runs."""
    methods = config.methods
    p_values = {m.id: np.empty(hi - lo) for m in methods}
    runtimes = {m.id: 0.0 for m in methods}
    agg: dict[str, dict] = {m.id: {} for m in methods}
    sep_counts = {"complete": 0, "quasicomplete": 0, "placebo_degenerate": 0,
                  "any_arm_degenerate": 0}
    for trial in range(lo, hi):
        data = generate_binary_trial(config, substream(config.seed, _GEN, trial))
        diag = _trial_diagnostics(data, config.covariate_in_analysis)
        code = diag.get("separation_code", 0)
        sep_counts["complete"] += code == 2
        sep_counts["quasicomplete"] += code == 1
        sep_counts["placebo_degenerate"] += diag["placebo_degenerate"]
        sep_counts["any_arm_degenerate"] += diag["any_arm_degenerate"]
        analysis = data if config.covariate_in_analysis else data.without_covariates()
        results = _run_methods_on_trial(
            analysis, config.spec, methods, config.candidates, config.seed, trial
        )
        for mid, (p, rt, d) in results.items():
            p_values[mid][trial - lo] = p
            runtimes[mid] += rt
            for key in ("separated_refits", "nonconverged_refits", "redrawn_sequences"):
                if key in d:
                    agg[mid][key] = agg[mid].get(key, 0) + d[key]
        if progress and (trial + 1) % progress == 0:
            print(f"[{config.name}] {trial + 1}/{config.n_sim} trials", flush=True)
    return lo, p_values, runtimes, agg, sep_counts


def _chunk_ranges(n: int, workers: int) -> list[tuple[int, int]]:
    per = -(-n // max(workers, 1))
    return [(lo, min(lo + per, n)) for lo in range(0, n, per)]


def run_power_study(config: ScenarioConfig, workers: int = 1, progress=None) -> StudyResult:
    """Simulate ``n_sim`` trials and tabulate each method's rejection rate.

    Per-trial RNG substreams make the result identical for any worker
    count; chunks are merged back in trial order.
    """
    methods = config.methods
    if workers > 1 and config.n_sim > 1:
        from concurrent.futures import ProcessPoolExecutor

        ranges = _chunk_ranges(config.n_sim, workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = sorted(
                pool.map(_binary_trial_range_star,
                         [(config, lo, hi) for lo, hi in ranges]),
                key=lambda part: part[0],
            )
    else:
        parts = [_binary_trial_range(config, 0, config.n_sim, progress=progress)]

    p_values = {m.id: np.concatenate([part[1][m.id] for part in parts]) for m in methods}
    runtimes = {m.id: sum(part[2][m.id] for part in parts) for m in methods}
    agg: dict[str, dict] = {m.id: {} for m in methods}
    sep_counts = {"complete": 0, "quasicomplete": 0, "placebo_degenerate": 0,
                  "any_arm_degenerate": 0}
    for part in parts:
        for mid, d in part[3].items():
            for key, val in d.items():
                agg[mid][key] = agg[mid].get(key, 0) + val
        for key, val in part[4].items():
            sep_counts[key] += val

    n = config.n_sim
    summaries = []
    for m in methods:
        rate = float(np.mean(p_values[m.id] < config.alpha))
        summaries.append(MethodSummary(
            method_id=m.id,
            number=m.number,
            rejection_rate=rate,
            mcse=float(np.sqrt(rate * (1 - rate) / n)),
            n_sim=n,
            alpha=config.alpha,
            mean_runtime_s=runtimes[m.id] / n,
            diagnostics=agg[m.id],
        ))
    separation = {
        "mle_nonexistent_rate": (sep_counts["complete"] + sep_counts["quasicomplete"]) / n,
        "complete_rate": sep_counts["complete"] / n,
        "quasicomplete_rate": sep_counts["quasicomplete"] / n,
        "placebo_degenerate_rate": sep_counts["placebo_degenerate"] / n,
        "any_arm_degenerate_rate": sep_counts["any_arm_degenerate"] / n,
    }
    return StudyResult(
        name=config.name,
        sample_size=config.spec.n,
        procedure=config.spec.procedure,
        time_trend=config.time_trend,
        alpha=config.alpha,
        p0=config.p0,
        pk=config.pk,
        n_sim=n,
        n_rand=config.n_rand,
        seed=config.seed,
        methods=summaries,
        separation=separation,
        p_values=p_values,
    )


def _binary_trial_range_star(args):
    return _binary_trial_range(*args)


@dataclass
class TableBlock:
    """Null and alternative runs of one scenario, method by method."""

    scenario: str
    null: StudyResult
    alternative: StudyResult

    def rows(self) -> list[dict]:
        out = []
        for m_null, m_alt in zip(self.null.methods, self.alternative.methods):
            out.append({
                "sample_size": self.alternative.sample_size,
                "randomization_procedure": self.alternative.procedure.upper(),
                "time_trend": "Yes" if self.alternative.time_trend != "none" else "No",
                "test": m_null.number,
                "type1_error_pct": round(100 * m_null.rejection_rate, 2),
                "power_pct": round(100 * m_alt.rejection_rate, 2),
                "type1_mcse_pct": round(100 * m_null.mcse, 3),
                "power_mcse_pct": round(100 * m_alt.mcse, 3),
            })
        return out


def run_table_block(config: ScenarioConfig, workers: int = 1, progress=None) -> TableBlock:
    """Run the scenario under the null (pk = p0) and at its alternative."""
    null_cfg = replace(config, pk=config.p0, name=f"{config.name}_null")
    alt_cfg = replace(config, name=f"{config.name}_alt")
    return TableBlock(
        scenario=config.name,
        null=run_power_study(null_cfg, workers=workers, progress=progress),
        alternative=run_power_study(alt_cfg, workers=workers, progress=progress),
    )


# ---------------------------------------------------------------------------
# Potential-outcomes replay
# ---------------------------------------------------------------------------

def _replay_trial_range(table, spec, methods, candidates, seed, lo, hi,
                        include_baseline_covariate, name, n_sim, progress=None):
    rows = np.arange(table.n)
    covariates = table.baseline[:, None] if include_baseline_covariate \
        else np.empty((table.n, 0))
    p_values = {m.id: np.empty(hi - lo) for m in methods}
    runtimes = {m.id: 0.0 for m in methods}
    agg: dict[str, dict] = {m.id: {} for m in methods}
    for trial in range(lo, hi):
        arms = sample_sequence(spec, substream(seed, _GEN, trial))
        data = TrialDataset(
            arms=arms,
            outcomes=table.outcomes[rows, arms],
            covariates=covariates,
            grid=spec.grid,
            endpoint=table.endpoint,
        )
        results = _run_methods_on_trial(data, spec, methods, candidates, seed, trial)
        for mid, (p, rt, d) in results.items():
            p_values[mid][trial - lo] = p
            runtimes[mid] += rt
            for key in ("separated_refits", "nonconverged_refits", "redrawn_sequences"):
                if key in d:
                    agg[mid][key] = agg[mid].get(key, 0) + d[key]
        if progress and (trial + 1) % progress == 0:
            print(f"[{name}] {trial + 1}/{n_sim} trials", flush=True)
    return lo, p_values, runtimes, agg


def _replay_trial_range_star(args):
    return _replay_trial_range(*args)


def simulate_from_potential_outcomes(
    table: PotentialOutcomeTable,
    spec: RandomizationSpec,
    methods: tuple[TestMethod, ...],
    candidates: CandidateSet,
    alpha: float = 0.05,
    n_sim: int = 1000,
    seed: int = 1,
    include_baseline_covariate: bool = True,
    sort_by_baseline: bool = False,
    name: str = "potential_outcomes",
    workers: int = 1,
    progress=None,
) -> StudyResult:
    """Replay trials against a fixed table of potential outcomes.

    Each simulated trial differs only by its treatment sequence: row i
    reveals the outcome of patient i under their assigned dose.  With
    ``sort_by_baseline`` the rows are enrolled in increasing baseline
    order, which acts as a systematic time trend.
    """
    if table.n != spec.n:
        raise ValueError(f"table has {table.n} rows but the procedure expects {spec.n}")
    if table.k != spec.grid.k:
        raise ValueError(f"table has {table.k} outcome columns for {spec.grid.k} arms")
    if sort_by_baseline:
        table = table.sorted_by_baseline()

    if workers > 1 and n_sim > 1:
        from concurrent.futures import ProcessPoolExecutor

        ranges = _chunk_ranges(n_sim, workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = sorted(
                pool.map(_replay_trial_range_star,
                         [(table, spec, methods, candidates, seed, lo, hi,
                           include_baseline_covariate, name, n_sim)
                          for lo, hi in ranges]),
                key=lambda part: part[0],
            )
    else:
        parts = [_replay_trial_range(table, spec, methods, candidates, seed,
                                     0, n_sim, include_baseline_covariate,
                                     name, n_sim, progress=progress)]
    p_values = {m.id: np.concatenate([part[1][m.id] for part in parts]) for m in methods}
    runtimes = {m.id: sum(part[2][m.id] for part in parts) for m in methods}
    agg: dict[str, dict] = {m.id: {} for m in methods}
    for part in parts:
        for mid, d in part[3].items():
            for key, val in d.items():
                agg[mid][key] = agg[mid].get(key, 0) + val

    summaries = []
    for m in methods:
        rate = float(np.mean(p_values[m.id] < alpha))
        summaries.append(MethodSummary(
            method_id=m.id, number=m.number, rejection_rate=rate,
            mcse=float(np.sqrt(rate * (1 - rate) / n_sim)),
            n_sim=n_sim, alpha=alpha,
            mean_runtime_s=runtimes[m.id] / n_sim, diagnostics=agg[m.id],
        ))
    return StudyResult(
        name=name, sample_size=spec.n, procedure=spec.procedure,
        time_trend="sorted_baseline" if sort_by_baseline else "none",
        alpha=alpha, p0=float("nan"), pk=float("nan"),
        n_sim=n_sim, n_rand=max((m.n_rand for m in methods if m.is_randomization), default=0),
        seed=seed, methods=summaries, separation={}, p_values=p_values,
    )


def synthetic_potential_table(
    n: int,
    grid: DoseGrid,
    rng: np.random.Generator,
    effect: float = 8.0,
    ed50: float = 150.0,
    baseline_mean: float = 55.0,
    baseline_sd: float = 8.0,
    baseline_slope: float = 0.8,
    patient_sd: float = 4.0,
    noise_sd: float = 3.0,
    constant_across_doses: bool = False,
) -> PotentialOutcomeTable:
    """Synthetic continuous potential-outcomes table for demos and tests.

    Patient-level curves are emax shapes with shared ED50, individual
    random intercepts, a baseline effect, and per-cell noise.  With
    ``constant_across_doses`` every row is flat (the strong null holds
    by construction).
    """
    baseline = rng.normal(baseline_mean, baseline_sd, size=n)
    intercept = rng.normal(0.0, patient_sd, size=n)
    doses = grid.as_array()
    curve = effect * doses / (ed50 + doses)
    if constant_across_doses:
        curve = np.zeros_like(curve)
    noise = rng.normal(0.0, noise_sd, size=(n, grid.k))
    if constant_across_doses:
        noise = noise[:, [0]] * np.ones((1, grid.k))
    outcomes = (
        baseline_slope * baseline[:, None] + intercept[:, None] + curve[None, :] + noise
    )
    return PotentialOutcomeTable(outcomes=outcomes, baseline=baseline,
                                 endpoint="continuous")


# ---------------------------------------------------------------------------
# Configuration serialization (shared by CLI and presets)
# ---------------------------------------------------------------------------

def scenario_to_dict(config: ScenarioConfig) -> dict:
    spec = config.spec
    d = {
        "name": config.name,
        "doses": list(spec.grid.doses),
        "procedure": spec.procedure,
        "n": spec.n,
        "p0": config.p0,
        "pk": config.pk,
        "emax_ed50": config.emax_ed50,
        "covariate_coef": config.covariate_coef,
        "covariate_in_analysis": config.covariate_in_analysis,
        "time_trend": config.time_trend,
        "alpha": config.alpha,
        "n_sim": config.n_sim,
        "n_rand": config.n_rand,
        "seed": config.seed,
        "methods": [_method_dict(m) for m in config.methods],
        "candidates": [_model_dict(m) for m in config.candidates.models],
    }
    if spec.targets is not None:
        d["targets"] = list(spec.targets)
    if spec.block is not None:
        d["block"] = list(spec.block)
    if spec.procedure == "cr":
        if spec.weights is not None:
            d["weights"] = list(spec.weights)
        elif spec.probs is not None:
            d["probs"] = list(spec.probs)
    return d


def _method_dict(method: TestMethod):
    extras = {}
    if method.df is not None:
        extras["df"] = method.df
    if method.pvalue_rule != "plain":
        extras["pvalue_rule"] = method.pvalue_rule
    if method.freeze_contrasts:
        extras["freeze_contrasts"] = True
    if not extras:
        return method.id
    return {"id": method.id, **extras}


def _method_from_entry(entry, n_rand: int) -> TestMethod:
    if isinstance(entry, str):
        return TestMethod(id=entry, n_rand=n_rand)
    entry = dict(entry)
    return TestMethod(id=entry.pop("id"), n_rand=int(entry.pop("n_rand", n_rand)), **entry)


def _model_dict(model: CandidateModel) -> dict:
    out = {"shape": model.shape, "name": model.name}
    for key in ("theta0", "theta1", "theta2", "h", "delta1", "delta2"):
        val = getattr(model, key)
        if val is not None and not (key in ("theta0",) and val == 0.0) \
                and not (key == "theta1" and val == 1.0):
            out[key] = val
    if model.shape == "beta":
        out["scale"] = model.scale
    if model.shape == "loglinear":
        out["offset"] = model.offset
    return out


def scenario_from_dict(d: dict) -> ScenarioConfig:
    d = dict(d)
    grid = DoseGrid(doses=tuple(d.pop("doses")))
    spec = RandomizationSpec(
        procedure=d.pop("procedure"),
        grid=grid,
        n=int(d.pop("n")),
        targets=tuple(d["targets"]) if "targets" in d else None,
        block=tuple(d["block"]) if "block" in d else None,
        probs=tuple(d["probs"]) if "probs" in d else None,
        weights=tuple(d["weights"]) if "weights" in d else None,
    )
    for leftover in ("targets", "block", "probs", "weights"):
        d.pop(leftover, None)
    n_rand = int(d.pop("n_rand", 1000))
    method_entries = d.pop("methods", None)
    methods = tuple(_method_from_entry(e, n_rand) for e in method_entries) \
        if method_entries else default_methods(n_rand)
    cand_cfg = d.pop("candidates", None)
    candidates = candidate_set_from_config(cand_cfg) if cand_cfg else default_candidate_set()
    return ScenarioConfig(
        spec=spec, n_rand=n_rand, methods=methods, candidates=candidates, **d
    )
