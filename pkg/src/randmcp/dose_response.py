"""Candidate dose-response shapes on the linear-predictor (logit) scale.

A candidate model maps dose to a linear predictor value.  Probabilities
are obtained only by explicitly applying the inverse link; nothing in
this module leaves the linear-predictor scale.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.special import expit, logit

SHAPES = ("emax", "sigemax", "beta", "linear", "loglinear", "flat")


@dataclass(frozen=True)
class DoseGrid:
    """Ordered dose levels of a trial, placebo first."""

    doses: tuple[float, ...]

    def __post_init__(self):
        doses = tuple(float(d) for d in self.doses)
        object.__setattr__(self, "doses", doses)
        if len(doses) < 2:
            raise ValueError("a dose grid needs at least two arms")
        if doses[0] != 0.0:
            raise ValueError("the first dose level must be 0 (placebo)")
        if any(b <= a for a, b in zip(doses, doses[1:])):
            raise ValueError(f"dose levels must be strictly increasing, got {doses}")

    @property
    def k(self) -> int:
        return len(self.doses)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.doses, dtype=float)


@dataclass(frozen=True)
class CandidateModel:
    """One named dose-response shape with its parameters.

    ``theta0`` is the placebo level and ``theta1`` the effect size, both
    on the linear-predictor scale.  The remaining parameters are shape
    specific: ``theta2`` is the half-effect dose for emax/sigemax, ``h``
    the sigemax steepness, ``delta1``/``delta2`` the beta-shape
    exponents with ``scale`` its dose normalizer, and ``offset`` the
    loglinear dose shift that keeps dose 0 finite.
    """

    shape: str
    theta0: float = 0.0
    theta1: float = 1.0
    theta2: float | None = None
    h: float | None = None
    delta1: float | None = None
    delta2: float | None = None
    scale: float = 120.0
    offset: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}, expected one of {SHAPES}")
        if self.shape in ("emax", "sigemax"):
            if self.theta2 is None or self.theta2 <= 0:
                raise ValueError(f"{self.shape} requires theta2 > 0")
        if self.shape == "sigemax":
            if self.h is None or self.h <= 0:
                raise ValueError("sigemax requires h > 0")
        if self.shape == "beta":
            if self.delta1 is None or self.delta2 is None or self.delta1 <= 0 or self.delta2 <= 0:
                raise ValueError("beta requires delta1 > 0 and delta2 > 0")
            if self.scale <= 0:
                raise ValueError("beta requires scale > 0")
        if self.shape == "loglinear" and self.offset <= 0:
            raise ValueError("loglinear requires offset > 0")
        if not self.name:
            object.__setattr__(self, "name", self.shape)

    @property
    def is_flat(self) -> bool:
        return self.shape == "flat"


def eval_model(model: CandidateModel, dose) -> np.ndarray | float:
    """Evaluate a candidate shape at one or more doses (linear-predictor scale)."""
    x = np.asarray(dose, dtype=float)
    if np.any(x < 0):
        raise ValueError("doses must be nonnegative")
    if model.shape == "flat":
        out = np.full_like(x, model.theta0)
    elif model.shape == "linear":
        out = model.theta0 + model.theta1 * x
    elif model.shape == "loglinear":
        out = model.theta0 + model.theta1 * np.log(x + model.offset)
    elif model.shape == "emax":
        out = model.theta0 + model.theta1 * x / (model.theta2 + x)
    elif model.shape == "sigemax":
        xh = np.power(x, model.h)
        out = model.theta0 + model.theta1 * xh / (model.theta2 ** model.h + xh)
    elif model.shape == "beta":
        if np.any(x > model.scale):
            raise ValueError(
                f"beta shape is only defined for doses in [0, {model.scale}], got {np.max(x)}"
            )
        d1, d2 = model.delta1, model.delta2
        # Normalizer chosen so the humped part attains max 1 inside (0, scale).
        norm = (d1 + d2) ** (d1 + d2) / (d1 ** d1 * d2 ** d2)
        u = x / model.scale
        out = model.theta0 + model.theta1 * norm * u ** d1 * (1.0 - u) ** d2
    else:  # pragma: no cover - guarded by __post_init__
        raise ValueError(f"unknown shape {model.shape!r}")
    return out if out.ndim else float(out)


def calibrate_emax(p0: float, pk: float, d_max: float, theta2: float) -> tuple[float, float]:
    """Solve for the emax intercept/effect hitting target response rates.

    Returns ``(theta0, theta1)`` such that the emax curve with the given
    ``theta2`` passes through probability ``p0`` at dose 0 and ``pk`` at
    ``d_max`` after the inverse logit.
    """
    for label, p in (("p0", p0), ("pk", pk)):
        if not 0.0 < p < 1.0:
            raise ValueError(f"{label} must lie strictly inside (0, 1), got {p}")
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    if theta2 <= 0:
        raise ValueError("theta2 must be positive")
    theta0 = float(logit(p0))
    theta1 = float((logit(pk) - logit(p0)) * (theta2 + d_max) / d_max)
    return theta0, theta1


def standardized_shape(model: CandidateModel, grid: DoseGrid) -> np.ndarray:
    """Mean vector of a candidate shape over the dose grid.

    Downstream contrast computation is invariant to affine transforms of
    this vector, so candidate models are usually specified with
    ``theta0=0, theta1=1``.
    """
    return np.asarray(eval_model(model, grid.as_array()), dtype=float)


@dataclass(frozen=True)
class CandidateSet:
    """The candidate shapes a multiple contrast test is optimized against."""

    models: tuple[CandidateModel, ...]

    def __post_init__(self):
        models = tuple(self.models)
        object.__setattr__(self, "models", models)
        if not models:
            raise ValueError("candidate set must contain at least one model")
        names = [m.name for m in models]
        if len(set(names)) != len(names):
            raise ValueError(f"candidate names must be unique, got {names}")

    @property
    def size(self) -> int:
        return len(self.models)

    def non_flat(self) -> tuple[CandidateModel, ...]:
        return tuple(m for m in self.models if not m.is_flat)


def default_candidate_set() -> CandidateSet:
    """Representative five-shape candidate set for a 0-100 mg dose range.

    Two emax shapes, two sigmoid emax shapes and one (non-monotone) beta
    shape.  Parameter values are conventional choices covering early
    saturation through late steep onset; override per trial via config.
    """
    return CandidateSet(
        models=(
            CandidateModel(shape="emax", theta2=10.0, name="emax_ed50_10"),
            CandidateModel(shape="emax", theta2=40.0, name="emax_ed50_40"),
            CandidateModel(shape="sigemax", theta2=25.0, h=3.0, name="sigemax_25_3"),
            CandidateModel(shape="sigemax", theta2=60.0, h=5.0, name="sigemax_60_5"),
            CandidateModel(shape="beta", delta1=1.5, delta2=1.5, scale=120.0, name="beta_1.5_1.5"),
        )
    )


def wide_range_candidate_set(d_max: float) -> CandidateSet:
    """Candidate shapes for an arbitrary dose range (no beta shape).

    Flat, linear, log-linear, emax and sigmoid-emax shapes with
    half-effect doses placed relative to the top dose.  The flat shape
    carries no contrast and is skipped by contrast builders.
    """
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    return CandidateSet(
        models=(
            CandidateModel(shape="flat", name="flat"),
            CandidateModel(shape="linear", name="linear"),
            CandidateModel(shape="loglinear", offset=max(d_max / 100.0, 1e-6), name="loglinear"),
            CandidateModel(shape="emax", theta2=0.15 * d_max, name="emax"),
            CandidateModel(shape="sigemax", theta2=0.3 * d_max, h=4.0, name="sigemax"),
        )
    )


def model_from_dict(entry: dict) -> CandidateModel:
    """Build a candidate model from a config mapping ({'shape': ..., params...})."""
    known = {f.name for f in CandidateModel.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(entry) - known
    if unknown:
        raise ValueError(f"unknown candidate model fields: {sorted(unknown)}")
    if "shape" not in entry:
        raise ValueError("candidate model entry needs a 'shape' field")
    return CandidateModel(**entry)


def candidate_set_from_config(entries: Iterable[dict]) -> CandidateSet:
    return CandidateSet(models=tuple(model_from_dict(dict(e)) for e in entries))


def inverse_logit(eta) -> np.ndarray | float:
    """Map linear-predictor values to probabilities."""
    out = expit(np.asarray(eta, dtype=float))
    return out if out.ndim else float(out)
