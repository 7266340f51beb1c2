"""Optimal contrast coefficients for multiple contrast tests.

For a candidate mean shape ``mu0`` and a covariance ``S`` of the arm
mean estimates, the optimal contrast maximizes the standardized signal
``c'mu0 / sqrt(c'Sc)`` among zero-sum coefficient vectors.  The closed
form is ``c ∝ S^-1 (mu0 - mu_bar 1)`` with ``mu_bar`` the S^-1-weighted
mean of ``mu0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dose_response import CandidateSet, DoseGrid, standardized_shape

ZERO_SUM_TOL = 1e-10


class DegenerateShapeError(ValueError):
    """The candidate mean vector is constant, so no contrast exists."""


class NoContrastsError(ValueError):
    """Every candidate was flat; the contrast matrix would be empty."""


@dataclass(frozen=True)
class ContrastMatrix:
    """Per-candidate optimal contrasts, one unit-norm zero-sum row each."""

    vectors: np.ndarray  # (M, k)
    labels: tuple[str, ...]
    weight_source: str  # "arm_sizes" | "fitted_covariance"
    skipped: tuple[str, ...] = ()  # flat candidates left out

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        object.__setattr__(self, "vectors", v)
        if v.shape[0] != len(self.labels):
            raise ValueError("one label per contrast row required")
        sums = np.abs(v.sum(axis=1))
        norms = np.linalg.norm(v, axis=1)
        if np.any(sums > ZERO_SUM_TOL):
            raise ValueError(f"contrast rows must sum to zero, max |sum| = {sums.max():.3e}")
        if np.any(np.abs(norms - 1.0) > ZERO_SUM_TOL):
            raise ValueError("contrast rows must have unit Euclidean norm")

    @property
    def m(self) -> int:
        return self.vectors.shape[0]


def optimal_contrast(mu0: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Closed-form optimal contrast for one mean shape.

    Parameters
    ----------
    mu0 : candidate mean vector over the k arms.
    S : symmetric positive-definite covariance of the arm mean estimates.

    Returns the unit-norm, zero-sum maximizer of ``c'mu0 / sqrt(c'Sc)``
    with its sign fixed so ``c'mu0 > 0``.
    """
    mu0 = np.asarray(mu0, dtype=float)
    S = np.asarray(S, dtype=float)
    k = mu0.shape[0]
    if S.shape != (k, k):
        raise ValueError(f"covariance shape {S.shape} does not match mean length {k}")
    if np.ptp(mu0) == 0.0:
        raise DegenerateShapeError("candidate mean vector is constant (flat shape)")
    try:
        cho = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"covariance is not positive definite: {exc}") from exc

    ones = np.ones(k)
    s_inv_mu = _cho_solve(cho, mu0)
    s_inv_one = _cho_solve(cho, ones)
    shift = (mu0 @ s_inv_one) / (ones @ s_inv_one)
    c = s_inv_mu - shift * s_inv_one
    norm = np.linalg.norm(c)
    if norm == 0.0:
        raise DegenerateShapeError("optimal contrast collapsed to zero")
    c = c / norm
    if c @ mu0 < 0:
        c = -c
    # Exact zero-sum up to rounding; remove the float residue.
    c = c - c.sum() / k
    return c / np.linalg.norm(c)


def _cho_solve(cho: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = np.linalg.solve(cho, b)
    return np.linalg.solve(cho.T, y)


def contrast_matrix(
    candidates: CandidateSet,
    grid: DoseGrid,
    arm_sizes=None,
    covariance=None,
) -> ContrastMatrix:
    """Optimal contrasts for every non-flat candidate shape.

    Exactly one of ``arm_sizes`` (design weights, giving the diagonal
    covariance diag(1/n_j)) or ``covariance`` (a fitted covariance of
    the arm mean estimates) must be provided.  Flat candidates carry no
    shape information and are skipped with a record in ``skipped``.
    """
    if (arm_sizes is None) == (covariance is None):
        raise ValueError("provide exactly one of arm_sizes or covariance")
    if arm_sizes is not None:
        n = np.asarray(arm_sizes, dtype=float)
        if n.shape != (grid.k,):
            raise ValueError(f"expected {grid.k} arm sizes, got shape {n.shape}")
        if np.any(n < 1):
            raise ValueError("every arm needs at least one patient")
        S = np.diag(1.0 / n)
        source = "arm_sizes"
    else:
        S = np.asarray(covariance, dtype=float)
        source = "fitted_covariance"

    rows, labels, skipped = [], [], []
    for model in candidates.models:
        if model.is_flat:
            skipped.append(model.name)
            continue
        mu0 = standardized_shape(model, grid)
        rows.append(optimal_contrast(mu0, S))
        labels.append(model.name)
    if not rows:
        raise NoContrastsError("all candidate shapes are flat; no contrasts can be formed")
    return ContrastMatrix(
        vectors=np.vstack(rows),
        labels=tuple(labels),
        weight_source=source,
        skipped=tuple(skipped),
    )
