"""Analytic bias and conditional variance of UnW, PS and shrinkage MRP.

A population is described cell by cell: size N_j, response (inclusion)
proportion psi_j, mean among respondents Ybar_jR, mean among
nonrespondents Ybar_jM and a within-cell sd. With psibar = sum (N_j/N) psi_j
and Ybar_R the respondent mean,

    A = sum (N_j/N) (Ybar_jR - Ybar_R)(psi_j - psibar) / psibar
    B = sum (N_j/N) (1 - psi_j)(Ybar_jR - Ybar_jM)

so bias(UnW) = A + B and bias(PS) = B. The MRP bias combines the PS bias
damped by 1/(1 + delta_j) with a pull toward the respondent mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cells import CellTable, CovariateSchema
from .errors import DataError


@dataclass(frozen=True)
class PopulationSpec:
    """Per-cell population description; ``schema`` and ``cells`` optionally name the cells."""

    N: np.ndarray
    psi: np.ndarray
    mean_r: np.ndarray
    mean_m: np.ndarray
    sd: np.ndarray
    schema: CovariateSchema | None = None
    cells: np.ndarray | None = field(default=None)

    def __post_init__(self):
        arrs = {k: np.atleast_1d(np.asarray(getattr(self, k), dtype=float)) for k in ("N", "psi", "mean_r", "mean_m", "sd")}
        J = arrs["N"].size
        if any(a.shape != (J,) for a in arrs.values()):
            raise DataError("population spec columns have different lengths")
        if J == 0:
            raise DataError("population spec has no cells")
        if np.any(arrs["N"] <= 0) or np.any(arrs["N"] != np.round(arrs["N"])):
            raise DataError("cell sizes N_j must be positive integers")
        if np.any(arrs["psi"] <= 0) or np.any(arrs["psi"] > 1):
            raise DataError("psi_j must lie in (0, 1]")
        if np.any(arrs["sd"] <= 0):
            raise DataError("within-cell sd must be positive")
        for k, a in arrs.items():
            a.setflags(write=False)
            object.__setattr__(self, k, a)
        if self.cells is not None:
            object.__setattr__(self, "cells", np.asarray(self.cells, dtype=np.int64))
        if self.psi_bar <= 0:
            raise DataError("overall response proportion psibar is zero")

    @property
    def total(self) -> float:
        return float(self.N.sum())

    @property
    def share(self) -> np.ndarray:
        return self.N / self.N.sum()

    @property
    def psi_bar(self) -> float:
        return float(self.share @ self.psi)

    @property
    def cell_means(self) -> np.ndarray:
        """Ybar_j = psi_j Ybar_jR + (1 - psi_j) Ybar_jM."""
        return self.psi * self.mean_r + (1 - self.psi) * self.mean_m

    @property
    def mean(self) -> float:
        return float(self.share @ self.cell_means)

    @property
    def respondent_mean(self) -> float:
        """Ybar_R = sum N_j psi_j Ybar_jR / (N psibar)."""
        return float((self.share * self.psi) @ self.mean_r / self.psi_bar)

    def expected_counts(self, n: float | None = None) -> np.ndarray:
        """E[n_j] = n N_j psi_j / sum N_k psi_k; n defaults to the expected number of respondents."""
        mass = self.N * self.psi
        if n is None:
            n = mass.sum()
        return n * mass / mass.sum()


@dataclass(frozen=True)
class BiasRecord:
    A: float
    B: float
    bias_unw: float
    bias_ps: float
    bias_mrp: float
    mrp_term1: float
    mrp_term2: float


@dataclass(frozen=True)
class VarianceRecord:
    """``var_mrp`` is the per-cell three-term approximation; ``var_mrp_exact``
    is the variance of the shrinkage estimator written as a linear
    combination of independent cell means, which keeps the correlation
    that the shared pooled mean induces across cells."""

    var_unw: float
    var_ps: float
    var_mrp: float
    var_mrp_exact: float


@dataclass(frozen=True)
class StochasticBias:
    """Covariance-form bias approximations; ``approximate`` is always True."""

    bias_unw: float
    bias_ps: float
    approximate: bool = True


def shrinkage_delta(sd: np.ndarray, n_j: np.ndarray, sigma_theta: float) -> np.ndarray:
    if sigma_theta <= 0:
        raise ValueError("sigma_theta must be positive")
    n_j = np.asarray(n_j, dtype=float)
    if np.any(n_j <= 0):
        raise DataError("shrinkage factor needs n_j > 0")
    return np.asarray(sd, dtype=float) ** 2 / (n_j * sigma_theta**2)


def analytic_bias(spec: PopulationSpec, sigma_theta: float, n_j=None, n: float | None = None) -> BiasRecord:
    """Exact A, B and the three estimator biases.

    delta_j uses ``n_j`` when given and otherwise the expected respondent
    counts (see :meth:`PopulationSpec.expected_counts`). The MRP pull term
    weights cells by N_j/N like the first term.
    """
    w = spec.share
    pb = spec.psi_bar
    yr = spec.respondent_mean
    A = float(w @ ((spec.mean_r - yr) * (spec.psi - pb)) / pb)
    gap = (1 - spec.psi) * (spec.mean_r - spec.mean_m)
    B = float(w @ gap)
    nj = spec.expected_counts(n) if n_j is None else np.asarray(n_j, dtype=float)
    delta = shrinkage_delta(spec.sd, nj, sigma_theta)
    term1 = float(w @ (gap / (1 + delta)))
    pull = yr - spec.psi * spec.mean_r - (1 - spec.psi) * spec.mean_m
    term2 = float(w @ (delta / (1 + delta) * pull))
    return BiasRecord(A, B, A + B, B, term1 + term2, term1, term2)


def stochastic_bias(spec: PopulationSpec) -> StochasticBias:
    """Approximate biases from response-outcome covariances.

    bias(UnW) ~ Cov(psi, y) / psibar with the between-cell covariance
    sum (N_j/N)(psi_j - psibar)(Ybar_j - Ybar); bias(PS) ~ sum (N_j/N)
    Cov_j(psi, y)/psi_j with the within-cell covariance of the response
    indicator and outcome, psi_j (1 - psi_j)(Ybar_jR - Ybar_jM). The first
    ignores within-cell covariance and so matches A + B only when it is zero.
    """
    w = spec.share
    pb = spec.psi_bar
    cov = float(w @ ((spec.psi - pb) * (spec.cell_means - spec.mean)))
    within = spec.psi * (1 - spec.psi) * (spec.mean_r - spec.mean_m) / spec.psi
    return StochasticBias(cov / pb, float(w @ within))


def conditional_variances(sample: CellTable, population: CellTable, delta=None) -> VarianceRecord:
    """Variances of UnW, PS and shrinkage MRP given n_j and delta_j.

    Cell variances s_j^2 come from the sample table (pooled where a cell has
    one unit); N_j from the population table. ``delta`` defaults to zero.
    """
    if len(sample) == 0:
        raise DataError("empty sample table")
    n_j = sample.counts
    if np.any(n_j <= 0):
        raise DataError("sample cell with n_j = 0")
    s2 = sample.filled_variances()
    if np.any(~np.isfinite(s2)):
        raise DataError("cell variances unavailable")
    pos = population.lookup(sample.cells)
    if np.any(pos < 0) or np.any(population.counts[pos] <= 0):
        raise DataError("sample cell missing from the population table")
    N_j = population.counts[pos]
    n = n_j.sum()
    N = N_j.sum()
    d = np.zeros(n_j.size) if delta is None else np.broadcast_to(np.asarray(delta, dtype=float), n_j.shape)
    var_unw = float((n_j * s2).sum() / n**2)
    var_ps = float(((N_j / N) ** 2 * (1 - n_j / N_j) * s2 / n_j).sum())
    k = 1 / (1 + d)
    inner = k**2 * s2 / n_j + (d * k) ** 2 * n_j * s2 / n**2 + 2 * d * k**2 * s2 / n
    var_mrp = float(((N_j / N) ** 2 * inner).sum())
    coef = (N_j / N) * k + (n_j / n) * float((N_j / N) @ (d * k))
    var_exact = float((coef**2 * s2 / n_j).sum())
    return VarianceRecord(var_unw, var_ps, var_mrp, var_exact)


@dataclass(frozen=True)
class MonteCarloBias:
    bias: float
    mcse: float
    reps: int


def simulate_bias(spec: PopulationSpec, reps: int, rng: np.random.Generator, estimator: str = "PS") -> MonteCarloBias:
    """Monte Carlo bias of UnW or PS under Bernoulli(psi_j) response.

    Each replication draws respondent counts R_j ~ Binomial(N_j, psi_j) and
    respondent cell means ybar_j ~ N(Ybar_jR, sd_j^2 / R_j). Cells without
    respondents drop out and PS renormalizes over the rest.
    """
    if estimator not in ("PS", "UnW"):
        raise ValueError("estimator must be 'PS' or 'UnW'")
    R = rng.binomial(spec.N.astype(np.int64), spec.psi, size=(reps, spec.N.size)).astype(float)
    seen = R > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ybar = spec.mean_r + spec.sd * rng.standard_normal(R.shape) / np.sqrt(np.where(seen, R, 1.0))
    ybar = np.where(seen, ybar, 0.0)
    if estimator == "PS":
        Wt = spec.N * seen
    else:
        Wt = R
    est = (Wt * ybar).sum(axis=1) / Wt.sum(axis=1)
    err = est - spec.mean
    return MonteCarloBias(float(err.mean()), float(err.std(ddof=1) / np.sqrt(reps)), reps)
