"""Multilevel regression and poststratification.

Four variants differ in which cells are poststratified and where the cell
counts come from:

    S    cells seen in the nonprobability sample, known population counts
    P    every population cell, known counts
    R    cells seen in the reference sample, counts from WFPBB synthetic
         populations (one count vector per posterior draw)
    INT  every population cell, known counts, with the estimated inclusion
         probability added to the outcome model as a numeric predictor and
         as a varying intercept over its rounded values
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cells import CellTable, Microdata, resolve_groups, stack_samples
from .design import EstimateSummary, PropensityFit
from .errors import DataError
from .formula import ModelTerms, parse_formula
from .hb import (
    McmcConfig,
    OutcomeModelSpec,
    PosteriorDraws,
    cell_means,
    logistic_cell_probability,
    rhat,
    sample_posterior_linear,
    sample_posterior_logistic,
)
from .wfpbb import estimate_pop_cells, stacked_counts, synthetic_populations

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MrpVariant:
    tag: str
    cell_source: str
    count_source: str
    psi_predictors: bool

    @classmethod
    def from_tag(cls, tag: str) -> "MrpVariant":
        tag = tag.upper().removeprefix("MRP-")
        table = {
            "S": ("sample", "known"),
            "P": ("population", "known"),
            "R": ("reference", "estimated"),
            "INT": ("population", "known"),
        }
        if tag not in table:
            raise ValueError(f"unknown MRP variant {tag!r}; expected one of S, P, R, INT")
        cells, counts = table[tag]
        return cls(tag, cells, counts, tag == "INT")

    @property
    def method(self) -> str:
        return f"MRP-{self.tag}"


VARIANTS = tuple(MrpVariant.from_tag(t) for t in ("S", "P", "R", "INT"))


# ---------------------------------------------------------------------------
# closed-form shrinkage


def shrinkage_factors(sample: CellTable, sigma_theta: float, sigma: float | np.ndarray | None = None) -> np.ndarray:
    """delta_j = sigma_j^2 / (n_j sigma_theta^2), sigma_j^2 from the cells unless given."""
    if sigma_theta <= 0:
        raise ValueError("sigma_theta must be positive")
    if np.any(sample.counts <= 0):
        raise DataError("sample table contains an empty cell")
    s2 = sample.filled_variances() if sigma is None else np.broadcast_to(np.asarray(sigma, float) ** 2, sample.counts.shape)
    return s2 / (sample.counts * sigma_theta**2)


def shrinkage_estimate(
    sample: CellTable,
    sigma_theta: float,
    population: CellTable,
    groups=None,
    sigma: float | np.ndarray | None = None,
    exact: bool = False,
) -> list[EstimateSummary]:
    """Closed-form partially pooled MRP estimator.

    theta_j = (ybar_j + delta_j m) / (1 + delta_j) with m the sample mean
    ybar_s (or, with ``exact=True``, the precision-weighted mean
    sum(ybar_j/(1+delta_j)) / sum(1/(1+delta_j))). Group estimates average
    theta_j over sampled cells with population-count weights. The SE uses
    the conditional variance approximation given n and delta.
    """
    grouping = resolve_groups(sample.schema, groups)
    delta = shrinkage_factors(sample, sigma_theta, sigma)
    n = sample.counts
    ybar = sample.means
    s2 = sample.filled_variances() if sigma is None else np.broadcast_to(np.asarray(sigma, float) ** 2, n.shape)
    ntot = n.sum()
    shrink = 1.0 / (1.0 + delta)
    target = (ybar * shrink).sum() / shrink.sum() if exact else (n * ybar).sum() / ntot
    theta = (ybar + delta * target) * shrink
    Nj = population.dense_counts()[sample.cells]
    var_j = shrink**2 * s2 / n + (delta * shrink) ** 2 * n * s2 / ntot**2 + 2 * delta * shrink**2 * s2 / ntot
    out = []
    for label, mask in zip(grouping.all_labels, grouping.masks(sample.cells)):
        m = mask & (Nj > 0)
        Ng = Nj[m].sum()
        if Ng == 0:
            out.append(EstimateSummary.absent(label, "MRP-shrinkage", "no sampled population cells in group"))
            continue
        share = Nj[m] / Ng
        out.append(EstimateSummary.normal(label, "MRP-shrinkage", float(share @ theta[m]), float(np.sqrt(share**2 @ var_j[m]))))
    return out


# ---------------------------------------------------------------------------
# inclusion-probability predictors


@dataclass(frozen=True)
class PsiPredictor:
    """Per-cell estimated inclusion probability and its rounded group id."""

    values: np.ndarray
    groups: np.ndarray
    group_values: np.ndarray
    digits: int = 1

    def members(self) -> dict[float, list[int]]:
        """Rounded value -> cell indices, for cells with a finite value."""
        out: dict[float, list[int]] = {}
        for j, g in enumerate(self.groups):
            if g >= 0:
                out.setdefault(float(self.group_values[g]), []).append(j)
        return out


def build_psi_predictors(source, cells=None, digits: int = 1, schema=None) -> PsiPredictor:
    """Cell-level psi predictors from a posterior, a point fit or raw values.

    ``source`` may be logistic :class:`PosteriorDraws` (posterior medians are
    used; pass ``schema``), a :class:`PropensityFit`, or an array of
    per-cell values. ``cells`` lists the cells that need a value; a missing
    (NaN) value for any of them is an error. Groups are the sorted unique
    values rounded to ``digits`` decimals.
    """
    if isinstance(source, PosteriorDraws):
        if schema is None:
            raise ValueError("schema is required with posterior draws")
        values = np.median(logistic_cell_probability(source, source.info["terms"], schema), axis=0)
    elif isinstance(source, PropensityFit):
        values = np.asarray(source.cell_probability, dtype=float)
    else:
        values = np.asarray(source, dtype=float)
    if cells is not None:
        needed = values[np.asarray(cells, dtype=np.int64)]
        if np.any(~np.isfinite(needed)):
            raise DataError("inclusion probability missing for a prediction cell")
    rounded = np.round(values, digits)
    finite = np.isfinite(rounded)
    group_values = np.unique(rounded[finite])
    groups = np.full(values.shape, -1, dtype=np.int64)
    groups[finite] = np.searchsorted(group_values, rounded[finite])
    return PsiPredictor(values, groups, group_values, digits)


# ---------------------------------------------------------------------------
# poststratification of draws


def poststratify_draws(cell_draws: np.ndarray, weights: np.ndarray, masks: list[np.ndarray]) -> np.ndarray:
    """Per-draw weighted averages, shape (draws, groups).

    ``weights`` is one count per cell or one count vector per draw.
    """
    theta = np.atleast_2d(np.asarray(cell_draws, dtype=float))
    W = np.asarray(weights, dtype=float)
    if np.any(W < 0):
        raise DataError("negative poststratification weight")
    if W.ndim == 1:
        W = np.broadcast_to(W, theta.shape)
    if W.shape != theta.shape:
        raise DataError("weights do not match the draws")
    out = np.empty((theta.shape[0], len(masks)))
    for g, mask in enumerate(masks):
        Wg = W[:, mask]
        tot = Wg.sum(axis=1)
        if np.any(tot <= 0):
            raise DataError(f"group {g} has zero total weight")
        out[:, g] = (Wg * theta[:, mask]).sum(axis=1) / tot
    return out


def summarize_draws(group_draws: np.ndarray, labels: list[str], method: str, note: str = "") -> list[EstimateSummary]:
    out = []
    for g, label in enumerate(labels):
        x = group_draws[:, g]
        if np.all(np.isnan(x)):
            out.append(EstimateSummary.absent(label, method, "no cells in group"))
            continue
        lo, hi = np.quantile(x, [0.025, 0.975])
        out.append(EstimateSummary(label, method, float(x.mean()), float(x.std(ddof=1)), float(lo), float(hi), note))
    return out


# ---------------------------------------------------------------------------
# full MRP


@dataclass
class MrpResult:
    variant: MrpVariant
    summaries: list[EstimateSummary]
    draws: PosteriorDraws
    group_draws: np.ndarray
    cells: np.ndarray
    rhat: dict[str, float]
    flagged: bool
    flag_reason: str = ""
    psi: PsiPredictor | None = None
    inclusion_draws: PosteriorDraws | None = None
    extra: dict = field(default_factory=dict)

    @property
    def max_rhat(self) -> float:
        return max(self.rhat.values()) if self.rhat else float("nan")


def inclusion_psi(
    sample: Microdata,
    reference: Microdata,
    terms: ModelTerms,
    cfg: McmcConfig,
    digits: int = 1,
) -> tuple[PsiPredictor, PosteriorDraws]:
    """Posterior-median inclusion probabilities for every schema cell.

    Fits the Bayesian logistic model to the stacked samples. Reference
    weights are rescaled to sum to the reference sample size so the
    probabilities stay on a scale where one-digit rounding is informative.
    """
    stacked = stack_samples(sample, reference, normalize=True)
    draws = sample_posterior_logistic(ModelTerms(main=terms.main), stacked, cfg)
    return build_psi_predictors(draws, digits=digits, schema=sample.schema), draws


def _convergence_flag(draws: PosteriorDraws, rh: dict[str, float], rhat_max: float = 1.2, coef_mult: float = 10.0) -> str:
    bad = [k for k, v in rh.items() if not v <= rhat_max]
    if bad:
        return f"rhat>{rhat_max} for {bad[:5]}"
    scales = draws.info.get("coef_scale")
    names = draws.info.get("fixed_names")
    if scales is not None and names:
        med = np.median(draws.columns(names), axis=0)
        big = [n for n, m, s in zip(names, med, scales) if abs(m) > coef_mult * s]
        if big:
            return f"|coefficient| > {coef_mult} x prior scale for {big[:5]}"
    return ""


def mrp_fit(
    variant: MrpVariant | str,
    sample: Microdata,
    population: CellTable | None,
    reference: Microdata | None = None,
    spec: OutcomeModelSpec | ModelTerms | str = "",
    cfg: McmcConfig = McmcConfig(),
    groups=None,
    L: int = 100,
    N: int | None = None,
    psi_digits: int = 1,
    synthetic: list[CellTable] | None = None,
    draws: PosteriorDraws | None = None,
) -> MrpResult:
    """Fit the outcome model and poststratify under one MRP variant.

    ``population`` supplies known cell counts (S, P, INT); variant R instead
    estimates counts from ``reference`` (weights default to N/n_ref) with L
    WFPBB synthetic populations, unless precomputed tables are passed in
    ``synthetic``. ``groups`` may be a list of groupings; their
    summaries are concatenated with the overall row once. Each posterior draw is paired with a uniformly chosen
    synthetic population. Pass ``draws`` from an earlier fit of the same
    outcome model to skip sampling (not for INT, whose model differs). Estimates are posterior means, SEs posterior sds
    and intervals the central 95% quantile intervals.
    """
    if isinstance(variant, str):
        variant = MrpVariant.from_tag(variant)
    if not isinstance(spec, OutcomeModelSpec):
        spec = OutcomeModelSpec(spec if isinstance(spec, ModelTerms) else parse_formula(spec))
    schema = sample.schema
    groupings = [resolve_groups(schema, g) for g in groups] if isinstance(groups, (list, tuple)) else [resolve_groups(schema, groups)]
    if variant.count_source == "known" and population is None:
        raise DataError(f"{variant.method} needs known population cell counts")
    if variant.tag in ("R", "INT") and reference is None and synthetic is None:
        raise DataError(f"{variant.method} needs a reference sample")
    if sample.outcome is None:
        raise DataError("sample has no outcome")

    psi = None
    incl_draws = None
    if variant.psi_predictors:
        incl_cfg = replace(cfg, seed=cfg.seed + 7919)
        psi, incl_draws = inclusion_psi(sample, reference, spec.terms, incl_cfg, psi_digits)
        spec = replace(spec, terms=spec.terms.with_psi(), psi_values=psi.values, psi_groups=psi.groups)

    if draws is None or variant.psi_predictors:
        draws = sample_posterior_linear(spec, sample, cfg)
    theta_all = cell_means(draws, spec, schema)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 104729]))
    if variant.cell_source == "sample":
        seen = np.unique(sample.cells[~np.isnan(sample.outcome)])
        dense = population.dense_counts()
        cells = seen[dense[seen] > 0]
        weights = dense[cells]
    elif variant.cell_source == "population":
        cells = population.cells[population.counts > 0]
        weights = population.counts[population.counts > 0]
    else:
        if synthetic is None:
            base = reference.weight
            total = N if N is not None else (int(round(population.total)) if population is not None else None)
            if base is None:
                if total is None:
                    raise DataError("MRP-R needs reference weights or the population size N")
                base = np.full(len(reference), total / len(reference))
            if total is None:
                total = int(round(base.sum()))
            pops = synthetic_populations(base, total, L, rng)
            synthetic = estimate_pop_cells(pops, reference)
        cells, M = stacked_counts(synthetic)
        pick = rng.integers(len(synthetic), size=theta_all.shape[0])
        weights = M[pick]
    if cells.size == 0:
        raise DataError(f"{variant.method}: no cells to poststratify")
    theta = theta_all[:, cells]
    masks, labels = [], []
    for grouping in groupings:
        for label, mask in zip(grouping.all_labels, grouping.masks(cells)):
            if label not in labels:
                labels.append(label)
                masks.append(mask)
    group_draws = np.full((theta.shape[0], len(masks)), np.nan)
    for g, mask in enumerate(masks):
        W = weights[..., mask]
        if mask.any() and np.all(W.sum(axis=-1) > 0):
            group_draws[:, g] = poststratify_draws(theta[:, mask], W, [np.ones(mask.sum(), bool)])[:, 0]
    rh = rhat(draws)
    reason = _convergence_flag(draws, rh)
    summaries = summarize_draws(group_draws, labels, variant.method, reason and f"flagged: {reason}")
    return MrpResult(variant, summaries, draws, group_draws, cells, rh, bool(reason), reason, psi, incl_draws)


def mrp_estimate(*args, **kwargs) -> list[EstimateSummary]:
    """Like :func:`mrp_fit` but returns only the estimate summaries."""
    return mrp_fit(*args, **kwargs).summaries
