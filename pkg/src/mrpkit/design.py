"""Design-based and weighting estimators with replication variance.

Covers the unweighted and poststratified cell estimators, the logistic
inclusion (pseudo-propensity) model, IPW, raking, GREG, the doubly robust
estimator and the delete-a-group jackknife. All weighted means use the
Hajek (ratio) form and are therefore invariant to rescaling the weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import linalg, stats

from .cells import CellTable, Grouping, Microdata, resolve_groups
from .errors import ConvergenceError, DataError, NumericalError, SeparationError
from .formula import ModelTerms, fixed_design, parse_formula

log = logging.getLogger(__name__)

Z95 = float(stats.norm.ppf(0.975))


@dataclass(frozen=True)
class EstimateSummary:
    group: str
    method: str
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    note: str = ""

    @classmethod
    def normal(cls, group: str, method: str, estimate: float, se: float, note: str = "") -> "EstimateSummary":
        se = float(max(se, 0.0)) if np.isfinite(se) else float("nan")
        return cls(group, method, float(estimate), se, float(estimate - Z95 * se), float(estimate + Z95 * se), note)

    @classmethod
    def absent(cls, group: str, method: str, note: str) -> "EstimateSummary":
        nan = float("nan")
        return cls(group, method, nan, nan, nan, nan, note)


def _terms(terms) -> ModelTerms:
    if isinstance(terms, ModelTerms):
        return terms
    if isinstance(terms, str):
        return parse_formula(terms)
    return ModelTerms(main=tuple(terms))


# ---------------------------------------------------------------------------
# cell estimators


def unweighted_mean(sample: CellTable, groups=None, method: str = "UnW", se: str = "srs") -> list[EstimateSummary]:
    """Sample mean of cell means weighted by sample cell sizes.

    ``se="srs"`` uses the unit-level sample variance s^2/n, the sampling
    variance of the mean when every unit is equally likely to be included.
    ``se="conditional"`` uses sum_j n_j s_j^2 / n^2, the variance given the
    realised cell sizes, which leaves out the between-cell spread.
    """
    if se not in ("srs", "conditional"):
        raise ValueError(f"unknown se form {se!r}")
    grouping = resolve_groups(sample.schema, groups)
    n = sample.counts
    ok = n > 0
    s2 = sample.filled_variances()
    out = []
    for label, mask in zip(grouping.all_labels, grouping.masks(sample.cells)):
        m = mask & ok
        ng = n[m].sum()
        if ng == 0:
            out.append(EstimateSummary.absent(label, method, "empty group"))
            continue
        est = float((n[m] * sample.means[m]).sum() / ng)
        within = float((n[m] * s2[m]).sum())
        if se == "conditional":
            var = within / ng**2
        elif ng > 1:
            # total sum of squares = within-cell + between-cell parts
            ss = float(((n[m] - 1) * s2[m]).sum() + (n[m] * (sample.means[m] - est) ** 2).sum())
            var = ss / (ng - 1) / ng
        else:
            var = float("nan")
        out.append(EstimateSummary.normal(label, method, est, np.sqrt(var)))
    return out


def poststratified_mean(sample: CellTable, population: CellTable, groups=None, method: str = "PS") -> list[EstimateSummary]:
    """Population-count weighted average of sample cell means.

    Population cells with no sample units are dropped and the weights are
    renormalised over the covered cells; the uncovered population share is
    reported in each summary's note.
    """
    if sample.schema != population.schema:
        raise DataError("sample and population tables use different schemas")
    grouping = resolve_groups(sample.schema, groups)
    pop = population.cells[population.counts > 0]
    N_all = population.counts[population.counts > 0]
    pos = sample.lookup(pop)
    covered = pos >= 0
    if not covered.any():
        raise DataError("sample and population tables share no cells")
    pos_c = pos[covered]
    n = sample.counts[pos_c]
    ybar = sample.means[pos_c]
    s2 = sample.filled_variances()[pos_c]
    Nc = N_all[covered]
    fpc = np.clip(1.0 - n / Nc, 0.0, 1.0)
    out = []
    for label, mask_all in zip(grouping.all_labels, grouping.masks(pop)):
        mask = mask_all[covered]
        Ng_total = N_all[mask_all].sum()
        Ng = Nc[mask].sum()
        if Ng == 0:
            out.append(EstimateSummary.absent(label, method, "no sampled cells in group"))
            continue
        share = Nc[mask] / Ng
        est = float((share * ybar[mask]).sum())
        var = float((share**2 * fpc[mask] * s2[mask] / n[mask]).sum())
        uncovered = 1.0 - Ng / Ng_total
        out.append(EstimateSummary.normal(label, method, est, np.sqrt(var), f"uncovered_mass={uncovered:.6g}"))
    return out


# ---------------------------------------------------------------------------
# inclusion model


@dataclass(frozen=True)
class PropensityFit:
    """Weighted logistic fit of the inclusion indicator on cell covariates.

    ``cell_probability`` holds the fitted logistic probability for every
    schema cell; ``fitted`` the same evaluated at each unit of the fitting
    data. With ``scale="odds"`` the inclusion probability is p / (1 - p),
    the appropriate conversion when the reference units are weighted up to
    the population.
    """

    names: list[str]
    coefficients: np.ndarray
    cov: np.ndarray
    cell_probability: np.ndarray
    fitted: np.ndarray
    converged: bool
    iterations: int
    terms: ModelTerms
    scale: str = "probability"
    aliased: list[str] = field(default_factory=list)

    def inclusion(self, cells) -> np.ndarray:
        """Estimated inclusion probability for the given linear cell indices."""
        p = self.cell_probability[np.asarray(cells, dtype=np.int64)]
        if self.scale == "odds":
            p = p / (1.0 - p)
        return np.clip(p, 1e-12, 1.0 - 1e-12)


def _expit(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def _aliased_columns(X: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Boolean mask of columns that are linear combinations of earlier ones."""
    if X.shape[1] == 0:
        return np.zeros(0, bool)
    _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int((diag > tol * max(diag[0], 1.0)).sum()) if diag.size else 0
    keep = np.zeros(X.shape[1], bool)
    keep[np.sort(piv[:rank])] = True
    return ~keep


def logistic_irls(
    X: np.ndarray,
    successes: np.ndarray,
    trials: np.ndarray,
    ridge: float | np.ndarray = 1e-8,
    prior_mean: np.ndarray | None = None,
    max_iter: int = 100,
) -> tuple[np.ndarray, np.ndarray, bool, int]:
    """Penalised binomial logistic regression by IRLS.

    Solves max sum_j [s_j eta_j - t_j log(1 + e^eta_j)] - ridge/2 |beta - m|^2
    and returns (beta, covariance, converged, iterations). Converges when the
    largest absolute score is below 1e-8 or the relative change in the
    objective falls under 1e-10.
    """
    p = X.shape[1]
    lam = np.broadcast_to(np.asarray(ridge, dtype=float), (p,))
    m = np.zeros(p) if prior_mean is None else prior_mean
    beta = m.copy()
    prev = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = _expit(eta)
        ll = float(successes @ eta - trials @ np.logaddexp(0.0, eta) - 0.5 * (lam * (beta - m) ** 2).sum())
        score = X.T @ (successes - trials * mu) - lam * (beta - m)
        if np.max(np.abs(score)) < 1e-8 or (np.isfinite(prev) and abs(ll - prev) <= 1e-10 * max(abs(ll), 1.0)):
            converged = True
            break
        prev = ll
        W = trials * mu * (1.0 - mu)
        H = (X * W[:, None]).T @ X + np.diag(lam)
        try:
            step = linalg.solve(H, score, assume_a="pos")
        except linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        beta = beta + step
    mu = _expit(X @ beta)
    W = trials * mu * (1.0 - mu)
    H = (X * W[:, None]).T @ X + np.diag(lam)
    cov = np.linalg.pinv(H)
    return beta, cov, converged, it


def fit_inclusion_model(
    concatenated: Microdata,
    terms=None,
    scale: str = "probability",
    ridge: float = 1e-8,
    max_iter: int = 100,
) -> PropensityFit:
    """Weighted logistic regression of ``included`` on cell covariates.

    ``concatenated`` stacks the nonprobability units (included = 1) and the
    reference units (included = 0); unit weights default to 1. The fit runs
    on cell-aggregated weighted counts, which gives the same likelihood as
    the unit-level fit because every predictor is constant within a cell.
    ``terms`` defaults to main effects of every schema variable; pass
    ``"1"`` for an intercept-only model.
    """
    if concatenated.included is None:
        raise DataError("concatenated data needs an 'included' indicator")
    if scale not in ("probability", "odds"):
        raise ValueError(f"unknown scale {scale!r}")
    schema = concatenated.schema
    terms = _terms(schema.names if terms is None else terms)
    Xc, names = fixed_design(schema, terms)
    Xc = np.column_stack([np.ones(schema.n_cells), Xc])
    names = ["(Intercept)", *names]
    w = np.ones(len(concatenated)) if concatenated.weight is None else concatenated.weight
    cells = concatenated.cells
    inc = concatenated.included.astype(float)
    occupied, inv = np.unique(cells, return_inverse=True)
    s = np.bincount(inv, weights=w * inc, minlength=occupied.size)
    t = np.bincount(inv, weights=w, minlength=occupied.size)
    X = Xc[occupied]
    alias = _aliased_columns(X)
    aliased = [nm for nm, a in zip(names, alias) if a]
    if aliased:
        log.info("dropping aliased terms from inclusion model: %s", aliased)
    keep = ~alias
    beta_k, cov_k, converged, it = logistic_irls(X[:, keep], s, t, ridge=ridge, max_iter=max_iter)
    # under separation the objective flattens out, so the relative-change test
    # can report convergence while the coefficients run off to infinity
    if np.any(np.abs(beta_k) > 15):
        raise SeparationError("inclusion model diverges (|coefficient| > 15): covariates separate the samples")
    if not converged:
        raise ConvergenceError(f"inclusion model did not converge in {max_iter} iterations")
    beta = np.zeros(len(names))
    beta[keep] = beta_k
    cov = np.zeros((len(names), len(names)))
    cov[np.ix_(keep, keep)] = cov_k
    cell_p = np.clip(_expit(Xc @ beta), 1e-15, 1 - 1e-15)
    return PropensityFit(names, beta, cov, cell_p, cell_p[cells], converged, it, terms, scale, aliased)


# ---------------------------------------------------------------------------
# weighting estimators


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    target: float
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(~np.isfinite(v)) or np.any(v <= 0):
            raise DataError("weights must be positive and finite")
        object.__setattr__(self, "values", v)


def _hajek_by_group(y, w, cells, grouping: Grouping, method: str, note: str = "") -> list[EstimateSummary]:
    out = []
    for label, mask in zip(grouping.all_labels, grouping.masks(cells)):
        if not mask.any():
            out.append(EstimateSummary.absent(label, method, "empty group"))
            continue
        wg, yg = w[mask], y[mask]
        W = wg.sum()
        est = float((wg * yg).sum() / W)
        var = float((wg**2 * (yg - est) ** 2).sum() / W**2)
        out.append(EstimateSummary.normal(label, method, est, np.sqrt(var), note))
    return out


def _observed(sample: Microdata) -> tuple[np.ndarray, np.ndarray]:
    if sample.outcome is None:
        raise DataError("sample has no outcome column")
    obs = ~np.isnan(sample.outcome)
    return obs, sample.outcome


def trim_weights(w: np.ndarray, trim: tuple[float, float] | None) -> np.ndarray:
    """Winsorise weights at the given lower/upper quantiles."""
    if trim is None:
        return w
    lo, hi = np.quantile(w, trim)
    return np.clip(w, lo, hi)


def ipw_weights(sample: Microdata, fit, trim: tuple[float, float] | None = None) -> np.ndarray:
    """Inverse inclusion-probability weights for the sample units."""
    if isinstance(fit, PropensityFit):
        psi = fit.inclusion(sample.cells)
    else:
        psi = np.asarray(fit, dtype=float)
        if psi.shape != (len(sample),):
            raise DataError("need one propensity per sample unit")
    if np.any(psi <= 0):
        raise DataError("zero estimated inclusion probability")
    return trim_weights(1.0 / psi, trim)


def ipw_mean(sample: Microdata, fit, groups=None, trim: tuple[float, float] | None = None, method: str = "IPW") -> list[EstimateSummary]:
    """Hajek inverse-probability-weighted means.

    ``fit`` is a :class:`PropensityFit` or an array of per-unit inclusion
    probabilities. ``trim`` winsorises weights at a quantile pair such as
    (0.02, 0.98).
    """
    grouping = resolve_groups(sample.schema, groups)
    obs, y = _observed(sample)
    w = ipw_weights(sample, fit, trim)
    return _hajek_by_group(y[obs], w[obs], sample.cells[obs], grouping, method)


def _margin_array(schema, name, target) -> np.ndarray:
    levels = schema.levels(name)
    if isinstance(target, Mapping):
        arr = np.array([float(target.get(lev, 0.0)) for lev in levels])
    else:
        arr = np.asarray(target, dtype=float)
    if arr.shape != (len(levels),):
        raise DataError(f"margin for {name!r} has {arr.size} entries, expected {len(levels)}")
    return arr


def rake_weights(
    sample: Microdata,
    margins: Mapping[str, Sequence[float]],
    base_weights: WeightVector | np.ndarray | None = None,
    tol: float = 1e-9,
    max_iter: int = 2000,
) -> WeightVector:
    """Iterative proportional fitting of unit weights to marginal totals.

    Convergence means every raked margin total is within ``tol`` (absolute)
    of its target. On reaching ``max_iter`` the returned vector has
    ``converged=False``.
    """
    schema = sample.schema
    if not margins:
        raise DataError("no margins to rake to")
    w = np.ones(len(sample)) if base_weights is None else np.array(getattr(base_weights, "values", base_weights), dtype=float)
    if w.shape != (len(sample),) or np.any(w <= 0):
        raise DataError("base weights must be positive, one per unit")
    targets = {}
    codes = {}
    totals = []
    for name, target in margins.items():
        arr = _margin_array(schema, name, target)
        if np.any(arr < 0):
            raise DataError(f"negative margin total for {name!r}")
        c = sample.column(name)
        present = np.bincount(c, minlength=arr.size) > 0
        if np.any((arr > 0) & ~present):
            missing = [schema.levels(name)[k] for k in np.flatnonzero((arr > 0) & ~present)]
            raise DataError(f"margin {name!r} levels {missing} have no sample units (structural zero)")
        targets[name], codes[name] = arr, c
        totals.append(arr.sum())
    if np.ptp(totals) > 1e-9 * max(totals):
        raise DataError(f"margins disagree on the population total: {totals}")

    def max_error():
        err = 0.0
        for name, arr in targets.items():
            cur = np.bincount(codes[name], weights=w, minlength=arr.size)
            err = max(err, float(np.max(np.abs(cur - arr))))
        return err

    it = 0
    converged = max_error() <= tol
    while not converged and it < max_iter:
        it += 1
        for name, arr in targets.items():
            cur = np.bincount(codes[name], weights=w, minlength=arr.size)
            ratio = np.divide(arr, cur, out=np.zeros_like(arr), where=cur > 0)
            w = w * ratio[codes[name]]
        converged = max_error() <= tol
    if not converged:
        log.warning("raking stopped after %d iterations without meeting tol=%g", it, tol)
    keep = w > 0
    if not keep.all():
        # units in zero-target categories carry no weight; keep them tiny but positive
        w = np.where(keep, w, np.finfo(float).tiny)
    return WeightVector(w, float(totals[0]), converged, it)


def raking_mean(sample: Microdata, margins, groups=None, base_weights=None, trim=None, method: str = "Raking") -> list[EstimateSummary]:
    """Hajek means under raked weights; ``trim`` applies to base weights before raking."""
    grouping = resolve_groups(sample.schema, groups)
    obs, y = _observed(sample)
    base = None if base_weights is None else trim_weights(np.asarray(getattr(base_weights, "values", base_weights), float), trim)
    wv = rake_weights(sample, margins, base)
    note = "" if wv.converged else "raking did not converge"
    return _hajek_by_group(y[obs], wv.values[obs], sample.cells[obs], grouping, method, note)


def _margin_design(schema, names: Sequence[str]) -> ModelTerms:
    return ModelTerms(main=tuple(names))


def greg_weights(sample: Microdata, margins: Mapping[str, Sequence[float]], base_weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Linear calibration (GREG) weights and the fitted coefficient vector.

    The working model is an intercept plus main effects of every margin
    variable. Base weights default to N/n.
    """
    schema = sample.schema
    obs, y = _observed(sample)
    names = list(margins)
    Xc, _ = fixed_design(schema, _margin_design(schema, names))
    Xc = np.column_stack([np.ones(schema.n_cells), Xc])
    totals = []
    for name in names:
        arr = _margin_array(schema, name, margins[name])
        totals.append(arr)
    N = float(totals[0].sum())
    T = np.concatenate([[N]] + [t[1:] for t in totals])
    X = Xc[sample.cells[obs]]
    n = X.shape[0]
    d = np.full(n, N / n) if base_weights is None else np.asarray(getattr(base_weights, "values", base_weights), float)[obs]
    XtDX = (X * d[:, None]).T @ X
    if np.linalg.matrix_rank(XtDX) < X.shape[1]:
        raise DataError("GREG design is rank deficient (a margin level has no sample units)")
    beta = linalg.solve(XtDX, (X * d[:, None]).T @ y[obs], assume_a="pos")
    lam = linalg.solve(XtDX, T - X.T @ d, assume_a="pos")
    w = d * (1.0 + X @ lam)
    return w, beta


def greg_mean(sample: Microdata, population_totals, groups=None, base_weights=None, method: str = "GREG") -> list[EstimateSummary]:
    """Generalised regression estimator with main-effects linear model.

    ``population_totals`` maps each margin variable to its per-level
    population totals. The overall estimate equals
    (1/N)[T'beta + sum_i d_i (y_i - x_i'beta)]; subgroup estimates are
    Hajek means under the calibrated weights.
    """
    grouping = resolve_groups(sample.schema, groups)
    obs, y = _observed(sample)
    w, _ = greg_weights(sample, population_totals, base_weights)
    cells = sample.cells[obs]
    return _hajek_by_group(y[obs], w, cells, grouping, method)


def dr_mean(
    sample: Microdata,
    fit,
    outcome_model,
    population: CellTable,
    groups=None,
    trim: tuple[float, float] | None = None,
    method: str = "DR",
) -> list[EstimateSummary]:
    """Augmented IPW: population mean of linear predictions plus weighted residual mean."""
    schema = sample.schema
    grouping = resolve_groups(schema, groups)
    obs, y = _observed(sample)
    Xc, _ = fixed_design(schema, _terms(outcome_model))
    Xc = np.column_stack([np.ones(schema.n_cells), Xc])
    cells = sample.cells[obs]
    beta = np.linalg.lstsq(Xc[cells], y[obs], rcond=None)[0]
    pred_cell = Xc @ beta
    resid = y[obs] - pred_cell[cells]
    w = ipw_weights(sample, fit, trim)[obs]
    pop_cells = population.cells[population.counts > 0]
    N = population.counts[population.counts > 0]
    pop_masks = grouping.masks(pop_cells)
    out = []
    for label, pm, sm in zip(grouping.all_labels, pop_masks, grouping.masks(cells)):
        if not sm.any() or N[pm].sum() == 0:
            out.append(EstimateSummary.absent(label, method, "empty group"))
            continue
        pred = float((N[pm] * pred_cell[pop_cells[pm]]).sum() / N[pm].sum())
        W = w[sm].sum()
        aug = float((w[sm] * resid[sm]).sum() / W)
        var = float((w[sm] ** 2 * (resid[sm] - aug) ** 2).sum() / W**2)
        out.append(EstimateSummary.normal(label, method, pred + aug, np.sqrt(var)))
    return out


# ---------------------------------------------------------------------------
# jackknife


@dataclass(frozen=True)
class JackknifeResult:
    se: np.ndarray
    replicates: np.ndarray
    n_groups: int
    seed: int
    failed: list[int]


def jackknife_se(
    estimator: Callable[[Microdata], Sequence[float] | Sequence[EstimateSummary]],
    sample: Microdata,
    n_groups: int = 20,
    rng_seed: int = 0,
) -> JackknifeResult:
    """Delete-a-group jackknife standard errors.

    Units are randomly partitioned into ``n_groups`` groups using
    ``rng_seed``; SE^2 = ((G-1)/G) sum_g (theta_(g) - theta_bar)^2 computed
    per estimator output component. Replicates where the estimator raises
    are listed in ``failed`` and left out.
    """
    n = len(sample)
    if n_groups < 2:
        raise ValueError("jackknife needs at least two groups")
    if n_groups > n:
        raise ValueError("more jackknife groups than units")
    rng = np.random.default_rng(rng_seed)
    assign = np.empty(n, dtype=np.int64)
    assign[rng.permutation(n)] = np.arange(n) % n_groups
    reps = []
    failed = []
    for g in range(n_groups):
        try:
            val = estimator(sample.subset(np.flatnonzero(assign != g)))
        except (DataError, NumericalError, ValueError, np.linalg.LinAlgError) as exc:
            log.debug("jackknife replicate %d failed: %s", g, exc)
            failed.append(g)
            continue
        reps.append(_as_values(val))
    if not reps:
        raise NumericalError("every jackknife replicate failed")
    R = np.array(reps, dtype=float)
    G = R.shape[0]
    with np.errstate(invalid="ignore"):
        dev = R - np.nanmean(R, axis=0)
        se = np.sqrt((G - 1) / G * np.nansum(dev**2, axis=0))
    return JackknifeResult(se, R, n_groups, rng_seed, failed)


def _as_values(val) -> np.ndarray:
    val = list(val) if not isinstance(val, np.ndarray) else val
    if len(val) and isinstance(val[0], EstimateSummary):
        return np.array([v.estimate for v in val], dtype=float)
    return np.asarray(val, dtype=float).ravel()


def with_jackknife(summaries: list[EstimateSummary], jk: JackknifeResult) -> list[EstimateSummary]:
    """Replace SEs and normal intervals with jackknife ones."""
    note = f"jackknife G={jk.n_groups} seed={jk.seed}"
    if jk.failed:
        note += f" failed={jk.failed}"
    return [
        s if not np.isfinite(s.estimate) else EstimateSummary.normal(s.group, s.method, s.estimate, float(se), note)
        for s, se in zip(summaries, jk.se)
    ]
