"""MCMC for the hierarchical linear outcome model and the logistic inclusion model.

The linear model is

    y_i = b0 + x_c(i)' beta + sum_f u_f[g_f(c(i))] + e_i,   e_i ~ N(0, sigma^2)

with normal priors on b0 and beta, u_f ~ N(0, tau_f^2), tau_f half-normal
and sigma exponential. Every predictor is constant within a cell, so with
normal errors the likelihood only needs per-cell counts, sums and sums of
squares. Sampling is blocked Gibbs: one joint normal draw for all location
parameters, then univariate slice updates of sigma and each tau_f on the
log scale. Cauchy errors are handled through the t(1) scale mixture.

The logistic model uses adaptive random-walk Metropolis started at the
penalised maximum likelihood fit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .cells import Microdata
from .design import _aliased_columns, _expit, logistic_irls
from .errors import DataError, NumericalError
from .formula import ModelTerms, fixed_design, parse_formula, varying_index

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PriorSpec:
    """Priors for the linear outcome model.

    ``coef_scale`` is a scalar or one scale per fixed design column.
    ``sigma_rate`` is the exponential rate of the residual sd and
    ``tau_scale`` the half-normal scale of each varying-intercept sd.
    """

    intercept_loc: float = 0.0
    intercept_scale: float = 10.0
    coef_scale: float | Sequence[float] = 2.5
    sigma_rate: float = 1.0
    tau_scale: float = 1.0

    def __post_init__(self):
        scales = np.atleast_1d(np.asarray(self.coef_scale, dtype=float))
        if self.intercept_scale <= 0 or np.any(scales <= 0) or self.sigma_rate <= 0 or self.tau_scale <= 0:
            raise ValueError("prior scales and rates must be positive")

    @classmethod
    def weakly_informative(cls, y: np.ndarray, X: np.ndarray) -> "PriorSpec":
        """Data-scaled defaults.

        Intercept N(mean(y) at mean predictors, 2.5 sd(y)); coefficient k
        N(0, 2.5 sd(y)/sd(x_k)); residual sd Exponential(1/sd(y)); varying
        intercept sd half-normal with scale sd(y). Columns constant in the
        data use 2.5 sd(y).
        """
        sy = float(np.std(y, ddof=1)) if y.size > 1 else 1.0
        if not np.isfinite(sy) or sy <= 0:
            sy = 1.0
        sx = np.std(X, axis=0, ddof=1) if X.shape[0] > 1 else np.ones(X.shape[1])
        sx = np.where(sx > 0, sx, 1.0)
        loc = float(np.mean(y)) if y.size else 0.0
        return cls(loc, 2.5 * sy, tuple(2.5 * sy / sx), 1.0 / sy, sy)


@dataclass(frozen=True)
class OutcomeModelSpec:
    """Outcome model: formula terms, priors and options.

    ``psi_values``/``psi_groups`` give the numeric inclusion probability and
    its rounded group id for every schema cell and are required when the
    terms use ``psi``. ``priors=None`` selects :meth:`PriorSpec.weakly_informative`.
    ``sigma_fixed`` and ``tau_fixed`` pin those parameters.
    """

    terms: ModelTerms
    priors: PriorSpec | None = None
    errors: str = "normal"
    psi_values: np.ndarray | None = None
    psi_groups: np.ndarray | None = None
    sigma_fixed: float | None = None
    tau_fixed: float | None = None

    def __post_init__(self):
        if isinstance(self.terms, str):
            object.__setattr__(self, "terms", parse_formula(self.terms))
        if self.errors not in ("normal", "cauchy"):
            raise ValueError("errors must be 'normal' or 'cauchy'")


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 2
    iterations: int = 2000
    warmup: int = 1000
    seed: int = 0
    proposal_scale: float = 1.0

    def __post_init__(self):
        if self.chains < 2:
            raise ValueError("at least two chains are required")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("warmup must be smaller than iterations")
        if self.proposal_scale <= 0:
            raise ValueError("proposal scale must be positive")

    @property
    def kept(self) -> int:
        return self.iterations - self.warmup


@dataclass(frozen=True)
class PosteriorDraws:
    """Post-warmup draws, one row per kept iteration across all chains."""

    names: list[str]
    draws: np.ndarray
    chain: np.ndarray
    warmup: int
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.draws.shape != (self.chain.size, len(self.names)):
            raise ValueError("draw matrix shape does not match names/chains")
        if not np.all(np.isfinite(self.draws)):
            raise NumericalError("non-finite posterior draws")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def columns(self, names: Sequence[str]) -> np.ndarray:
        return self.draws[:, [self.names.index(n) for n in names]]

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain).size)

    def by_chain(self, name: str | int) -> np.ndarray:
        """(chains, draws per chain) array for one parameter."""
        k = self.names.index(name) if isinstance(name, str) else name
        return np.stack([self.draws[self.chain == c, k] for c in np.unique(self.chain)])

    def long_rows(self):
        """Yield (chain, iteration, parameter, value) in a stable order."""
        for c in np.unique(self.chain):
            block = self.draws[self.chain == c]
            for it, row in enumerate(block, start=self.warmup + 1):
                for name, value in zip(self.names, row):
                    yield int(c), it, name, float(value)


# ---------------------------------------------------------------------------
# slice sampling


def slice_sample(logp, x0: float, rng: np.random.Generator, width: float = 1.0, max_steps: int = 64) -> float:
    """One univariate slice-sampling update with stepping out and shrinkage."""
    f0 = logp(x0)
    level = f0 - rng.standard_exponential()
    left = x0 - width * rng.random()
    right = left + width
    j = int(rng.random() * max_steps)
    k = max_steps - 1 - j
    while j > 0 and logp(left) > level:
        left -= width
        j -= 1
    while k > 0 and logp(right) > level:
        right += width
        k -= 1
    while True:
        x1 = left + (right - left) * rng.random()
        if logp(x1) > level:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
        if right - left < 1e-12:
            return x0


# ---------------------------------------------------------------------------
# linear model


@dataclass
class _LinearProblem:
    names: list[str]
    n_fixed: int
    factor_sizes: list[tuple[str, int]]
    Zcell: np.ndarray  # per schema cell: [1, x - xbar, onehots]
    xbar: np.ndarray
    ybar: float
    prior_mean: np.ndarray
    prior_prec_fixed: np.ndarray
    sigma_rate: float
    tau_scales: list[float]
    n: int
    ZtZ: np.ndarray | None
    Zty: np.ndarray | None
    yty: float
    Zunit: np.ndarray | None
    yunit: np.ndarray | None
    sd_y: float
    fixed_names: list[str]
    coef_scale: np.ndarray


def _build_linear(spec: OutcomeModelSpec, data: Microdata) -> _LinearProblem:
    schema = data.schema
    terms = spec.terms
    X, fixed_names = fixed_design(schema, terms, spec.psi_values)
    onehots = []
    factor_sizes = []
    ranef_names = []
    for f in terms.varying:
        idx, labels = varying_index(schema, f, spec.psi_groups)
        G = len(labels)
        oh = np.zeros((schema.n_cells, G))
        oh[np.arange(schema.n_cells), idx] = 1.0
        onehots.append(oh)
        factor_sizes.append((f, G))
        ranef_names += [f"u[{f}][{lab}]" for lab in labels]
    if data.outcome is None:
        y = np.zeros(0)
        cells = np.zeros(0, dtype=np.int64)
    else:
        obs = ~np.isnan(data.outcome)
        y = data.outcome[obs]
        cells = data.cells[obs]
    n = y.size
    Xu = X[cells]
    xbar = Xu.mean(axis=0) if n else np.zeros(X.shape[1])
    ybar = float(y.mean()) if n else 0.0
    priors = spec.priors or PriorSpec.weakly_informative(y, Xu)
    coef_scale = np.broadcast_to(np.asarray(priors.coef_scale, dtype=float), (X.shape[1],)).copy()
    Zcell = np.column_stack([np.ones(schema.n_cells), X - xbar, *onehots]) if onehots else np.column_stack([np.ones(schema.n_cells), X - xbar])
    q = Zcell.shape[1]
    prior_mean = np.zeros(q)
    # intercept is on the centred scale, y is centred at ybar
    prior_mean[0] = priors.intercept_loc - ybar
    prec_fixed = np.concatenate([[1.0 / priors.intercept_scale**2], 1.0 / coef_scale**2])
    ZtZ = Zty = Zunit = yunit = None
    yc = y - ybar
    if spec.errors == "normal":
        occ, inv = np.unique(cells, return_inverse=True)
        cnt = np.bincount(inv, minlength=occ.size).astype(float)
        sums = np.bincount(inv, weights=yc, minlength=occ.size)
        Zo = Zcell[occ]
        ZtZ = (Zo * cnt[:, None]).T @ Zo
        Zty = Zo.T @ sums
        yty = float(yc @ yc)
    else:
        Zunit = Zcell[cells]
        yunit = yc
        yty = float(yc @ yc)
    sd_y = float(np.std(y, ddof=1)) if n > 1 else 1.0
    names = ["(Intercept)", *fixed_names, *ranef_names]
    return _LinearProblem(
        names, X.shape[1], factor_sizes, Zcell, xbar, ybar, prior_mean, prec_fixed,
        priors.sigma_rate, [priors.tau_scale] * len(factor_sizes), n, ZtZ, Zty, yty, Zunit, yunit,
        sd_y if np.isfinite(sd_y) and sd_y > 0 else 1.0, fixed_names, coef_scale,
    )


def _draw_normal(Q: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    L = linalg.cholesky(Q, lower=True, check_finite=False)
    mean = linalg.cho_solve((L, True), b, check_finite=False)
    z = rng.standard_normal(b.size)
    return mean + linalg.solve_triangular(L, z, lower=True, trans="T", check_finite=False)


def _run_linear_chain(prob: _LinearProblem, spec: OutcomeModelSpec, cfg: McmcConfig, rng: np.random.Generator) -> np.ndarray:
    q = prob.Zcell.shape[1]
    nf = 1 + prob.n_fixed
    blocks = []
    start = nf
    for _, G in prob.factor_sizes:
        blocks.append(slice(start, start + G))
        start += G
    sigma = spec.sigma_fixed if spec.sigma_fixed is not None else prob.sd_y * math.exp(0.5 * rng.standard_normal())
    taus = [
        spec.tau_fixed if spec.tau_fixed is not None else s * math.exp(0.5 * rng.standard_normal()) * 0.5
        for s in prob.tau_scales
    ]
    cauchy = spec.errors == "cauchy"
    lam = np.ones(prob.n) if cauchy else None
    n = prob.n
    rate = prob.sigma_rate
    out = np.empty((cfg.kept, q + len(taus) + 1))
    prec = np.empty(q)
    prec[:nf] = prob.prior_prec_fixed
    for it in range(cfg.iterations):
        for blk, tau in zip(blocks, taus):
            prec[blk] = 1.0 / tau**2
        if cauchy:
            Zl = prob.Zunit * lam[:, None]
            ZtZ = Zl.T @ prob.Zunit
            Zty = Zl.T @ prob.yunit
        else:
            ZtZ, Zty = prob.ZtZ, prob.Zty
        s2 = sigma * sigma
        Q = ZtZ / s2
        Q[np.diag_indices(q)] += prec
        b = Zty / s2 + prec * prob.prior_mean
        theta = _draw_normal(Q, b, rng)
        if cauchy:
            r = prob.yunit - prob.Zunit @ theta
            rss = float(lam @ (r * r))
        else:
            rss = max(prob.yty - 2.0 * float(theta @ Zty) + float(theta @ ZtZ @ theta), 0.0)
        if spec.sigma_fixed is None:

            def logp_sigma(ls):
                s = math.exp(ls)
                return -n * ls - rss / (2.0 * s * s) - rate * s + ls

            sigma = math.exp(slice_sample(logp_sigma, math.log(sigma), rng))
        if cauchy:
            # t_1 scale mixture: lambda_i | . ~ Gamma((1 + 1)/2, rate (1 + r_i^2/sigma^2)/2)
            lam = rng.gamma(1.0, 1.0 / (0.5 * (1.0 + r * r / sigma**2)))
        if spec.tau_fixed is None:
            for k, (blk, scale) in enumerate(zip(blocks, prob.tau_scales)):
                G = blk.stop - blk.start
                ssu = float(theta[blk] @ theta[blk])

                def logp_tau(lt, G=G, ssu=ssu, scale=scale):
                    t = math.exp(lt)
                    return -G * lt - ssu / (2.0 * t * t) - t * t / (2.0 * scale * scale) + lt

                taus[k] = math.exp(slice_sample(logp_tau, math.log(taus[k]), rng))
        if it >= cfg.warmup:
            row = out[it - cfg.warmup]
            row[:q] = theta
            row[q:q + len(taus)] = taus
            row[-1] = sigma
    # back to the uncentred intercept on the original y scale
    beta = out[:, 1:nf]
    out[:, 0] = out[:, 0] + prob.ybar - beta @ prob.xbar
    return out


def sample_posterior_linear(spec: OutcomeModelSpec, data: Microdata, cfg: McmcConfig = McmcConfig()) -> PosteriorDraws:
    """Blocked Gibbs sampler for the hierarchical linear outcome model.

    Returns draws of the intercept (original scale), every fixed
    coefficient, every varying intercept ``u[f][level]``, each varying
    intercept sd ``sd[f]`` and the residual sd ``sigma``.
    """
    prob = _build_linear(spec, data)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    chains = []
    for c, ss in enumerate(seeds):
        chains.append(_run_linear_chain(prob, spec, cfg, np.random.default_rng(ss)))
    draws = np.concatenate(chains)
    if draws.shape[0] == 0:
        raise NumericalError("no post-warmup draws")
    names = prob.names + [f"sd[{f}]" for f, _ in prob.factor_sizes] + ["sigma"]
    chain = np.repeat(np.arange(cfg.chains), cfg.kept)
    info = {
        "n": prob.n, "n_fixed": prob.n_fixed, "factors": prob.factor_sizes, "sd_y": prob.sd_y,
        "fixed_names": prob.fixed_names, "coef_scale": prob.coef_scale,
    }
    return PosteriorDraws(names, draws, chain, cfg.warmup, info)


def cell_means(draws: PosteriorDraws, spec: OutcomeModelSpec, schema) -> np.ndarray:
    """Residual-free linear predictor for every schema cell, one row per draw."""
    X, fixed_names = fixed_design(schema, spec.terms, spec.psi_values)
    eta = draws["(Intercept)"][:, None] + draws.columns(fixed_names) @ X.T if fixed_names else np.repeat(draws["(Intercept)"][:, None], schema.n_cells, axis=1)
    for f in spec.terms.varying:
        idx, labels = varying_index(schema, f, spec.psi_groups)
        U = draws.columns([f"u[{f}][{lab}]" for lab in labels])
        eta = eta + U[:, idx]
    return eta


# ---------------------------------------------------------------------------
# logistic model


def sample_posterior_logistic(
    terms,
    concatenated: Microdata,
    cfg: McmcConfig = McmcConfig(),
    prior_scale: float = 2.5,
) -> PosteriorDraws:
    """Adaptive random-walk Metropolis for a weighted logistic inclusion model.

    Priors: N(0, prior_scale^2) on the intercept of the centred design and
    N(0, (prior_scale / sd(x_k))^2) on each coefficient. The proposal is a
    scaled copy of the posterior-mode covariance; the scale is adapted
    during warmup toward an acceptance rate of 0.3 (kept within 0.2-0.4 when
    achievable) and frozen afterwards. Draws are reported for the
    uncentred intercept and coefficients.
    """
    if isinstance(terms, str):
        terms = parse_formula(terms)
    elif not isinstance(terms, ModelTerms):
        terms = ModelTerms(main=tuple(terms))
    if concatenated.included is None:
        raise DataError("concatenated data needs an 'included' indicator")
    schema = concatenated.schema
    Xall, fixed_names = fixed_design(schema, terms)
    w = np.ones(len(concatenated)) if concatenated.weight is None else concatenated.weight
    cells = concatenated.cells
    occ, inv = np.unique(cells, return_inverse=True)
    s = np.bincount(inv, weights=w * concatenated.included, minlength=occ.size)
    t = np.bincount(inv, weights=w, minlength=occ.size)
    Xo = Xall[occ]
    alias = _aliased_columns(np.column_stack([np.ones(occ.size), Xo]))[1:] if Xo.shape[1] else np.zeros(0, bool)
    if alias.any():
        raise DataError(f"aliased inclusion-model terms: {[n for n, a in zip(fixed_names, alias) if a]}")
    xbar = (t @ Xo) / t.sum()
    sx = np.sqrt(np.maximum((t @ (Xo - xbar) ** 2) / t.sum(), 0.0))
    sx = np.where(sx > 0, sx, 1.0)
    Z = np.column_stack([np.ones(occ.size), Xo - xbar])
    prior_var = np.concatenate([[prior_scale**2], (prior_scale / sx) ** 2])
    mode, cov, _, _ = logistic_irls(Z, s, t, ridge=1.0 / prior_var)
    d = Z.shape[1]
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(d))

    def logpost(a):
        eta = Z @ a
        return float(s @ eta - t @ np.logaddexp(0.0, eta) - 0.5 * (a * a / prior_var).sum())

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    chains = []
    accept_rates = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        scale = cfg.proposal_scale * 2.38 / math.sqrt(d)
        a = mode + chol @ rng.standard_normal(d)
        lp = logpost(a)
        kept = np.empty((cfg.kept, d))
        acc_window = 0
        acc_kept = 0
        for it in range(cfg.iterations):
            prop = a + scale * (chol @ rng.standard_normal(d))
            lp_prop = logpost(prop)
            if math.log(rng.random()) < lp_prop - lp:
                a, lp = prop, lp_prop
                acc_window += 1
                if it >= cfg.warmup:
                    acc_kept += 1
            if it < cfg.warmup and (it + 1) % 50 == 0:
                rate = acc_window / 50
                if rate < 0.2 or rate > 0.4:
                    scale *= math.exp(rate - 0.3) if rate > 0.4 else math.exp(2.0 * (rate - 0.3))
                acc_window = 0
            if it >= cfg.warmup:
                kept[it - cfg.warmup] = a
        rate = acc_kept / cfg.kept
        accept_rates.append(rate)
        if not 0.05 < rate < 0.95:
            raise NumericalError(f"logistic sampler tuning failed: acceptance rate {rate:.3f}")
        chains.append(kept)
    draws = np.concatenate(chains)
    draws[:, 0] = draws[:, 0] - draws[:, 1:] @ xbar
    names = ["(Intercept)", *fixed_names]
    chain = np.repeat(np.arange(cfg.chains), cfg.kept)
    return PosteriorDraws(names, draws, chain, cfg.warmup, {"acceptance": accept_rates, "terms": terms})


def logistic_cell_probability(draws: PosteriorDraws, terms: ModelTerms, schema) -> np.ndarray:
    """Inclusion probability for every schema cell, one row per draw."""
    X, names = fixed_design(schema, terms)
    eta = draws["(Intercept)"][:, None] + (draws.columns(names) @ X.T if names else 0.0)
    return _expit(eta)


# ---------------------------------------------------------------------------
# diagnostics


def rhat(draws: PosteriorDraws) -> dict[str, float]:
    """Split-chain potential scale reduction factor per parameter.

    Each chain is split in half; with m pieces of length n,
    R = sqrt(((n-1)/n W + B/n) / W). A parameter constant across all draws
    gets R = 1.
    """
    if draws.n_chains < 2:
        raise ValueError("rhat needs at least two chains")
    per_chain = draws.draws.shape[0] // draws.n_chains
    if per_chain < 100:
        raise ValueError("rhat needs at least 100 post-warmup draws per chain")
    out = {}
    for k, name in enumerate(draws.names):
        x = draws.by_chain(k)
        half = x.shape[1] // 2
        pieces = np.concatenate([x[:, :half], x[:, half:2 * half]])
        n = pieces.shape[1]
        W = pieces.var(axis=1, ddof=1).mean()
        B = n * pieces.mean(axis=1).var(ddof=1)
        if W <= 0:
            out[name] = 1.0 if B <= 0 else float("inf")
            continue
        out[name] = float(np.sqrt(((n - 1) / n * W + B / n) / W))
    return out


def effective_sample_size(x: np.ndarray) -> float:
    """ESS of a (chains, draws) array via Geyer's initial positive sequence."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = x.shape
    xc = x - x.mean(axis=1, keepdims=True)
    W = x.var(axis=1, ddof=1).mean()
    B = n * x.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * W + B / n
    if var_plus <= 0:
        return float(m * n)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft, axis=1)
    acov = np.fft.irfft(f * np.conj(f), nfft, axis=1)[:, :n] / n
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        total += pair
    tau = max(2.0 * total - 1.0, 1.0 / (m * n))
    return float(m * n / tau)


def mcse(x: np.ndarray) -> float:
    """Monte Carlo standard error of the posterior mean for (chains, draws)."""
    x = np.atleast_2d(x)
    return float(x.std(ddof=1) / math.sqrt(effective_sample_size(x)))
