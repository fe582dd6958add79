"""Repeated-sampling simulation of nonprobability-sample estimators.

A fixed finite population with four categorical covariates (age, race,
education, income) and an internet-access indicator is generated once.
Each replication draws an age-stratified nonprobability sample from the
internet users, favouring younger strata, plus a simple random reference
sample, runs the requested estimators for the overall mean and the six age
groups, and scores them against the finite-population truth.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np
import pandas as pd
from scipy import optimize, special

from .cells import CellTable, CovariateSchema, Grouping, Microdata, build_cell_table, stack_samples
from .design import (
    EstimateSummary,
    fit_inclusion_model,
    greg_mean,
    ipw_mean,
    jackknife_se,
    poststratified_mean,
    raking_mean,
    unweighted_mean,
    dr_mean,
    with_jackknife,
)
from .diagnostics import PopulationSpec
from .errors import MrpError
from .formula import fixed_design, parse_formula
from .hb import McmcConfig
from .mrp import mrp_fit
from .wfpbb import estimate_pop_cells, synthetic_populations

log = logging.getLogger(__name__)

METHODS = ("UnW", "PS", "IPW", "GREG", "Raking", "DR", "MRP-S", "MRP-P", "MRP-R", "MRP-INT")
MRP_METHODS = ("MRP-S", "MRP-P", "MRP-R", "MRP-INT")
JACKKNIFE_METHODS = ("IPW", "GREG", "Raking", "DR")

SCHEMA = CovariateSchema([
    ("age", ["18-24", "25-34", "35-44", "45-54", "55-64", "65+"]),
    ("race", ["White", "Black", "Other"]),
    ("edu", ["<HS", "HS", "SomeCollege", "College"]),
    ("inc", ["<15k", "15-25k", "25-35k", "35-50k", "50k+"]),
])

CORRECT_MODEL = "age + race + edu + inc + age*edu + race*inc"
MAIN_EFFECTS = "age + race + edu + inc"

# Built-in joint distribution: fixed age shares, and race/edu/inc given age
# from a log-linear model with older people less educated, income rising
# with education, and lower incomes among Black respondents.
AGE_SHARES = np.array([0.06, 0.14, 0.19, 0.22, 0.19, 0.20])
RACE_LOGIT = np.array([0.0, -1.6, -2.0])
EDU_LOGIT = np.array([-1.0, 0.3, 0.2, 0.1])
INC_LOGIT = np.array([-0.4, -0.2, -0.1, 0.1, 0.4])
AGE_EDU = 0.25     # per step of (age index) x (edu index), negative
EDU_INC = 0.30     # per step of (edu index) x (inc index)
BLACK_INC = -0.25  # Black x (inc index)

# Internet access: logit = c + age + edu + inc effects minus a digital-divide
# term that widens the education gap with age; c is calibrated.
INTERNET_AGE = np.array([1.2, 1.0, 0.7, 0.3, -0.3, -1.3])
INTERNET_EDU = np.array([-1.0, -0.3, 0.3, 0.9])
INTERNET_INC = np.array([-0.9, -0.4, 0.0, 0.4, 0.8])
INTERNET_AGE_EDU = 1.0  # logit drop for the oldest, least educated cell is 3 x this


def cell_distribution() -> np.ndarray:
    """Probability of every schema cell under the built-in joint distribution."""
    keys = SCHEMA.all_keys()
    a, r, e, i = keys.T
    logit = RACE_LOGIT[r] + EDU_LOGIT[e] + INC_LOGIT[i] - AGE_EDU * a * e + EDU_INC * e * i + BLACK_INC * (r == 1) * i
    p = np.exp(logit)
    for k in range(len(AGE_SHARES)):
        m = a == k
        p[m] *= AGE_SHARES[k] / p[m].sum()
    return p / p.sum()


def internet_probability(fraction: float, probs: np.ndarray | None = None) -> np.ndarray:
    """Per-cell internet probability with the intercept set so the population fraction is ``fraction``."""
    if not 0 < fraction <= 1:
        raise ValueError("internet fraction must lie in (0, 1]")
    if fraction == 1:
        return np.ones(SCHEMA.n_cells)
    probs = cell_distribution() if probs is None else probs
    a, _, e, i = SCHEMA.all_keys().T
    eta = INTERNET_AGE[a] + INTERNET_EDU[e] + INTERNET_INC[i] - INTERNET_AGE_EDU * a * (3 - e) / 5
    c = optimize.brentq(lambda c: probs @ special.expit(c + eta) - fraction, -30, 30, xtol=1e-14)
    return special.expit(c + eta)


@dataclass(frozen=True)
class SimConfig:
    N: int = 50_000
    n_nonprob: int = 1000
    n_ref: int = 1000
    internet_fraction: float = 0.65
    rates: tuple[float, ...] = (0.12, 0.31, 0.19, 0.20, 0.13, 0.05)
    coef_low: int = -5
    coef_high: int = 5
    noise_sd: float = 1.0
    scenario: str = "correct"
    replications: int = 50
    replications_closed_form: int = 1000
    seed: int = 0
    L: int = 100
    chains: int = 2
    iterations: int = 2000
    warmup: int = 1000
    jackknife_groups: int = 20
    psi_digits: int = 1

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "rates", rates)
        if len(rates) != len(SCHEMA.levels("age")):
            raise ValueError("need one selection rate per age stratum")
        if any(not 0 < r <= 1 for r in rates):
            raise ValueError("selection rates must lie in (0, 1]")
        if self.replications < 1 or self.replications_closed_form < 1:
            raise ValueError("replications must be at least 1")
        if self.scenario not in ("correct", "incorrect"):
            raise ValueError("scenario must be 'correct' or 'incorrect'")
        if self.coef_low > self.coef_high:
            raise ValueError("empty coefficient range")
        if self.noise_sd < 0:
            raise ValueError("noise sd must be nonnegative")
        if not self.N > max(self.n_nonprob, self.n_ref) > 0:
            raise ValueError("sample sizes must be positive and below N")

    @classmethod
    def from_mapping(cls, values: dict) -> "SimConfig":
        """Build from string values (as read from a key = value file)."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown simulation setting {key!r}")
            default = getattr(cls, key)
            if isinstance(default, tuple):
                kwargs[key] = tuple(float(v) for v in str(raw).replace(",", " ").split())
            elif isinstance(default, bool):
                kwargs[key] = str(raw).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)

    @property
    def outcome_formula(self) -> str:
        return CORRECT_MODEL if self.scenario == "correct" else MAIN_EFFECTS

    @property
    def mcmc(self) -> McmcConfig:
        return McmcConfig(chains=self.chains, iterations=self.iterations, warmup=self.warmup)


@dataclass(frozen=True)
class SimPopulation:
    """Generated population with its truth and cell-level summary."""

    data: Microdata
    internet: np.ndarray
    coefficients: dict[str, float]
    table: CellTable
    spec: PopulationSpec
    truth: dict[str, float]


def _age_grouping() -> Grouping:
    return Grouping.by_variable(SCHEMA, "age")


def generate_population(cfg: SimConfig, rng: np.random.Generator) -> SimPopulation:
    """Draw the finite population, internet indicator and outcome.

    Units are drawn with replacement from the built-in cell distribution.
    The outcome is an intercept plus main effects and the age x edu and
    race x inc interactions (treatment coding), every coefficient drawn
    uniformly from the integer range, plus N(0, noise_sd^2) noise.
    """
    probs = cell_distribution()
    cells = rng.choice(SCHEMA.n_cells, size=cfg.N, p=probs)
    codes = SCHEMA.keys(cells)
    internet = rng.random(cfg.N) < internet_probability(cfg.internet_fraction, probs)[cells]

    X, names = fixed_design(SCHEMA, parse_formula(CORRECT_MODEL))
    coefs = rng.integers(cfg.coef_low, cfg.coef_high + 1, size=X.shape[1] + 1).astype(float)
    mean_cell = coefs[0] + X @ coefs[1:]
    y = mean_cell[cells] + cfg.noise_sd * rng.standard_normal(cfg.N)
    data = Microdata(SCHEMA, codes, y)
    table = build_cell_table(data, role="population")
    grouping = _age_grouping()
    truth = {label: float(y[m].mean()) for label, m in zip(grouping.all_labels, grouping.masks(cells))}
    spec = _population_spec(data, internet, cfg)
    return SimPopulation(data, internet, dict(zip(["(Intercept)", *names], coefs)), table, spec, truth)


def selection_rates(internet: np.ndarray, age: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Per-stratum selection probability among internet users, pi_h = n rate_h / sum_k rate_k M_k."""
    M = np.bincount(age[internet], minlength=len(cfg.rates)).astype(float)
    rates = np.asarray(cfg.rates)
    return cfg.n_nonprob * rates / (rates @ M)


def _population_spec(data: Microdata, internet: np.ndarray, cfg: SimConfig) -> PopulationSpec:
    age = data.column("age")
    pi = selection_rates(internet, age, cfg)
    unit_p = np.where(internet, pi[age], 0.0)
    occ, inv = np.unique(data.cells, return_inverse=True)
    N_j = np.bincount(inv).astype(float)
    y = data.outcome
    psi = np.bincount(inv, weights=unit_p) / N_j
    sum_y = np.bincount(inv, weights=y)
    resp_mass = np.bincount(inv, weights=unit_p)
    mean_r = np.where(resp_mass > 0, np.bincount(inv, weights=unit_p * y) / np.maximum(resp_mass, 1e-300), sum_y / N_j)
    miss_mass = N_j - resp_mass
    mean_m = np.where(miss_mass > 0, (sum_y - np.bincount(inv, weights=unit_p * y)) / np.maximum(miss_mass, 1e-300), sum_y / N_j)
    mean = sum_y / N_j
    sd = np.sqrt(np.maximum(np.bincount(inv, weights=y * y) / N_j - mean**2, 0.0))
    sd = np.where(sd > 0, sd, max(cfg.noise_sd, 1e-6))
    psi = np.maximum(psi, 1e-12)
    return PopulationSpec(N_j, psi, mean_r, mean_m, sd, SCHEMA, occ)


def draw_samples(pop: SimPopulation, cfg: SimConfig, rng: np.random.Generator) -> tuple[Microdata, Microdata]:
    """Nonprobability sample from internet users stratified by age, and an SRS reference sample.

    Every internet user in age stratum h is first selected independently
    with probability pi_h = n rate_h / sum_k rate_k M_k (M_k internet users
    in stratum k), so E[n_h] is proportional to rate_h M_h. The total is
    then brought to exactly n_nonprob: a surplus is removed by uniform
    thinning of the selected units, and a shortfall is filled from the
    unselected units with probability proportional to pi_h. With equal
    rates this yields a simple random sample of the internet users. The
    reference sample is an SRS without replacement of size n_ref carrying
    weights N / n_ref and no outcome.
    """
    data = pop.data
    age = data.column("age")
    users = np.flatnonzero(pop.internet)
    pi = selection_rates(pop.internet, age, cfg)
    if np.any(pi > 1):
        h = int(np.argmax(pi))
        raise MrpError(f"age stratum {h} exhausted: selection probability {pi[h]:.3f} exceeds 1")
    if users.size < cfg.n_nonprob:
        raise MrpError(f"only {users.size} internet users for a sample of {cfg.n_nonprob}")
    p_unit = pi[age[users]]
    selected = rng.random(users.size) < p_unit
    surplus = int(selected.sum()) - cfg.n_nonprob
    if surplus > 0:
        selected[rng.choice(np.flatnonzero(selected), surplus, replace=False)] = False
    elif surplus < 0:
        pool = np.flatnonzero(~selected)
        w = p_unit[pool]
        selected[rng.choice(pool, -surplus, replace=False, p=w / w.sum())] = True
    nonprob = data.subset(users[selected])
    ref_idx = np.sort(rng.choice(len(data), size=cfg.n_ref, replace=False))
    reference = Microdata(SCHEMA, data.codes[ref_idx], None, np.full(cfg.n_ref, cfg.N / cfg.n_ref))
    return nonprob, reference


# ---------------------------------------------------------------------------
# one replication


def _margins(pop: SimPopulation) -> dict[str, np.ndarray]:
    return {
        name: np.bincount(pop.data.column(name), minlength=len(SCHEMA.levels(name))).astype(float)
        for name in SCHEMA.names
    }


def _closed_form(method, sample, reference, pop, cfg, groups, margins, jk_seed):
    if method == "UnW":
        return unweighted_mean(build_cell_table(sample), groups)
    if method == "PS":
        return poststratified_mean(build_cell_table(sample), pop.table, groups)

    def estimate(s):
        if method == "IPW":
            return ipw_mean(s, fit_inclusion_model(stack_samples(s, reference), MAIN_EFFECTS, scale="odds"), groups)
        if method == "GREG":
            return greg_mean(s, margins, groups)
        if method == "Raking":
            return raking_mean(s, margins, groups)
        if method == "DR":
            fit = fit_inclusion_model(stack_samples(s, reference), MAIN_EFFECTS, scale="odds")
            return dr_mean(s, fit, MAIN_EFFECTS, pop.table, groups, method="DR")
        raise ValueError(f"unknown method {method!r}")

    full = estimate(sample)
    jk = jackknife_se(estimate, sample, cfg.jackknife_groups, rng_seed=jk_seed)
    return with_jackknife(full, jk)


def _mrp(methods, sample, reference, pop, cfg, groups, seed):
    out: dict[str, tuple[list[EstimateSummary], bool, str, float]] = {}
    mcmc = replace(cfg.mcmc, seed=seed)
    shared = None
    synthetic = None
    for m in methods:
        kwargs = {}
        if m == "MRP-R":
            if synthetic is None:
                rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
                synthetic = estimate_pop_cells(synthetic_populations(reference.weight, cfg.N, cfg.L, rng), reference)
            kwargs["synthetic"] = synthetic
        if m != "MRP-INT" and shared is not None:
            kwargs["draws"] = shared
        res = mrp_fit(m, sample, pop.table, reference, cfg.outcome_formula, mcmc, _age_grouping(),
                      L=cfg.L, N=cfg.N, psi_digits=cfg.psi_digits, **kwargs)
        if m != "MRP-INT":
            shared = res.draws
        out[m] = (res.summaries, res.flagged, res.flag_reason, res.max_rhat)
    return out


def run_replication(pop: SimPopulation, cfg: SimConfig, rep: int, methods=METHODS) -> list[dict]:
    """All requested methods on one pair of samples; one log row per method x group."""
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(1, rep))
    rng = np.random.default_rng(ss)
    sample, reference = draw_samples(pop, cfg, rng)
    mcmc_seed = int(rng.integers(2**31 - 1))
    jk_seed = int(rng.integers(2**31 - 1))
    groups = _age_grouping()
    labels = groups.all_labels
    margins = _margins(pop)
    rows = []

    def emit(method, summaries, flagged=False, error="", rhat=np.nan, seconds=0.0):
        for s in summaries:
            rows.append(dict(
                replication=rep, method=method, group=s.group, estimate=s.estimate, se=s.se,
                ci_low=s.ci_low, ci_high=s.ci_high, truth=pop.truth[s.group], flagged=bool(flagged),
                error=error, max_rhat=rhat, seconds=seconds,
            ))

    def failed(method, exc):
        log.warning("replication %d: %s failed: %s", rep, method, exc)
        emit(method, [EstimateSummary.absent(g, method, "") for g in labels], error=f"{type(exc).__name__}: {exc}")

    for m in (m for m in methods if m not in MRP_METHODS):
        t0 = time.perf_counter()
        try:
            res = _closed_form(m, sample, reference, pop, cfg, groups, margins, jk_seed)
        except (MrpError, ValueError, np.linalg.LinAlgError) as exc:
            failed(m, exc)
            continue
        emit(m, res, seconds=time.perf_counter() - t0)
    mrp_methods = [m for m in methods if m in MRP_METHODS]
    if mrp_methods and rep < cfg.replications:
        t0 = time.perf_counter()
        try:
            res = _mrp(mrp_methods, sample, reference, pop, cfg, groups, mcmc_seed)
        except (MrpError, ValueError, np.linalg.LinAlgError) as exc:
            for m in mrp_methods:
                failed(m, exc)
        else:
            dt = (time.perf_counter() - t0) / len(mrp_methods)
            for m, (summ, flagged, _, rh) in res.items():
                emit(m, summ, flagged, rhat=rh, seconds=dt)
    return rows


# ---------------------------------------------------------------------------
# study


@dataclass
class SimReport:
    table: pd.DataFrame
    log: pd.DataFrame
    config: SimConfig
    truth: dict[str, float]
    runtime: float = 0.0
    header: str = field(default="")

    def row(self, method: str, group: str = "overall") -> pd.Series:
        t = self.table
        hit = t[(t.method == method) & (t.group == group)]
        if hit.empty:
            raise KeyError((method, group))
        return hit.iloc[0]


REPORT_COLUMNS = ["method", "group", "relative_bias", "rmse", "avg_se", "coverage", "replications", "excluded", "failed"]


def aggregate(log_df: pd.DataFrame) -> pd.DataFrame:
    """Method x group metrics from a per-replication log.

    Rows with an error are counted as failed, flagged rows as excluded;
    the remaining rows give relative bias (mean estimate - truth)/truth,
    RMSE, average SE and the share of intervals covering the truth.
    """
    out = []
    method_order = {m: k for k, m in enumerate(METHODS)}
    keys = log_df[["method", "group"]].drop_duplicates()
    for method, group in keys.itertuples(index=False):
        d = log_df[(log_df.method == method) & (log_df.group == group)].sort_values("replication")
        failed = d.error.fillna("").astype(bool)
        excluded = d.flagged.astype(bool) & ~failed
        ok = d[~failed & ~excluded & np.isfinite(d.estimate)]
        truth = float(d.truth.iloc[0])
        if len(ok):
            err = ok.estimate.to_numpy() - truth
            rel = float(err.mean() / truth)
            rmse = float(np.sqrt(np.mean(err**2)))
            se = float(ok.se.mean())
            cov = float(np.mean((ok.ci_low <= truth) & (truth <= ok.ci_high)))
        else:
            rel = rmse = se = cov = float("nan")
        out.append([method, group, rel, rmse, se, cov, len(ok), int(excluded.sum()), int(failed.sum())])
    df = pd.DataFrame(out, columns=REPORT_COLUMNS)
    group_order = {g: k for k, g in enumerate(_age_grouping().all_labels)}
    df["_m"] = df.method.map(lambda m: method_order.get(m, len(method_order)))
    df["_g"] = df.group.map(lambda g: group_order.get(g, len(group_order)))
    return df.sort_values(["_m", "_g", "method", "group"]).drop(columns=["_m", "_g"]).reset_index(drop=True)


def _run_chunk(args):
    pop, cfg, reps, methods = args
    rows = []
    for r in reps:
        rows += run_replication(pop, cfg, r, methods)
    return rows


def run_study(cfg: SimConfig, methods=METHODS, threads: int = 1, population: SimPopulation | None = None) -> SimReport:
    """Generate (or reuse) the population, run every replication and aggregate.

    MRP methods run in the first ``cfg.replications`` replications and the
    other methods in the first ``cfg.replications_closed_form``. With
    ``threads > 1`` replications run in worker processes; results are
    ordered by replication index so the output does not depend on it.
    """
    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    t0 = time.perf_counter()
    pop = population or generate_population(cfg, np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,))))
    has_mrp = any(m in MRP_METHODS for m in methods)
    has_other = any(m not in MRP_METHODS for m in methods)
    n_reps = max(cfg.replications if has_mrp else 0, cfg.replications_closed_form if has_other else 0)
    closed = [m for m in methods if m not in MRP_METHODS]
    reps = list(range(n_reps))
    if threads <= 1:
        rows = []
        for r in reps:
            rows += run_replication(pop, cfg, r, methods if r < cfg.replications else closed)
    else:
        chunks = [(pop, cfg, [r], methods if r < cfg.replications else closed) for r in reps]
        with ProcessPoolExecutor(max_workers=threads) as ex:
            rows = [row for part in ex.map(_run_chunk, chunks) for row in part]
    log_df = pd.DataFrame(rows)
    log_df = log_df.sort_values(["replication"], kind="stable").reset_index(drop=True)
    table = aggregate(log_df)
    header = "Simulated population from a built-in covariate distribution."
    return SimReport(table, log_df, cfg, pop.truth, time.perf_counter() - t0, header)
