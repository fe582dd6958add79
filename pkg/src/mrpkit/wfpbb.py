"""Weighted finite population Bayesian bootstrap (WFPBB).

Steps: Bayesian-bootstrap the parent sample, recalibrate the bootstrap
weights to sum to N, expand each bootstrap sample to a synthetic population
of size N with a weighted Polya urn, then tabulate population cell counts.

In the urn, the k-th of the N - n draws selects unit i with probability

    (w_i - r_i + l_i (N - n)/n) / (N - n + (k - 1)(N - n)/n)

where r_i is the unit's bootstrap multiplicity and l_i the number of times
it was already drawn. With r_i = 1 this is the familiar per-element form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cells import CellTable, CovariateSchema, Microdata
from .errors import DataError

log = logging.getLogger(__name__)


def bayesian_bootstrap(n: int, L: int, rng: np.random.Generator) -> np.ndarray:
    """Replicate counts, shape (L, n): multinomial(n) under flat-Dirichlet probabilities."""
    if n < 1 or L < 1:
        raise ValueError("need n >= 1 and L >= 1")
    if n == 1:
        return np.ones((L, 1), dtype=np.int64)
    probs = rng.dirichlet(np.ones(n), size=L)
    return np.stack([rng.multinomial(n, p) for p in probs]).astype(np.int64)


def recalibrate_weights(base: np.ndarray, counts: np.ndarray, N: float) -> np.ndarray:
    """w_i^l = N w_i r_i / sum_j w_j r_j; zero-count units get weight 0."""
    base = np.asarray(getattr(base, "values", base), dtype=float)
    counts = np.asarray(counts, dtype=float)
    if base.shape != counts.shape:
        raise DataError("base weights and replicate counts differ in length")
    if np.any(base <= 0):
        raise DataError("base weights must be positive")
    denom = float(base @ counts)
    if denom <= 0:
        raise DataError("all replicate counts are zero")
    return N * base * counts / denom


@dataclass(frozen=True)
class SyntheticPopulation:
    """Multiplicity of every parent unit in a synthetic population of size N."""

    multiplicity: np.ndarray
    clamped: int = 0

    @property
    def size(self) -> int:
        return int(self.multiplicity.sum())

    def units(self) -> np.ndarray:
        """Parent-unit id for every synthetic unit."""
        return np.repeat(np.arange(self.multiplicity.size), self.multiplicity)


class _FenwickTree:
    """Prefix sums over nonnegative weights with O(log n) update and search."""

    def __init__(self, values: np.ndarray):
        self.n = len(values)
        self.tree = [0.0] * (self.n + 1)
        for i, v in enumerate(values):
            self.add(i, float(v))

    def add(self, i: int, delta: float) -> None:
        i += 1
        while i <= self.n:
            self.tree[i] += delta
            i += i & -i

    def find(self, target: float) -> int:
        """Smallest index whose prefix sum exceeds ``target``."""
        pos = 0
        step = 1 << self.n.bit_length()
        while step:
            nxt = pos + step
            if nxt <= self.n and self.tree[nxt] <= target:
                pos = nxt
                target -= self.tree[nxt]
            step >>= 1
        return min(pos, self.n - 1)


def _urn_start(weights, counts, n, N):
    w = np.asarray(weights, dtype=float)
    r = np.ones_like(w) if counts is None else np.asarray(counts, dtype=float)
    if n is None:
        n = int(r.sum())
    if not N > n:
        raise DataError(f"population size N={N} must exceed sample size n={n}")
    if int(r.sum()) != n:
        raise DataError("replicate counts do not sum to n")
    a = np.where(r > 0, w - r, 0.0)
    neg = a < 0
    if neg.any():
        log.info("clamping %d Polya urn weights below one element", int(neg.sum()))
    return np.maximum(a, 0.0), r, int(n), int(neg.sum())


def polya_urn_expand(
    weights,
    n: int | None = None,
    N: int = None,
    rng: np.random.Generator = None,
    counts=None,
    method: str = "sequential",
    check: bool = False,
) -> SyntheticPopulation:
    """Expand a weighted (bootstrap) sample to a synthetic population of size N.

    ``weights`` are the recalibrated w_i^l (summing to N) and ``counts`` the
    bootstrap multiplicities r_i (default all ones). Units whose urn weight
    w_i - r_i would be negative are clamped to zero and the count is
    reported in ``clamped``.

    ``method="sequential"`` performs the N - n draws one at a time with a
    Fenwick tree; ``check=True`` additionally verifies that each draw's
    probabilities sum to one. ``method="dirichlet"`` samples the same final
    counts in one step, using that a Polya urn with initial masses a_i and
    reinforcement c yields Dirichlet-multinomial(N - n, a / c) counts.
    """
    a, r, n, clamped = _urn_start(weights, counts, n, N)
    draws = int(N) - n
    c = draws / n
    if a.sum() <= 0:
        raise DataError("Polya urn has no positive mass")
    if method == "dirichlet":
        alpha = a / c
        pos = alpha > 0
        g = np.zeros_like(alpha)
        g[pos] = rng.standard_gamma(alpha[pos])
        if g.sum() <= 0:
            g[pos] = alpha[pos]
        extra = rng.multinomial(draws, g / g.sum())
    elif method == "sequential":
        tree = _FenwickTree(a)
        extra = np.zeros(a.size, dtype=np.int64)
        total = float(a.sum())
        u = rng.random(draws)
        for k in range(draws):
            if check:
                p = a + extra * c
                p = p / (draws + k * c) if clamped == 0 else p / p.sum()
                if abs(p.sum() - 1.0) > 1e-12:
                    raise AssertionError(f"draw {k + 1}: probabilities sum to {p.sum()!r}")
            i = tree.find(u[k] * total)
            extra[i] += 1
            tree.add(i, c)
            total += c
    else:
        raise ValueError(f"unknown method {method!r}")
    return SyntheticPopulation((r + extra).astype(np.int64), clamped)


def draw_probabilities(weights, extra, n: int, N: int, counts=None) -> np.ndarray:
    """Selection probabilities for the next urn draw given prior selections ``extra``."""
    a, r, n, _ = _urn_start(weights, counts, n, N)
    c = (N - n) / n
    k = int(np.sum(extra)) + 1
    return (a + np.asarray(extra) * c) / (N - n + (k - 1) * c)


def synthetic_populations(
    base_weights,
    N: int,
    L: int,
    rng: np.random.Generator,
    method: str = "dirichlet",
) -> list[SyntheticPopulation]:
    """Full WFPBB: L bootstrap replicates, recalibration and urn expansion."""
    base = np.asarray(getattr(base_weights, "values", base_weights), dtype=float)
    n = base.size
    reps = bayesian_bootstrap(n, L, rng)
    pops = []
    for counts in reps:
        w = recalibrate_weights(base, counts, N)
        pops.append(polya_urn_expand(w, n, N, rng, counts=counts, method=method))
    return pops


def estimate_pop_cells(populations, parents: Microdata | CovariateSchema, cells=None) -> list[CellTable]:
    """Population-role cell tables, one per synthetic population.

    ``parents`` supplies each parent unit's covariates (or pass a schema and
    the parents' linear cell indices in ``cells``).
    """
    if isinstance(parents, Microdata):
        schema, cells = parents.schema, parents.cells
    else:
        schema = parents
        if cells is None:
            raise DataError("parent cell indices are required with a bare schema")
        cells = np.asarray(cells, dtype=np.int64)
    out = []
    for pop in populations:
        m = pop.multiplicity
        if m.size != cells.size:
            raise DataError("synthetic population does not match the parent sample")
        occ, inv = np.unique(cells, return_inverse=True)
        counts = np.bincount(inv, weights=m, minlength=occ.size)
        keep = counts > 0
        out.append(CellTable(schema, occ[keep], counts[keep], role="population"))
    return out


def stacked_counts(tables: list[CellTable]) -> tuple[np.ndarray, np.ndarray]:
    """(cells, L x cells matrix) of estimated counts over the union of cells."""
    cells = np.unique(np.concatenate([t.cells for t in tables])) if tables else np.zeros(0, np.int64)
    M = np.zeros((len(tables), cells.size))
    for l, t in enumerate(tables):
        M[l, np.searchsorted(cells, t.cells)] = t.counts
    return cells, M
