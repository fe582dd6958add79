"""Poststratification cells: covariate schemas, unit microdata and cell tables.

Cells are the cross-tabulation of categorical covariates. A cell key is a
tuple of level indices, one per schema variable; internally keys are also
addressed by their row-major linear index, which orders them exactly like
the tuples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

ROLES = ("sample", "reference", "population")


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered categorical variables with ordered level labels."""

    variables: tuple[tuple[str, tuple[str, ...]], ...]

    def __init__(self, variables: Iterable[tuple[str, Sequence[str]]]):
        items = tuple((str(name), tuple(str(v) for v in levels)) for name, levels in variables)
        names = [name for name, _ in items]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate variable names in schema: {names}")
        for name, levels in items:
            if not levels:
                raise DataError(f"variable {name!r} has no levels")
            if len(set(levels)) != len(levels):
                raise DataError(f"variable {name!r} has duplicate levels")
        object.__setattr__(self, "variables", items)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.variables]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(levels) for _, levels in self.variables)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def levels(self, name: str) -> tuple[str, ...]:
        return self.variables[self.index(name)][1]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown variable {name!r}; schema has {self.names}") from None

    def linear(self, keys) -> np.ndarray:
        """Linear cell index for an (m, p) array of level indices."""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, len(self.variables))
        if keys.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        return np.ravel_multi_index(tuple(keys.T), self.shape).astype(np.int64)

    def keys(self, linear) -> np.ndarray:
        """Inverse of :meth:`linear`."""
        linear = np.asarray(linear, dtype=np.int64)
        if linear.size == 0:
            return np.zeros((0, len(self.variables)), dtype=np.int64)
        return np.stack(np.unravel_index(linear, self.shape), axis=1).astype(np.int64)

    def all_keys(self) -> np.ndarray:
        return self.keys(np.arange(self.n_cells))

    def encode(self, columns: Mapping[str, Sequence]) -> np.ndarray:
        """Map label columns to an (n, p) integer code matrix.

        Raises DataError naming the variable and unit on unknown labels.
        """
        codes = []
        for name, levels in self.variables:
            if name not in columns:
                raise DataError(f"missing covariate column {name!r}")
            lookup = {lab: k for k, lab in enumerate(levels)}
            col = columns[name]
            out = np.empty(len(col), dtype=np.int64)
            for i, value in enumerate(col):
                k = lookup.get(_label(value))
                if k is None:
                    raise DataError(f"unit {i}: value {value!r} is not a level of {name!r}")
                out[i] = k
            codes.append(out)
        if not codes:
            return np.zeros((0, 0), dtype=np.int64)
        return np.stack(codes, axis=1)


def _label(value) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def cell_key(*indices: int) -> tuple[int, ...]:
    return tuple(int(i) for i in indices)


@dataclass(frozen=True)
class Microdata:
    """Unit-level records.

    ``codes`` holds level indices (n, p). ``outcome`` uses NaN for a missing
    outcome. ``weight`` and ``included`` are optional.
    """

    schema: CovariateSchema
    codes: np.ndarray
    outcome: np.ndarray | None = None
    weight: np.ndarray | None = None
    included: np.ndarray | None = None

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64).reshape(-1, len(self.schema.variables))
        shape = np.asarray(self.schema.shape)
        if codes.size:
            bad = np.argwhere((codes < 0) | (codes >= shape))
            if bad.size:
                i, v = bad[0]
                raise DataError(
                    f"unit {i}: level index {codes[i, v]} out of range for {self.schema.names[v]!r}"
                )
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        n = codes.shape[0]
        for name in ("outcome", "weight", "included"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.int64 if name == "included" else float)
            if arr.shape != (n,):
                raise DataError(f"{name} has length {arr.size}, expected {n}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.weight is not None and np.any(~(self.weight > 0)):
            raise DataError("weights must be positive")

    def __len__(self) -> int:
        return self.codes.shape[0]

    @property
    def cells(self) -> np.ndarray:
        return self.schema.linear(self.codes)

    def subset(self, index) -> "Microdata":
        index = np.asarray(index)

        def take(a):
            return None if a is None else a[index]

        return Microdata(self.schema, self.codes[index], take(self.outcome), take(self.weight), take(self.included))

    def with_(self, **changes) -> "Microdata":
        fields = dict(codes=self.codes, outcome=self.outcome, weight=self.weight, included=self.included)
        fields.update(changes)
        return Microdata(self.schema, **fields)

    def column(self, name: str) -> np.ndarray:
        return self.codes[:, self.schema.index(name)]

    @staticmethod
    def concatenate(parts: Sequence["Microdata"]) -> "Microdata":
        schema = parts[0].schema
        if any(p.schema != schema for p in parts):
            raise DataError("cannot concatenate microdata with different schemas")

        def cat(name, fill):
            arrs = [getattr(p, name) for p in parts]
            if all(a is None for a in arrs):
                return None
            return np.concatenate([np.full(len(p), fill) if a is None else a for p, a in zip(parts, arrs)])

        return Microdata(
            schema,
            np.concatenate([p.codes for p in parts]),
            cat("outcome", np.nan),
            cat("weight", 1.0),
            cat("included", 0),
        )


@dataclass(frozen=True)
class CellTable:
    """Per-cell count, mean and variance.

    Rows are sorted by linear cell index. ``means`` is NaN for empty cells and
    ``variances`` is NaN for cells with fewer than two units.
    """

    schema: CovariateSchema
    cells: np.ndarray
    counts: np.ndarray
    means: np.ndarray = field(default=None)
    variances: np.ndarray = field(default=None)
    role: str = "sample"

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"role must be one of {ROLES}, got {self.role!r}")
        cells = np.asarray(self.cells, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=float)
        m = cells.size
        means = np.full(m, np.nan) if self.means is None else np.asarray(self.means, dtype=float)
        variances = np.full(m, np.nan) if self.variances is None else np.asarray(self.variances, dtype=float)
        if not (counts.shape == means.shape == variances.shape == (m,)):
            raise DataError("cell table columns have inconsistent lengths")
        if np.unique(cells).size != m:
            raise DataError("duplicate cell keys in cell table")
        if m and (cells.min() < 0 or cells.max() >= self.schema.n_cells):
            raise DataError("cell index out of range for schema")
        if np.any(counts < 0):
            raise DataError("negative cell count")
        order = np.argsort(cells, kind="stable")
        for name, arr in (("cells", cells), ("counts", counts), ("means", means), ("variances", variances)):
            arr = arr[order]
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.cells.size

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def keys(self) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in k) for k in self.schema.keys(self.cells)]

    @property
    def rows(self):
        """Yield (key, count, mean or None, variance or None)."""
        for key, n, mu, var in zip(self.keys, self.counts, self.means, self.variances):
            yield key, int(round(n)), (None if np.isnan(mu) else float(mu)), (None if np.isnan(var) else float(var))

    def dense_counts(self) -> np.ndarray:
        """Counts over every schema cell, zero where absent."""
        out = np.zeros(self.schema.n_cells)
        out[self.cells] = self.counts
        return out

    def lookup(self, cells) -> np.ndarray:
        """Row positions of ``cells`` in this table, -1 when absent."""
        cells = np.asarray(cells, dtype=np.int64)
        if len(self) == 0:
            return np.full(cells.shape, -1, dtype=np.int64)
        pos = np.clip(np.searchsorted(self.cells, cells), 0, len(self) - 1)
        return np.where(self.cells[pos] == cells, pos, -1)

    def pooled_variance(self) -> float:
        """Pooled within-cell variance over cells with two or more units."""
        ok = self.counts >= 2
        dof = (self.counts[ok] - 1).sum()
        if dof <= 0:
            return float("nan")
        return float(((self.counts[ok] - 1) * self.variances[ok]).sum() / dof)

    def filled_variances(self) -> np.ndarray:
        """Cell variances with absent values imputed from the pooled variance."""
        return np.where(np.isnan(self.variances), self.pooled_variance(), self.variances)

    def with_role(self, role: str) -> "CellTable":
        return CellTable(self.schema, self.cells, self.counts, self.means, self.variances, role)

    def nonempty(self) -> "CellTable":
        keep = self.counts > 0
        return CellTable(self.schema, self.cells[keep], self.counts[keep], self.means[keep], self.variances[keep], self.role)


def build_cell_table(data: Microdata, schema: CovariateSchema | None = None, role: str = "sample") -> CellTable:
    """Cross-tabulate units into cells.

    Counts, means and variances use units with an observed outcome; when the
    data carry no outcome at all every unit is counted. Variance uses the
    n - 1 denominator.
    """
    schema = schema or data.schema
    if schema != data.schema:
        raise DataError("microdata schema does not match the requested schema")
    cells = data.cells
    if data.outcome is None:
        uniq, counts = np.unique(cells, return_counts=True)
        return CellTable(schema, uniq, counts.astype(float), role=role)
    observed = ~np.isnan(data.outcome)
    cells, y = cells[observed], data.outcome[observed]
    uniq, inv, counts = np.unique(cells, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, weights=y, minlength=uniq.size)
    means = sums / np.maximum(counts, 1)
    dev = y - means[inv]
    ss = np.bincount(inv, weights=dev * dev, minlength=uniq.size)
    variances = np.where(counts >= 2, ss / np.maximum(counts - 1, 1), np.nan)
    return CellTable(schema, uniq, counts.astype(float), means, variances, role)


@dataclass(frozen=True)
class CellAlignment:
    shared: list[tuple[int, ...]]
    population_only: list[tuple[int, ...]]
    sample_only: list[tuple[int, ...]]


def align_cells(a: CellTable, b: CellTable) -> CellAlignment:
    """Partition the keys of a sample-side table ``a`` and population-side ``b``."""
    if a.schema != b.schema:
        raise DataError("cannot align cell tables with different schemas")
    ka, kb = a.cells, b.cells
    shared = np.intersect1d(ka, kb)
    only_b = np.setdiff1d(kb, ka)
    only_a = np.setdiff1d(ka, kb)

    def as_keys(lin):
        return [tuple(int(v) for v in k) for k in a.schema.keys(lin)]

    return CellAlignment(as_keys(shared), as_keys(only_b), as_keys(only_a))


class Grouping:
    """Assignment of cells to labelled groups (e.g. subdomains).

    Estimators always report an ``overall`` group first, followed by the
    labels here in order. Cells not mapped to any label only enter
    ``overall``.
    """

    def __init__(self, schema: CovariateSchema, cell_group: np.ndarray, labels: Sequence[str]):
        self.schema = schema
        self.cell_group = np.asarray(cell_group, dtype=np.int64)
        self.labels = list(labels)

    @classmethod
    def overall(cls, schema: CovariateSchema) -> "Grouping":
        return cls(schema, np.full(schema.n_cells, -1), [])

    @classmethod
    def by_variable(cls, schema: CovariateSchema, name: str, labels: Sequence[str] | None = None) -> "Grouping":
        v = schema.index(name)
        levels = schema.variables[v][1]
        labels = list(labels) if labels is not None else [f"{name}:{lev}" for lev in levels]
        return cls(schema, schema.all_keys()[:, v], labels)

    @classmethod
    def from_mapping(cls, schema: CovariateSchema, mapping: Mapping[tuple[int, ...], str]) -> "Grouping":
        labels: list[str] = []
        cell_group = np.full(schema.n_cells, -1)
        for key, label in mapping.items():
            if label not in labels:
                labels.append(label)
            cell_group[schema.linear([key])[0]] = labels.index(label)
        return cls(schema, cell_group, labels)

    @property
    def all_labels(self) -> list[str]:
        return ["overall", *self.labels]

    def masks(self, cells) -> list[np.ndarray]:
        """One boolean mask over ``cells`` per label in :attr:`all_labels`."""
        g = self.cell_group[np.asarray(cells, dtype=np.int64)]
        return [np.ones(g.shape, bool)] + [g == k for k in range(len(self.labels))]


def resolve_groups(schema: CovariateSchema, groups) -> Grouping:
    if groups is None:
        return Grouping.overall(schema)
    if isinstance(groups, Grouping):
        return groups
    if isinstance(groups, str):
        return Grouping.by_variable(schema, groups)
    return Grouping.from_mapping(schema, groups)


def stack_samples(sample: Microdata, reference: Microdata, normalize: bool = False) -> Microdata:
    """Nonprobability units (included = 1, weight 1) stacked on reference units (included = 0).

    Reference weights default to 1; with ``normalize=True`` they are rescaled
    to sum to the reference sample size.
    """
    ref_w = np.ones(len(reference)) if reference.weight is None else np.asarray(reference.weight, dtype=float)
    if normalize:
        ref_w = ref_w * len(reference) / ref_w.sum()
    return Microdata.concatenate([
        sample.with_(included=np.ones(len(sample), dtype=np.int64), weight=np.ones(len(sample)), outcome=None),
        reference.with_(included=np.zeros(len(reference), dtype=np.int64), weight=ref_w, outcome=None),
    ])
