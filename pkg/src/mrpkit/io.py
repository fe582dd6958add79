"""CSV reading and writing for microdata, cell tables, margins and results.

Every file is read with all columns as text so level labels round-trip
exactly; numeric columns are converted explicitly. Floats are written with
17 significant digits, which makes repeated runs byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .cells import CellTable, CovariateSchema, Microdata
from .design import EstimateSummary
from .diagnostics import PopulationSpec
from .errors import DataError
from .hb import PosteriorDraws

RESERVED = ("outcome", "weight", "included", "count", "mean", "variance", "N", "psi", "meanR", "meanM", "sd", "replicate")
FLOAT_FORMAT = "%.17g"
ESTIMATE_COLUMNS = ["method", "group", "estimate", "se", "ci_low", "ci_high"]


def read_frame(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    df.columns = [c.strip() for c in df.columns]
    return df


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _level_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def covariate_columns(df: pd.DataFrame, variables: Sequence[str] | None = None) -> list[str]:
    if variables is not None:
        missing = [v for v in variables if v not in df.columns]
        if missing:
            raise DataError(f"columns not found: {missing}")
        return list(variables)
    return [c for c in df.columns if c not in RESERVED]


def infer_schema(frames: Iterable[pd.DataFrame], variables: Sequence[str] | None = None) -> CovariateSchema:
    """Schema from the union of observed labels; numeric labels sort numerically."""
    frames = list(frames)
    names = covariate_columns(frames[0], variables)
    for f in frames[1:]:
        missing = [v for v in names if v not in f.columns]
        if missing:
            raise DataError(f"covariate columns missing from an input: {missing}")
    levels = []
    for v in names:
        seen = set()
        for f in frames:
            seen.update(s.strip() for s in f[v])
        if "" in seen:
            raise DataError(f"empty value in covariate {v!r}")
        levels.append((v, sorted(seen, key=_level_key)))
    return CovariateSchema(levels)


def _numeric(df: pd.DataFrame, col: str, missing_ok: bool = False) -> np.ndarray:
    raw = df[col].str.strip()
    if missing_ok:
        raw = raw.replace({"": "nan", "NA": "nan"})
    try:
        return raw.astype(float).to_numpy()
    except ValueError as exc:
        raise DataError(f"column {col!r} has a non-numeric value: {exc}") from exc


def frame_to_microdata(df: pd.DataFrame, schema: CovariateSchema) -> Microdata:
    codes = schema.encode({v: [s.strip() for s in df[v]] for v in schema.names})
    outcome = _numeric(df, "outcome", missing_ok=True) if "outcome" in df else None
    weight = _numeric(df, "weight") if "weight" in df else None
    included = _numeric(df, "included").astype(np.int64) if "included" in df else None
    return Microdata(schema, codes, outcome, weight, included)


def frame_to_cell_table(df: pd.DataFrame, schema: CovariateSchema, role: str) -> CellTable:
    if "count" not in df:
        raise DataError("cell table needs a 'count' column")
    codes = schema.encode({v: [s.strip() for s in df[v]] for v in schema.names})
    cells = schema.linear(codes)
    means = _numeric(df, "mean", missing_ok=True) if "mean" in df else None
    variances = _numeric(df, "variance", missing_ok=True) if "variance" in df else None
    return CellTable(schema, cells, _numeric(df, "count"), means, variances, role)


def read_microdata(path, schema: CovariateSchema | None = None, variables=None) -> Microdata:
    df = read_frame(path)
    return frame_to_microdata(df, schema or infer_schema([df], variables))


def read_cell_table(path, schema: CovariateSchema | None = None, role: str = "population", variables=None) -> CellTable:
    df = read_frame(path)
    return frame_to_cell_table(df, schema or infer_schema([df], variables), role)


def read_margins(path, schema: CovariateSchema) -> dict[str, dict[str, float]]:
    """Margin CSV with columns ``variable, level, total``."""
    df = read_frame(path)
    for col in ("variable", "level", "total"):
        if col not in df:
            raise DataError(f"margin file needs a {col!r} column")
    out: dict[str, dict[str, float]] = {}
    totals = _numeric(df, "total")
    for var, lev, tot in zip(df["variable"].str.strip(), df["level"].str.strip(), totals):
        if var not in schema.names:
            raise DataError(f"margin variable {var!r} is not a covariate")
        if lev not in schema.levels(var):
            raise DataError(f"margin level {lev!r} is not a level of {var!r}")
        out.setdefault(var, {})[lev] = float(tot)
    return out


def read_population_spec(path, variables=None) -> PopulationSpec:
    """PopulationSpec CSV: covariate columns, then ``N, psi, meanR, meanM, sd``."""
    df = read_frame(path)
    for col in ("N", "psi", "meanR", "meanM", "sd"):
        if col not in df:
            raise DataError(f"population spec needs a {col!r} column")
    names = covariate_columns(df, variables)
    schema = cells = None
    if names:
        schema = infer_schema([df], names)
        cells = schema.linear(schema.encode({v: [s.strip() for s in df[v]] for v in names}))
    return PopulationSpec(
        _numeric(df, "N"), _numeric(df, "psi"), _numeric(df, "meanR"), _numeric(df, "meanM"), _numeric(df, "sd"),
        schema, cells,
    )


# ---------------------------------------------------------------------------
# writers


def write_frame(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, quoting=csv.QUOTE_MINIMAL, lineterminator="\n", na_rep="NA")
    return path


def estimates_frame(summaries: Sequence[EstimateSummary]) -> pd.DataFrame:
    return pd.DataFrame(
        [[s.method, s.group, s.estimate, s.se, s.ci_low, s.ci_high] for s in summaries],
        columns=ESTIMATE_COLUMNS,
    )


def write_estimates(summaries: Sequence[EstimateSummary], path) -> Path:
    return write_frame(estimates_frame(summaries), path)


def cell_table_frame(table: CellTable) -> pd.DataFrame:
    keys = table.schema.keys(table.cells)
    cols = {v: [table.schema.levels(v)[k] for k in keys[:, j]] for j, v in enumerate(table.schema.names)}
    cols["count"] = table.counts
    if not np.all(np.isnan(table.means)):
        cols["mean"] = table.means
        cols["variance"] = table.variances
    return pd.DataFrame(cols)


def write_cell_tables(tables: Sequence[CellTable], path) -> Path:
    """Stacked cell-count CSV with a leading ``replicate`` column (1-based)."""
    parts = []
    for r, t in enumerate(tables, start=1):
        df = cell_table_frame(t)
        df.insert(0, "replicate", r)
        parts.append(df)
    return write_frame(pd.concat(parts, ignore_index=True), path)


def write_draws(draws: PosteriorDraws, path) -> Path:
    rows = list(draws.long_rows())
    return write_frame(pd.DataFrame(rows, columns=["chain", "iteration", "parameter", "value"]), path)


def write_provenance(path, entries: dict) -> Path:
    """``key = value`` lines, in insertion order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in entries.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_key_values(path) -> dict[str, str]:
    """Parse a ``key = value`` text file; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
