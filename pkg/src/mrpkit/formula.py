"""Minimal model-formula grammar and cell-level design matrices.

Grammar: terms joined by ``+``; ``a*b`` expands to ``a + b + a:b``;
``a:b`` is a pairwise interaction; ``psi`` is the numeric inclusion
probability predictor; ``(1|f)`` is a varying intercept over factor ``f``
(a schema variable or ``psi`` for the rounded inclusion-probability groups).
Categorical terms use treatment coding with the first level as reference.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .cells import CovariateSchema
from .errors import DataError

PSI = "psi"


@dataclass(frozen=True)
class ModelTerms:
    main: tuple[str, ...] = ()
    interactions: tuple[tuple[str, str], ...] = ()
    psi: bool = False
    varying: tuple[str, ...] = ()

    def __str__(self) -> str:
        parts = list(self.main) + [f"{a}:{b}" for a, b in self.interactions]
        if self.psi:
            parts.append(PSI)
        parts += [f"(1|{f})" for f in self.varying]
        return " + ".join(parts) if parts else "1"

    def without_interactions(self) -> "ModelTerms":
        return ModelTerms(self.main, (), self.psi, self.varying)

    def with_psi(self) -> "ModelTerms":
        varying = self.varying if PSI in self.varying else self.varying + (PSI,)
        return ModelTerms(self.main, self.interactions, True, varying)

    @property
    def uses_psi(self) -> bool:
        return self.psi or PSI in self.varying

    def validate(self, schema: CovariateSchema) -> None:
        names = set(schema.names)
        for v in self.main:
            if v not in names:
                raise DataError(f"formula term {v!r} is not a schema variable")
        for a, b in self.interactions:
            for v in (a, b):
                if v not in self.main:
                    raise DataError(f"interaction {a}:{b} references {v!r}, which is not a declared main effect")
        for f in self.varying:
            if f != PSI and f not in names:
                raise DataError(f"varying intercept factor {f!r} is unknown")


_VARYING = re.compile(r"^\(\s*1\s*\|\s*(\w+)\s*\)$")


def parse_formula(text: str) -> ModelTerms:
    """Parse a right-hand side such as ``"age + race + age*edu + psi + (1|psi)"``.

    A leading ``y ~`` is ignored.
    """
    if "~" in text:
        text = text.split("~", 1)[1]
    main: list[str] = []
    inter: list[tuple[str, str]] = []
    varying: list[str] = []
    psi = False

    def add_main(v):
        if v not in main:
            main.append(v)

    for raw in text.split("+"):
        term = raw.strip()
        if not term or term == "1":
            continue
        m = _VARYING.match(term)
        if m:
            if m.group(1) not in varying:
                varying.append(m.group(1))
            continue
        if "*" in term or ":" in term:
            op = "*" if "*" in term else ":"
            a, b = (t.strip() for t in term.split(op))
            if not (a.isidentifier() and b.isidentifier()):
                raise DataError(f"cannot parse formula term {term!r}")
            if op == "*":
                add_main(a)
                add_main(b)
            if (a, b) not in inter and (b, a) not in inter:
                inter.append((a, b))
            continue
        if not term.isidentifier():
            raise DataError(f"cannot parse formula term {term!r}")
        if term == PSI:
            psi = True
        else:
            add_main(term)
    return ModelTerms(tuple(main), tuple(inter), psi, tuple(varying))


def fixed_design(schema: CovariateSchema, terms: ModelTerms, psi: np.ndarray | None = None) -> tuple[np.ndarray, list[str]]:
    """Design matrix (without intercept) with one row per schema cell."""
    terms.validate(schema)
    keys = schema.all_keys()
    cols: list[np.ndarray] = []
    names: list[str] = []
    dummies: dict[str, tuple[np.ndarray, list[str]]] = {}
    for v in terms.main:
        j = schema.index(v)
        levels = schema.variables[j][1]
        block = np.stack([(keys[:, j] == k).astype(float) for k in range(1, len(levels))], axis=1) if len(levels) > 1 else np.zeros((len(keys), 0))
        labels = [f"{v}[{lev}]" for lev in levels[1:]]
        dummies[v] = (block, labels)
        cols.append(block)
        names += labels
    for a, b in terms.interactions:
        ba, la = dummies[a]
        bb, lb = dummies[b]
        for p in range(ba.shape[1]):
            for q in range(bb.shape[1]):
                cols.append((ba[:, p] * bb[:, q])[:, None])
                names.append(f"{la[p]}:{lb[q]}")
    if terms.psi:
        if psi is None:
            raise DataError("formula uses psi but no inclusion probabilities were supplied")
        cols.append(np.asarray(psi, dtype=float).reshape(-1, 1))
        names.append(PSI)
    X = np.concatenate(cols, axis=1) if cols else np.zeros((schema.n_cells, 0))
    return X, names


def varying_index(schema: CovariateSchema, factor: str, psi_groups: np.ndarray | None = None) -> tuple[np.ndarray, list[str]]:
    """Per-cell group index and level labels for a varying-intercept factor."""
    if factor == PSI:
        if psi_groups is None:
            raise DataError("(1|psi) requires inclusion-probability groups")
        groups = np.asarray(psi_groups, dtype=np.int64)
        n = int(groups.max()) + 1 if groups.size else 0
        return groups, [str(g) for g in range(n)]
    j = schema.index(factor)
    return schema.all_keys()[:, j], list(schema.variables[j][1])
