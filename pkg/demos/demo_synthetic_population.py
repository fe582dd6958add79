"""
Synthetic populations from a weighted reference sample
======================================================

When population cell counts are unknown, a weighted probability sample
can stand in for them.  The weighted finite population Bayesian
bootstrap resamples the reference sample, recalibrates the weights and
then grows each resample to full population size with a Polya urn.  The
spread of cell counts across the synthetic populations carries the
uncertainty of the reference sample into later estimates.
"""

import numpy as np

from mrpkit import CovariateSchema, Microdata, estimate_pop_cells, synthetic_populations

rng = np.random.default_rng(1)
schema = CovariateSchema([("age", ["18-34", "35-54", "55+"]), ("edu", ["lo", "hi"])])

# a reference sample of 300 units that oversamples the young;
# design weights undo the oversampling
codes = np.column_stack([rng.choice(3, 300, p=[0.5, 0.3, 0.2]), rng.integers(0, 2, 300)])
weights = np.array([0.6, 1.0, 2.0])[codes[:, 0]]
weights *= 30000 / weights.sum()
ref = Microdata(schema, codes, weight=weights)

pops = synthetic_populations(ref.weight, N=30000, L=200, rng=rng)
tables = estimate_pop_cells(pops, ref)

# every synthetic population has exactly N units
print("sizes:", sorted({p.size for p in pops}))

counts = np.zeros((len(tables), schema.n_cells))
for k, t in enumerate(tables):
    counts[k, t.cells] = t.counts
weighted = np.bincount(ref.cells, weights=weights, minlength=schema.n_cells)

print("\ncell            weighted   synthetic mean   95% interval")
for j in range(schema.n_cells):
    lo, hi = np.quantile(counts[:, j], [0.025, 0.975])
    key = schema.keys([j])[0]
    label = "/".join(schema.levels(v)[k] for v, k in zip(schema.names, key))
    print(f"{label:14s} {weighted[j]:9.0f}   {counts[:, j].mean():14.0f}   [{lo:.0f}, {hi:.0f}]")
