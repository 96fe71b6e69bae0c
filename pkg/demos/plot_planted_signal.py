"""
Recovering a planted signal end to end
======================================

Generate a synthetic card-transaction corpus whose official indices were
planted through the same link the model uses, ingest it, and check how much
of the planted signal the cross-validated pipeline gets back.

Run from the repository root::

    python demos/plot_planted_signal.py
"""

import tempfile
from pathlib import Path

import numpy as np

from cardecon.indicators import compute_indicators
from cardecon.ingest import aggregate_file, load_region_table
from cardecon.pipeline import OfficialIndices, cross_validate
from cardecon.synthgen import SynthConfig, generate

out = Path(tempfile.mkdtemp(prefix="cardecon-demo-"))

# A quarter of a million transactions keeps the demo fast. Noise is tuned so
# that the best possible model explains 80% of each index's variance.
corpus = generate(SynthConfig(transactions_total=250_000, target_r2=0.8, seed=1), out)
print("corpus written to", out)

# Ingest reads the CSV back exactly as an external user would.
regions, external = load_region_table(corpus.region_table_path)
result = aggregate_file(corpus.transactions_path, regions, external)
print(f"{result.report.rows_accepted} rows accepted, {result.report.rows_rejected} rejected")
matrix = compute_indicators(result.aggregates, result.merchants, result.regions)
indices = OfficialIndices.from_csv(corpus.indices_path)

# Four sessions of 34 training and 18 validation regions, six components.
report = cross_validate(matrix, indices, sessions=4, train_size=34, seed=1)

print(f"\n{'index':22s} {'theory':>7s} {'train':>7s} {'valid':>7s}")
theory = [e["theoretical_r2"] for e in corpus.ground_truth["indices"]]
for name, t, tr, va in zip(indices.names, theory, report.mean("r2_train_orig"),
                           report.mean("r2_val_orig")):
    print(f"{name:22s} {t:7.3f} {tr:7.3f} {va:7.3f}")

# Validation R^2 tends to land a little under the planted ceiling: seven
# coefficients per index are estimated from 34 noisy regions.
print("\nmean validation R^2:", round(float(np.mean(report.mean("r2_val_orig"))), 3))
