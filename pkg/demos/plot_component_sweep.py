"""
How many components?
====================

Sweep the number of retained principal components and watch the validation
R^2 curve. The indices are planted on the three leading components of the
full sample. Each session refits PCA on its own 34 regions, which mixes the
planted directions into a few neighbouring components, so the curve climbs
for a little longer than k = 3 and then flattens. Cumulative explained
variance keeps rising slowly the whole way.
"""

import tempfile

import numpy as np

from cardecon.pipeline import OfficialIndices, component_sweep, train
from cardecon.synthgen import SynthConfig, generate

corpus = generate(SynthConfig(transactions_total=200_000, latent_factors=3, seed=2),
                  tempfile.mkdtemp(prefix="cardecon-sweep-"))
matrix = corpus.indicators  # identical to what file ingest would produce
indices = OfficialIndices.from_csv(corpus.indices_path)

sweep = component_sweep(matrix, indices, range(1, 11), sessions=4, train_size=34, seed=2)
curve = np.nanmean(sweep.curve("r2_val_orig"), axis=1)

cum = train(matrix, indices).pca.cumulative_fraction()
print(" k  validation R^2  cumulative variance")
for k, r2 in zip(sweep.ks, curve):
    bar = "#" * int(max(r2, 0) * 40)
    print(f"{k:2d}  {r2:14.3f}  {cum[k - 1]:19.3f}  {bar}")

# The 95% variance rule would pick this many components:
print("\ncomponents for 95% of variance:", int(np.searchsorted(cum, 0.95) + 1))
