"""
Looking at the Hessian of a small network
=========================================

Every estimator here uses only Hessian-vector products, computed exactly by
differentiating the gradient a second time. On a model this small we can
also build the dense Hessian column by column and check them.
"""

import numpy as np

from sdat_lab.config import TrainConfig
from sdat_lab.data import toy_pair
from sdat_lab.hessian import (
    HessianOracle,
    hutchinson_trace,
    lambda_max,
    lanczos_spectrum,
    spectral_density,
)
from sdat_lab.trainer import train

config = TrainConfig({"model.feature_dims": "10", "model.bottleneck_dim": "6",
                      "model.disc_hidden": "4", "train.epochs": "2", "train.iters": "50"})
_, trainer = train(config)
pair = toy_pair()
oracle = HessianOracle(trainer.params, pair.source.X, pair.source.y, fraction=0.5, seed=0)
n = oracle.dim
print(f"{n} feature-extractor and classifier parameters")

# dense reference: one product per basis vector
H = np.column_stack([oracle(e) for e in np.eye(n)])
eig = np.linalg.eigvalsh(0.5 * (H + H.T))
print(f"exact: lambda_max {eig.max():.4f}, trace {eig.sum():.4f}, "
      f"{np.sum(np.abs(eig) < 1e-9)} zero eigenvalues")

pw = lambda_max(oracle, n, iters=500, tol=1e-8)
print(f"power iteration: {pw.value:.4f} after {pw.iterations} products")

est, se = hutchinson_trace(oracle, n, 256, seed=0)
print(f"Hutchinson, 256 probes: {est:.3f} +- {se:.3f}")

# ReLU networks have many exactly-flat directions, so the Krylov space closes
# early; restarting from a fresh orthogonal vector recovers the rest.
short = lanczos_spectrum(oracle, n, n, seed=0)
full = lanczos_spectrum(oracle, n, n, seed=0, restart=True)
print(f"Lanczos without restart stops after {len(short.values)} steps "
      f"(breakdown={short.breakdown})")
print(f"with restart: max deviation from exact spectrum {np.max(np.abs(full.values - eig)):.1e}")

# Spectral density from a 30-step run, drawn as text
lz = lanczos_spectrum(oracle, n, 30, seed=0)
grid = np.linspace(lz.values.min() - 0.5, lz.values.max() + 0.5, 24)
dens = spectral_density(lz.values, lz.weights, grid)
for x, d in zip(grid, dens):
    print(f"{x:8.3f} {'#' * int(60 * d / dens.max())}")
