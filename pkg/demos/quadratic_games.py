"""
Smoothing the discriminator in a concave quadratic game
=======================================================

The discriminator objective is modelled as a concave quadratic
f(phi) = c - (phi - phi*)^T A (phi - phi*) / 2. One gradient-ascent step from
the sharpness-aware point (phi + eps, eps against the gradient) gains less than
the plain step, and the gap is bounded by eta (1 - cos a) sqrt(2 L (f* - f)),
with a the angle between the two gradients.

The bound comes from a first-order expansion. The exact gap also has a
curvature term of order eta^2, which can push it past the bound when
cos a is close to 1. This script shows both.
"""

import numpy as np

from sdat_lab.theory import check_lemma1, check_theorem2, fuzz_theorem2, random_game

print("smoothness inequality f(w) - f* >= |grad|^2 / (2L):", check_lemma1(1000, seed=0))

res = fuzz_theorem2(1000, rhos=(0.01, 0.1, 1.0), eta=1e-3, seed=0)
print("gap bound, eta = 1e-3:", res)

# The excess over the bound shrinks like eta^2 while the bound itself is
# linear in eta, so the relative violation vanishes as the step gets small.
rng = np.random.default_rng(3)
cases = []
for _ in range(400):
    game = random_game(rng, int(rng.integers(2, 8)))
    cases.append((game, game.phi_star + rng.standard_normal(game.A.shape[0]) * 0.5))
for eta in (1e-2, 1e-3, 1e-4):
    results = [check_theorem2(g, phi, eta, 0.01) for g, phi in cases]
    worst = max(r.lhs - r.rhs for r in results)
    print(f"eta {eta:.0e}: largest (gap - bound) = {worst:.2e}")
