"""Numerical checks of the smoothness results on concave quadratic games.

A game is d(phi) = c - 1/2 (phi - phi*)^T A (phi - phi*) with A symmetric PSD.
Its gradient is -A (phi - phi*), it is L-smooth with L = lambda_max(A), and
its maximum d* = c is attained at phi*.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import child_rng, make_rng

SLACK = 1e-9


@dataclass
class QuadraticGame:
    A: np.ndarray
    phi_star: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.phi_star = np.asarray(self.phi_star, dtype=np.float64)
        if not np.allclose(self.A, self.A.T, rtol=0, atol=1e-12):
            raise ValueError("A must be symmetric")
        if np.linalg.eigvalsh(self.A).min() < -1e-12:
            raise ValueError("A must be positive semi-definite")

    @property
    def L(self) -> float:
        return float(np.linalg.eigvalsh(self.A).max())

    def value(self, phi) -> float:
        r = np.asarray(phi) - self.phi_star
        return self.c - 0.5 * float(r @ self.A @ r)

    def grad(self, phi) -> np.ndarray:
        return -self.A @ (np.asarray(phi) - self.phi_star)


def random_game(rng: np.random.Generator, dim: int, isotropic: bool = False) -> QuadraticGame:
    if isotropic:
        A = rng.uniform(0.1, 5.0) * np.eye(dim)
    else:
        B = rng.standard_normal((dim, dim))
        Q, _ = np.linalg.qr(B)
        eig = rng.uniform(0.01, 5.0, dim)
        A = (Q * eig) @ Q.T
        A = 0.5 * (A + A.T)
    return QuadraticGame(A, rng.standard_normal(dim), float(rng.standard_normal()))


def lemma1_slack(f, grad, w, f_star: float, L: float) -> float:
    """(f(w) - f*) - ||grad f(w)||^2 / (2L); non-negative for L-smooth f."""
    g = grad(w)
    return (f(w) - f_star) - float(g @ g) / (2.0 * L)


def check_lemma1(instances: int = 1000, seed: int = 0, dim_range=(1, 8)) -> dict:
    """Smoothness inequality on random convex quadratics f(w) = 1/2 (w - w*)^T A (w - w*)."""
    worst = np.inf
    n_pass = 0
    for i in range(instances):
        rng = child_rng(seed, i)
        dim = int(rng.integers(dim_range[0], dim_range[1] + 1))
        game = random_game(rng, dim)
        w = game.phi_star + rng.standard_normal(dim) * rng.uniform(0.01, 10.0)
        slack = lemma1_slack(
            lambda x: -game.value(x) + game.c,
            lambda x: -game.grad(x),
            w,
            0.0,
            game.L,
        )
        worst = min(worst, slack)
        n_pass += slack >= -SLACK
    return {
        "n_instances": instances,
        "n_pass": int(n_pass),
        "n_skipped": 0,
        "max_violation": float(max(0.0, -worst)),
    }


@dataclass
class AscentGapResult:
    lhs: float
    rhs: float
    cos_alpha: float
    passed: bool
    skipped: bool = False


def check_theorem2(game: QuadraticGame, phi, eta: float, rho: float) -> AscentGapResult:
    """Compare one plain ascent step with one step along the gradient taken at phi + eps.

    eps = -rho g / ||g|| is the inner minimizer of the smoothed ascent
    objective. The bound is d(phi') - d(phi'') <= eta (1 - cos a) sqrt(2 L (d* - d(phi))).
    """
    if eta <= 0 or rho <= 0:
        raise ValueError("eta and rho must be positive")
    phi = np.asarray(phi, dtype=np.float64)
    g = game.grad(phi)
    gn = float(np.linalg.norm(g))
    if gn == 0.0:
        return AscentGapResult(0.0, 0.0, 1.0, True, skipped=True)
    eps = -rho * g / gn
    g2 = game.grad(phi + eps)
    g2n = float(np.linalg.norm(g2))
    if g2n == 0.0:
        return AscentGapResult(0.0, 0.0, 1.0, True, skipped=True)
    phi1 = phi + eta * g / gn
    phi2 = phi + eta * g2 / g2n
    cos_a = float(np.clip(g @ g2 / (gn * g2n), -1.0, 1.0))
    lhs = game.value(phi1) - game.value(phi2)
    gap = max(game.c - game.value(phi), 0.0)
    rhs = eta * (1.0 - cos_a) * np.sqrt(2.0 * game.L * gap)
    return AscentGapResult(float(lhs), float(rhs), cos_a, bool(lhs <= rhs + SLACK))


def fuzz_theorem2(
    instances: int = 1000,
    rhos=(0.01, 0.1, 1.0),
    eta: float = 1e-3,
    seed: int = 0,
    dim_range=(2, 8),
) -> dict:
    n_pass = n_skip = total = 0
    worst = 0.0
    for i in range(instances):
        rng = child_rng(seed, i)
        dim = int(rng.integers(dim_range[0], dim_range[1] + 1))
        game = random_game(rng, dim)
        phi = game.phi_star + rng.standard_normal(dim) * rng.uniform(0.1, 5.0)
        for rho in rhos:
            total += 1
            r = check_theorem2(game, phi, eta, rho)
            if r.skipped:
                n_skip += 1
                continue
            n_pass += r.passed
            worst = max(worst, r.lhs - r.rhs)
    return {
        "n_instances": total,
        "n_pass": int(n_pass),
        "n_skipped": int(n_skip),
        "max_violation": float(max(0.0, worst)),
    }


def sam_perturbation(grad, rho: float) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    n = float(np.linalg.norm(grad))
    return np.zeros_like(grad) if n == 0.0 else rho * grad / n


def check_sam_ascent(grad, rho: float, n_directions: int = 10_000, seed: int = 0) -> dict:
    """Check eps = rho g/||g|| beats rho u for random unit u on the linearized loss."""
    grad = np.asarray(grad, dtype=np.float64)
    eps = sam_perturbation(grad, rho)
    best = float(eps @ grad)
    U = make_rng(seed).standard_normal((n_directions, grad.size))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    challengers = rho * (U @ grad)
    top = float(challengers.max())
    return {
        "eps": eps,
        "eps_gain": best,
        "best_random_gain": top,
        "passed": bool(top <= best + 1e-12),
    }
