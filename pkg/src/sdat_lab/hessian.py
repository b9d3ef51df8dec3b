"""Matrix-free curvature diagnostics for the task loss.

Everything here talks to the Hessian only through ``matvec(v) -> H v``; a
:class:`HessianOracle` supplies that for a trained model on a frozen data
subset, and tests can pass any symmetric matrix via :func:`dense_oracle`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import cross_entropy
from .models import ModelParams, classify, features
from .rng import child_rng, make_rng

Matvec = Callable[[np.ndarray], np.ndarray]


class HessianOracle:
    """H v for the source classification loss over the (psi, theta) partitions.

    Discriminator weights are held fixed and not part of the vector. The data
    subset is drawn once, with ``seed``, when the oracle is built.
    """

    def __init__(self, params: ModelParams, X, y, fraction: float = 0.5, seed: int = 0):
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        self.params = params.copy()
        self.seed = seed
        n = len(y)
        m = max(1, int(round(fraction * n)))
        idx = np.sort(make_rng(seed).choice(n, size=m, replace=False))
        self.X = np.asarray(X, dtype=np.float64)[idx]
        self.y = np.asarray(y)[idx]
        self.scope = params.scope("psi", "theta")
        self.theta = self.params.flat[self.scope].copy()
        self.n_calls = 0

    @property
    def dim(self) -> int:
        return self.theta.size

    def loss(self, theta_t):
        full = self.params.flat.copy()
        full[self.scope] = 0.0
        flat = ad.add(ad.Tensor(full), _embed(theta_t, self.scope))
        p = self.params.views(flat)
        return cross_entropy(classify(p, features(p, self.X)), self.y)

    def loss_value(self) -> float:
        return self.loss(ad.Tensor(self.theta)).item()

    def __call__(self, v: np.ndarray) -> np.ndarray:
        self.n_calls += 1
        return ad.hvp(self.loss, self.theta, v)

    def checksum(self) -> str:
        return params_checksum(self.params.flat)


def _embed(theta_t, scope: np.ndarray):
    """Scatter a scoped vector back into full-length coordinates (differentiably)."""
    (idx,) = np.nonzero(scope)
    lo, hi = int(idx[0]), int(idx[-1]) + 1
    if hi - lo != idx.size:
        raise ValueError("Hessian scope must be contiguous")
    n = scope.size
    parts = []
    if lo:
        parts.append(ad.Tensor(np.zeros(lo)))
    parts.append(theta_t)
    if hi < n:
        parts.append(ad.Tensor(np.zeros(n - hi)))
    return ad.concat(parts) if len(parts) > 1 else theta_t


def params_checksum(flat: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(flat, dtype="<f8").tobytes()).hexdigest()[:16]


def dense_oracle(H) -> Matvec:
    H = np.asarray(H, dtype=np.float64)
    return lambda v: H @ v


@dataclass
class PowerResult:
    value: float
    vector: np.ndarray
    iterations: int
    converged: bool


def lambda_max(
    matvec: Matvec,
    dim: int,
    iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    v0=None,
) -> PowerResult:
    """Dominant (largest-magnitude) eigenvalue by power iteration.

    Stops when the eigen-residual ``||Hv - lambda v||`` drops below
    ``tol * max(1, |lambda|)``, or when successive Rayleigh quotients differ by
    less than that and the residual is below ``sqrt(tol) * max(1, |lambda|)``. Running out of iterations is reported through
    ``converged=False`` rather than raised.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    v = make_rng(seed).standard_normal(dim) if v0 is None else np.asarray(v0, float).copy()
    v /= np.linalg.norm(v)
    prev = None
    lam = 0.0
    for it in range(1, iters + 1):
        w = matvec(v)
        lam = float(v @ w)
        thresh = tol * max(1.0, abs(lam))
        resid = float(np.linalg.norm(w - lam * v))
        # a stalled Rayleigh quotient only counts once the vector has settled too
        # (quotient error ~ residual^2); otherwise +/- pairs fake convergence
        settled = resid < np.sqrt(tol) * max(1.0, abs(lam))
        if resid < thresh or (prev is not None and abs(lam - prev) < thresh and settled):
            return PowerResult(lam, v, it, True)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return PowerResult(0.0, v, it, True)
        v = w / norm
        prev = lam
    return PowerResult(lam, v, iters, False)


def rademacher(rng: np.random.Generator, dim: int) -> np.ndarray:
    return rng.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0


def hutchinson_trace(matvec: Matvec, dim: int, n_probes: int, seed: int = 0):
    """Rademacher estimate of tr(H): returns (mean of z^T H z, sample std / sqrt(n))."""
    if n_probes < 2:
        raise ValueError("need at least two probes for an error bar")
    samples = np.empty(n_probes)
    for i in range(n_probes):
        z = rademacher(child_rng(seed, i), dim)
        samples[i] = z @ matvec(z)
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n_probes))


@dataclass
class LanczosResult:
    values: np.ndarray
    weights: np.ndarray
    breakdown: bool


def lanczos_spectrum(
    matvec: Matvec,
    dim: int,
    m: int,
    seed: int = 0,
    v0=None,
    breakdown_tol: float = 1e-10,
    restart: bool = False,
) -> LanczosResult:
    """m-step Lanczos with full reorthogonalization.

    Ritz values are the eigenvalues of the tridiagonal matrix; each weight is
    the squared first component of the matching eigenvector, so weights sum
    to one. The default start vector is a normalized Rademacher draw.

    When the Krylov space becomes invariant (beta ~ 0) the iteration stops
    early with ``breakdown=True``. With ``restart=True`` it instead continues
    from a fresh random vector orthogonal to everything seen so far, which is
    what a full (m = dim) tridiagonalization of an operator with repeated
    eigenvalues needs. Restarted blocks carry zero weight.
    """
    if not 1 <= m <= dim:
        raise ValueError(f"m must lie in [1, {dim}]")
    if v0 is None:
        v = rademacher(make_rng(seed), dim)
    else:
        v = np.asarray(v0, dtype=np.float64).copy()
    v /= np.linalg.norm(v)
    Q = np.zeros((m, dim))
    alpha, beta = [], []
    breakdown = False
    scale = 0.0
    n_restarts = 0
    for j in range(m):
        Q[j] = v
        w = matvec(v)
        a = float(v @ w)
        alpha.append(a)
        if j > 0 and beta[-1] > 0.0:
            w = w - a * v - beta[-1] * Q[j - 1]
        else:
            w = w - a * v
        # two passes of Gram-Schmidt against every stored vector
        for _ in range(2):
            w = w - Q[: j + 1].T @ (Q[: j + 1] @ w)
        b = float(np.linalg.norm(w))
        scale = max(scale, abs(a), b)
        if j == m - 1:
            break
        if b <= breakdown_tol * max(scale, 1.0):
            breakdown = True
            if not restart:
                break
            n_restarts += 1
            w = rademacher(child_rng(seed, 1000 + n_restarts), dim)
            for _ in range(2):
                w = w - Q[: j + 1].T @ (Q[: j + 1] @ w)
            beta.append(0.0)
            v = w / np.linalg.norm(w)
            continue
        beta.append(b)
        v = w / b
    k = len(alpha)
    T = np.diag(alpha) + np.diag(beta[: k - 1], 1) + np.diag(beta[: k - 1], -1)
    vals, vecs = np.linalg.eigh(T)
    weights = vecs[0] ** 2
    weights = weights / weights.sum()
    return LanczosResult(vals, weights, breakdown)


def density_bandwidth(values) -> float:
    values = np.asarray(values)
    return 0.05 * (float(values.max() - values.min()) + 1e-12)


def spectral_density(values, weights, grid, sigma: float | None = None) -> np.ndarray:
    """Gaussian-smoothed eigen-spectral density sum_i w_i N(x; v_i, sigma^2) on ``grid``."""
    values, weights, grid = map(np.asarray, (values, weights, grid))
    if sigma is None:
        sigma = density_bandwidth(values)
    z = (grid[:, None] - values[None, :]) / sigma
    return (np.exp(-0.5 * z * z) / (sigma * np.sqrt(2 * np.pi))) @ weights


@dataclass
class SpectrumReport:
    lambda_max: float
    trace_estimate: float
    trace_stderr: float
    ritz: list
    n_params: int
    n_probes: int
    lanczos_steps: int
    seed: int
    params_checksum: str
    density_sigma: float
    lambda_max_converged: bool
    lanczos_breakdown: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SpectrumReport":
        return cls(**json.loads(text))


def spectrum_report(
    oracle: HessianOracle,
    n_probes: int = 64,
    lanczos_m: int = 40,
    seed: int = 0,
    power_iters: int = 200,
    tol: float = 1e-6,
) -> SpectrumReport:
    n = oracle.dim
    m = min(lanczos_m, n)
    pw = lambda_max(oracle, n, iters=power_iters, tol=tol, seed=seed)
    tr, se = hutchinson_trace(oracle, n, n_probes, seed=seed)
    lz = lanczos_spectrum(oracle, n, m, seed=seed)
    return SpectrumReport(
        lambda_max=pw.value,
        trace_estimate=tr,
        trace_stderr=se,
        ritz=[[float(v), float(w)] for v, w in zip(lz.values, lz.weights)],
        n_params=n,
        n_probes=n_probes,
        lanczos_steps=len(lz.values),
        seed=seed,
        params_checksum=oracle.checksum(),
        density_sigma=density_bandwidth(lz.values),
        lambda_max_converged=pw.converged,
        lanczos_breakdown=lz.breakdown,
    )
