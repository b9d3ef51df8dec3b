import numpy as np

from sdat_lab import autodiff as ad


def central_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at flat x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def autodiff_grad(fn, x):
    tape = ad.Tape()
    t = tape.watch(np.asarray(x, dtype=np.float64))
    out = fn(t)
    return tape.gradient(out, [t])[0]


def max_rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / (np.abs(b) + floor)))


def fd_hessian(grad_fn, x, h=1e-4):
    """Dense Hessian from central differences of an exact gradient routine."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (grad_fn(x + e) - grad_fn(x - e)) / (2 * h)
    return 0.5 * (H + H.T)
