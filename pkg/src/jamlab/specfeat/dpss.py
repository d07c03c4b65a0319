"""Slepian (DPSS) tapers from the symmetric tridiagonal eigenproblem.

The k largest eigenvalues of the commuting tridiagonal matrix

    d_i = ((n - 1 - 2i) / 2)^2 cos(2 pi W),   e_i = i (n - i) / 2,   W = nw / n

are bracketed by Sturm-sequence multisection and their eigenvectors obtained
by inverse iteration. Storage is O(n k), so n = 20000 is cheap.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded


class EigenSolverError(ArithmeticError):
    pass


@dataclass(frozen=True)
class DpssTapers:
    n: int
    nw: float
    k: int
    tapers: np.ndarray  # (k, n), rows orthonormal
    eigenvalues: np.ndarray  # band energy concentration per taper


def slepian_tridiagonal(n, nw):
    w = nw / n
    i = np.arange(n, dtype=np.float64)
    diag = ((n - 1 - 2 * i) / 2) ** 2 * np.cos(2 * np.pi * w)
    off = i[1:] * (n - i[1:]) / 2
    return diag, off


def sturm_count(diag, off_sq, x, pivmin):
    """Number of eigenvalues strictly below each entry of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    q = diag[0] - x
    q = np.where(np.abs(q) < pivmin, -pivmin, q)
    count = (q < 0).astype(np.int64)
    for i in range(1, diag.shape[0]):
        q = (diag[i] - x) - off_sq[i - 1] / q
        q = np.where(np.abs(q) < pivmin, -pivmin, q)
        count += q < 0
    return count


def largest_eigenvalues(diag, off, k, points=31, rtol=4e-16, max_passes=200):
    """The k largest eigenvalues (descending) by Sturm multisection."""
    n = diag.shape[0]
    off_sq = off * off
    radius = np.abs(off)
    gl = np.concatenate([[0], radius]) + np.concatenate([radius, [0]])
    lo0, hi0 = float(np.min(diag - gl)), float(np.max(diag + gl))
    scale = max(abs(lo0), abs(hi0), 1.0)
    pivmin = np.finfo(float).tiny * max(1.0, float(off_sq.max(initial=0.0)))
    targets = n - 1 - np.arange(k)  # ascending-order indices of the wanted eigenvalues
    lo = np.full(k, lo0)
    hi = np.full(k, hi0)
    frac = np.arange(1, points + 1) / (points + 1)
    for _ in range(max_passes):
        width = hi - lo
        if np.all(width <= rtol * scale + 2 * np.finfo(float).eps * np.maximum(np.abs(lo), np.abs(hi))):
            return (lo + hi) / 2
        grid = lo[:, None] + width[:, None] * frac[None, :]
        counts = sturm_count(diag, off_sq, grid.ravel(), pivmin).reshape(k, points)
        # count <= target means the target eigenvalue is >= grid point
        below = counts <= targets[:, None]
        n_below = below.sum(axis=1)
        new_lo = np.where(n_below > 0, grid[np.arange(k), np.maximum(n_below - 1, 0)], lo)
        new_hi = np.where(n_below < points, grid[np.arange(k), np.minimum(n_below, points - 1)], hi)
        lo, hi = new_lo, new_hi
    raise EigenSolverError(f"bisection did not converge: widths {hi - lo}")


def inverse_iteration(diag, off, lam, previous=(), iters=3, tol=1e-13):
    """Eigenvector of the tridiagonal matrix for eigenvalue estimate ``lam``.

    Each iterate is re-orthogonalised against ``previous`` vectors.
    """
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = off
    ab[1] = diag - lam
    ab[2, :-1] = off
    # nudge the shift off the exact eigenvalue so the factorisation stays regular
    ab[1] -= 1e-10 * max(1.0, abs(lam))
    v = np.ones(n) + np.linspace(0.0, 1.0, n) ** 2
    v /= np.linalg.norm(v)
    delta = np.inf
    for it in range(iters + 20):
        w = solve_banded((1, 1), ab, v)
        for u in previous:
            w -= (u @ w) * u
        norm = np.linalg.norm(w)
        if not np.isfinite(norm) or norm == 0:
            raise EigenSolverError(f"inverse iteration broke down at eigenvalue {lam:.6g}")
        w /= norm
        delta = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
        v = w
        if it + 1 >= iters and delta < tol:
            return v
    if delta < 1e-8:
        return v
    raise EigenSolverError(f"inverse iteration stalled (step {delta:.3g}) at eigenvalue {lam:.6g}")


def band_concentration(v, w):
    """Fraction of |V(f)|^2 inside [-w, w], integrated exactly via autocorrelation."""
    n = v.shape[0]
    spec = np.fft.rfft(v, 2 * n)
    r = np.fft.irfft(np.abs(spec) ** 2, 2 * n)[:n]
    m = np.arange(1, n)
    return float(2 * w * r[0] + 2 * np.sum(r[1:] * np.sin(2 * np.pi * w * m) / (np.pi * m)))


def _fix_sign(v, order):
    n = v.shape[0]
    if order % 2 == 0:
        return v if v.sum() >= 0 else -v
    thresh = max(1e-7, 1.0 / n)
    lead = v[v * v > thresh]
    if lead.size and lead[0] < 0:
        return -v
    return v


def _compute(n, nw, k):
    if n < 1 or k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n, got n={n}, k={k}")
    if not 0 < nw < n / 2:
        raise ValueError("time-bandwidth product must lie in (0, n/2)")
    diag, off = slepian_tridiagonal(n, nw)
    lams = largest_eigenvalues(diag, off, k)
    vecs = []
    for order, lam in enumerate(lams):
        v = inverse_iteration(diag, off, lam, previous=vecs)
        vecs.append(_fix_sign(v, order))
    tapers = np.array(vecs)
    conc = np.array([band_concentration(v, nw / n) for v in tapers])
    tapers.setflags(write=False)
    conc.setflags(write=False)
    return DpssTapers(n, float(nw), k, tapers, conc)


_cache: dict = {}
_cache_lock = threading.Lock()


def dpss_tapers(n, nw, k):
    """Orthonormal DPSS tapers (k, n); memoised per (n, nw, k).

    ``k`` up to ``2 nw - 1`` keeps every taper well concentrated; larger
    values are allowed but their concentrations fall off quickly.
    """
    key = (int(n), float(nw), int(k))
    hit = _cache.get(key)
    if hit is not None:
        return hit
    with _cache_lock:
        if key not in _cache:
            _cache[key] = _compute(*key)
        return _cache[key]
