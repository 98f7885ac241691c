"""Exact t-SNE for embedding wide bottlenecks in two dimensions.

O(n^2) memory and time; meant for up to a few thousand points.
"""

import numpy as np

from .errors import ArgumentError, DomainError

ENTROPY_TOL = 1e-5
EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
INIT_SD = 1e-4


def _sq_dist(m):
    sq = np.sum(m * m, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (m @ m.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_probabilities(latent, perplexity=30.0, max_iter=200):
    """Row-conditional affinities p(j|i) with per-row Gaussian bandwidths.

    Each row's precision is bisected until the Shannon entropy (natural log)
    of p(.|i) is within 1e-5 of ``log(perplexity)``.
    """
    x = np.asarray(latent, dtype=float)
    n = x.shape[0]
    d = _sq_dist(x)
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d[i], i)
        di = di - di.min()  # shift for stability, cancels in the normalization
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-di * beta)
            s = w.sum()
            h = np.log(s) + beta * np.dot(di, w) / s
            if abs(h - target) < ENTROPY_TOL:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        row = w / s
        p[i, :i] = row[:i]
        p[i, i + 1:] = row[i:]
    return p


def joint_probabilities(latent, perplexity=30.0):
    """Symmetrized affinities ``(P + P^T) / 2n``; sums to 1."""
    pc = conditional_probabilities(latent, perplexity)
    return (pc + pc.T) / (2.0 * pc.shape[0])


def kl_divergence(p, y):
    """KL(P || Q) for the Student-t affinities Q of embedding `y`."""
    num = 1.0 / (1.0 + _sq_dist(y))
    np.fill_diagonal(num, 0.0)
    q = num / num.sum()
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))))


def _initial(latent, init, rng):
    n = latent.shape[0]
    if init == "random":
        return rng.normal(0.0, INIT_SD, size=(n, 2))
    if init == "pca":
        c = latent - latent.mean(axis=0)
        _, _, vt = np.linalg.svd(c, full_matrices=False)
        y = c @ vt[:2].T
        if y.shape[1] < 2:
            y = np.column_stack([y, np.zeros(n)])
        return y / max(np.std(y[:, 0]), 1e-300) * INIT_SD
    raise ArgumentError(f"unknown init {init!r}")


def tsne_exact(latent, perplexity=30.0, iters=750, seed=0, init="random", return_kl=False):
    """Two-dimensional exact t-SNE embedding.

    Early exaggeration 12 for the first 250 iterations, momentum 0.5 then
    0.8, learning rate n/12, plain gradient descent with momentum.

    Returns the ``n x 2`` coordinates, or ``(coords, kl)`` with the KL
    divergence after every iteration when `return_kl` is set.
    """
    x = np.asarray(latent, dtype=float)
    if x.ndim != 2:
        raise ArgumentError("latent must be a 2-d matrix")
    if not np.all(np.isfinite(x)):
        raise DomainError("latent contains non-finite values")
    n = x.shape[0]
    if perplexity <= 0 or n < 3 * perplexity:
        raise ArgumentError(f"perplexity {perplexity} too large for {n} points (need n >= 3*perplexity)")
    if iters < 1:
        raise ArgumentError("iters must be >= 1")
    p = joint_probabilities(x, perplexity)
    rng = np.random.default_rng(seed)
    y = _initial(x, init, rng)
    update = np.zeros_like(y)
    lr = n / 12.0
    kl = []
    for it in range(iters):
        early = it < EXAGGERATION_ITERS
        pe = p * EXAGGERATION if early else p
        num = 1.0 / (1.0 + _sq_dist(y))
        np.fill_diagonal(num, 0.0)
        q = num / num.sum()
        pq = (pe - q) * num
        grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
        momentum = MOMENTUM_EARLY if early else MOMENTUM_LATE
        update = momentum * update - lr * grad
        y = y + update
        y = y - y.mean(axis=0)
        if return_kl:
            kl.append(kl_divergence(p, y))
    if return_kl:
        return y, np.array(kl)
    return y
