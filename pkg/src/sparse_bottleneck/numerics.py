"""Dense matrix kernels shared by the solvers: SVD, orthonormalization, k-means."""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DomainError, RankError

KMEANS_MAX_ITER = 300


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self):
        return (self.u * self.s) @ self.vt


def _check_finite(m, what="matrix"):
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{what} contains non-finite entries")
    return m


def svd(m):
    """Thin SVD with descending singular values and a fixed sign convention.

    Each left singular vector is flipped so that its largest-magnitude entry
    (first one on ties) is positive; the matching row of ``vt`` is flipped
    with it. This makes results reproducible across runs and platforms that
    agree up to sign.
    """
    m = _check_finite(m)
    if m.ndim != 2:
        raise ArgumentError(f"svd expects a 2-d matrix, got shape {m.shape}")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    if u.shape[1]:
        pivot = np.argmax(np.abs(u), axis=0)
        signs = np.sign(u[pivot, np.arange(u.shape[1])])
        signs[signs == 0] = 1.0
        u = u * signs
        vt = vt * signs[:, None]
    return SvdResult(u, s, vt)


def orthonormalize_columns(m, rtol=1e-10):
    """Orthonormal basis of the column span of `m`, via QR with positive R diagonal.

    The sign normalization makes the map idempotent: an input that already has
    orthonormal columns comes back unchanged up to rounding.
    """
    m = _check_finite(m)
    if m.ndim == 1:
        m = m[:, None]
    q, r = np.linalg.qr(m)
    d = np.diag(r)
    scale = np.max(np.abs(d)) if d.size else 0.0
    if d.size == 0 or scale == 0 or np.min(np.abs(d)) <= rtol * scale:
        raise RankError("columns are linearly dependent", rank_tol=rtol)
    return q * np.sign(d)


def _sq_distances(y, centers):
    d = (y * y).sum(1)[:, None] - 2.0 * y @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(y, k, rng):
    n = y.shape[0]
    centers = np.empty((k, y.shape[1]))
    centers[0] = y[rng.integers(n)]
    closest = ((y - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            # all points coincide with a chosen center
            idx = rng.integers(n)
        centers[j] = y[idx]
        closest = np.minimum(closest, ((y - centers[j]) ** 2).sum(1))
    return centers


def kmeans(y, k, seed=0, max_iter=KMEANS_MAX_ITER, trace=None):
    """Lloyd's k-means with k-means++ seeding.

    Parameters
    ----------
    y : array of shape (n, d)
    k : int
        Number of clusters, at most n.
    seed : int
        Seeds the k-means++ draw; identical seeds give identical labels.
    max_iter : int
        Cap on Lloyd iterations. Iteration stops earlier at an assignment
        fixpoint.
    trace : list, optional
        Receives the inertia after every assignment step.

    Returns
    -------
    labels : int array of shape (n,)
    centers : array of shape (k, d)
    inertia : float
        Sum of squared distances of points to their assigned center.
    """
    y = _check_finite(y)
    if y.ndim != 2:
        raise ArgumentError(f"kmeans expects a 2-d matrix, got shape {y.shape}")
    n = y.shape[0]
    if not 1 <= k <= n:
        raise ArgumentError(f"k must be between 1 and n={n}, got {k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(y, k, rng)
    labels = np.argmin(_sq_distances(y, centers), axis=1)
    for _ in range(max_iter):
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = y[members].mean(0)
        empty = [j for j in range(k) if not np.any(labels == j)]
        for j in empty:
            # re-seed at the point farthest from its current center
            far = ((y - centers[labels]) ** 2).sum(1)
            idx = int(np.argmax(far))
            centers[j] = y[idx]
            labels[idx] = j
        new_labels = np.argmin(_sq_distances(y, centers), axis=1)
        if trace is not None:
            trace.append(float(((y - centers[new_labels]) ** 2).sum()))
        if np.array_equal(new_labels, labels) and not empty:
            break
        labels = new_labels
    inertia = float(((y - centers[labels]) ** 2).sum())
    return labels, centers, inertia
