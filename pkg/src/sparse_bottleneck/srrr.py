"""Reduced-rank regression and its group-lasso sparse variant.

The model predicts ``Y`` from ``X`` through a rank-r bottleneck,
``Y ~ X W V^T`` with ``V^T V = I``. The sparse variant minimizes::

    ||Y - X W V^T||^2 / n  +  lam * sum_i ||W_i.||_2  +  ridge * ||W||^2

by alternating a block coordinate descent over the rows of ``W`` (fixed V)
with an orthogonal Procrustes update of ``V`` (fixed W). The data term is
divided by the sample count n so that ``lam`` does not depend on n.

All inputs are assumed column-centered.
"""

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ArgumentError, ConvergenceWarning, EmptyModelError, RankError, SolverFault
from .numerics import svd

CD_TOL = 1e-7
CD_MAX_SWEEPS = 1000
ALT_TOL = 1e-6
ALT_MAX = 100
PATH_MAX_STEPS = 60
PATH_LAMBDA_RANGE = 1e-4


@dataclass
class RrrModel:
    w: np.ndarray
    v: np.ndarray
    lam: float = 0.0
    ridge: float = 0.0
    relaxed: bool = False
    x_mean: np.ndarray = None
    y_mean: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def rank(self):
        return self.w.shape[1]

    @property
    def selected(self):
        return np.flatnonzero(np.any(self.w != 0, axis=1))

    def _center_x(self, x):
        return x if self.x_mean is None else x - self.x_mean

    def latent(self, x):
        return self._center_x(np.asarray(x, dtype=float)) @ self.w

    def predict(self, x):
        pred = self.latent(x) @ self.v.T
        return pred if self.y_mean is None else pred + self.y_mean

    def to_dict(self):
        p, r = self.w.shape
        out = {
            "kind": "srrr",
            "w_shape": [p, r],
            "v_shape": list(self.v.shape),
            "w": self.w.ravel().tolist(),
            "v": self.v.ravel().tolist(),
            "rank": r,
            "lambda": self.lam,
            "ridge": self.ridge,
            "relaxed": self.relaxed,
            "selected": self.selected.tolist(),
            "diagnostics": _jsonable(self.diagnostics),
        }
        if self.x_mean is not None:
            out["x_mean"] = self.x_mean.tolist()
        if self.y_mean is not None:
            out["y_mean"] = self.y_mean.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        w = np.array(d["w"], dtype=float).reshape(d["w_shape"])
        v = np.array(d["v"], dtype=float).reshape(d["v_shape"])
        return cls(
            w, v, lam=d["lambda"], ridge=d["ridge"], relaxed=d.get("relaxed", False),
            x_mean=np.array(d["x_mean"]) if "x_mean" in d else None,
            y_mean=np.array(d["y_mean"]) if "y_mean" in d else None,
            diagnostics=d.get("diagnostics", {}),
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def rrr_loss(x, y, w, v):
    """Unpenalized data term ``||Y - X W V^T||^2 / n``."""
    return float(np.sum((y - x @ w @ v.T) ** 2) / x.shape[0])


def penalized_loss(x, y, w, v, lam, ridge):
    return (rrr_loss(x, y, w, v)
            + lam * float(np.sum(np.linalg.norm(w, axis=1)))
            + ridge * float(np.sum(w * w)))


def r2_train(x, y, model):
    return 1.0 - float(np.sum((y - x @ model.w @ model.v.T) ** 2) / np.sum(y * y))


def _check_xy(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ArgumentError(f"x and y must be 2-d with equal row counts, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ArgumentError("need at least two samples")
    return x, y


def _check_rank(rank, p, q):
    if not 1 <= rank <= min(p, q):
        raise ArgumentError(f"rank must be between 1 and min(p, q) = {min(p, q)}, got {rank}")


def fit_rrr(x, y, rank, ridge=0.0):
    """Closed-form (ridge) reduced-rank regression.

    Minimizes ``||Y - X W V^T||^2 + ridge ||W||^2`` over W and orthonormal V.
    Note the data term here is *not* divided by n, unlike the sparse solver;
    :func:`fit_srrr` converts by passing ``n * ridge``. Writing the ridge term
    as extra rows ``sqrt(ridge) I`` of X turns the problem into plain RRR on
    augmented data, so ``B = (X^T X + ridge I)^-1 X^T Y`` and V holds the
    top-r right singular vectors of the augmented fit ``[X B; sqrt(ridge) B]``.
    With ridge = 0 this is the SVD of the fitted values ``X B``.
    """
    x, y = _check_xy(x, y)
    n, p = x.shape
    q = y.shape[1]
    _check_rank(rank, p, q)
    if ridge < 0:
        raise ArgumentError("ridge must be >= 0")
    c = ridge
    ux, sx, vxt = np.linalg.svd(x, full_matrices=False)
    if c == 0 and (p > n or sx[-1] <= 1e-10 * sx[0]):
        raise RankError("X^T X is singular; use ridge > 0")
    b = vxt.T @ ((sx / (sx ** 2 + c))[:, None] * (ux.T @ y))
    fitted = x @ b
    if c > 0:
        fitted = np.vstack([fitted, math.sqrt(c) * b])
    v = svd(fitted).vt[:rank].T
    w = b @ v
    model = RrrModel(w, v, lam=0.0, ridge=ridge)
    model.diagnostics["loss"] = rrr_loss(x, y, w, v)
    return model


def procrustes_step(x, y, w, strict=True):
    """Orthonormal decoder minimizing ``||Y - X W V^T||^2`` for fixed W.

    The loss equals ``||Y||^2 - 2 tr(V^T Y^T X W) + ||X W||^2``, so the
    optimum is the polar factor ``U Ut^T`` of ``Y^T (X W) = U S Ut^T``.
    A rank-deficient cross-product leaves the polar factor non-unique; that
    raises :class:`RankError` unless ``strict`` is False, in which case the
    SVD's completion is used (still a minimizer).
    """
    m = np.asarray(y).T @ (np.asarray(x) @ np.asarray(w))
    res = svd(m)
    if strict and (res.s[0] == 0 or res.s[-1] <= 1e-12 * res.s[0]):
        raise RankError("Y^T X W is rank deficient; decoder direction undetermined",
                        singular_values=res.s.tolist())
    return res.u @ res.vt


@numba.njit(cache=True)
def _cd_sweep(w, gw, gram, c, lam, ridge, rows):
    """One pass of exact group soft-thresholding over `rows`; returns max row change."""
    p, r = w.shape
    max_change = 0.0
    s = np.empty(r)
    for i in rows:
        gii = gram[i, i]
        snorm = 0.0
        for k in range(r):
            s[k] = c[i, k] - gw[i, k] + gii * w[i, k]
            snorm += s[k] * s[k]
        snorm = math.sqrt(snorm)
        denom = gii + ridge
        if 2.0 * snorm <= lam or denom <= 0.0:
            shrink = 0.0
        else:
            shrink = (1.0 - lam / (2.0 * snorm)) / denom
        change = 0.0
        for k in range(r):
            new = shrink * s[k]
            delta = new - w[i, k]
            if delta != 0.0:
                w[i, k] = new
                for j in range(p):
                    gw[j, k] += gram[j, i] * delta
            change += delta * delta
        change = math.sqrt(change)
        if change > max_change:
            max_change = change
    return max_change


def encoder_step(x, yv, lam, ridge, w_init, tol=CD_TOL, max_sweeps=CD_MAX_SWEEPS, gram=None, info=None):
    """Block coordinate descent for the encoder with the decoder fixed.

    Minimizes ``||YV - X W||^2 / n + lam sum_i ||W_i.|| + ridge ||W||^2``.
    Row i is set exactly to zero when ``2 ||X_i^T r_i|| / n <= lam`` with
    ``r_i`` the partial residual; otherwise it gets the exact group
    soft-threshold update. Rows are visited in ascending order. After each
    full sweep that still moves, the solver cycles over the nonzero rows only
    until they settle, then re-checks all rows; both kinds of pass count
    toward ``max_sweeps``.

    Parameters
    ----------
    x : array (n, p)
    yv : array (n, r)
        The projected response ``Y V``.
    lam, ridge : float
        Group-lasso and ridge strengths, both >= 0.
    w_init : array (p, r)
        Warm start.
    gram : array (p, p), optional
        Precomputed ``X^T X / n``.
    info : dict, optional
        Filled with ``sweeps``, ``converged`` and ``max_change``.

    Returns
    -------
    w : array (p, r)
    """
    if lam < 0 or ridge < 0:
        raise ArgumentError("lam and ridge must be >= 0")
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    g = x.T @ x / n if gram is None else gram
    c = x.T @ np.asarray(yv, dtype=float) / n
    w = np.array(w_init, dtype=float, copy=True)
    gw = g @ w
    all_rows = np.arange(p)
    sweeps = 0
    converged = False
    change = np.inf
    while sweeps < max_sweeps:
        change = _cd_sweep(w, gw, g, c, lam, ridge, all_rows)
        sweeps += 1
        if change < tol:
            converged = True
            break
        active = np.flatnonzero(np.any(w != 0, axis=1))
        while sweeps < max_sweeps and active.size:
            inner = _cd_sweep(w, gw, g, c, lam, ridge, active)
            sweeps += 1
            if inner < tol:
                break
    if not converged:
        kkt = kkt_residuals(x, yv, w, lam, ridge)
        warnings.warn(ConvergenceWarning(
            f"encoder step stopped after {sweeps} sweeps; max row change {change:.3g}, "
            f"KKT residual {kkt['stationarity']:.3g}"))
    if info is not None:
        info.update(sweeps=sweeps, converged=converged, max_change=float(change))
    return w


def lambda_max(x, yv):
    """Smallest group-lasso strength at which W = 0 is optimal for fixed V."""
    n = x.shape[0]
    return float(np.max(2.0 * np.linalg.norm(x.T @ yv, axis=1) / n))


def kkt_residuals(x, yv, w, lam, ridge=0.0):
    """Subgradient optimality residuals of an encoder solution.

    Returns ``stationarity`` (max over nonzero rows of
    ``||2 X_i^T (YV - XW)/n - 2 ridge W_i - lam W_i/||W_i||||``) and
    ``zero_ratio`` (max over zero rows of ``2||X_i^T (YV - XW)||/n`` divided
    by lam; optimality needs it <= 1).
    """
    n = x.shape[0]
    grad = 2.0 * x.T @ (yv - x @ w) / n
    norms = np.linalg.norm(w, axis=1)
    nz = norms > 0
    stat = 0.0
    if nz.any():
        resid = grad[nz] - 2.0 * ridge * w[nz] - lam * w[nz] / norms[nz, None]
        stat = float(np.max(np.linalg.norm(resid, axis=1)))
    zero_max = float(np.max(np.linalg.norm(grad[~nz], axis=1))) if (~nz).any() else 0.0
    if lam > 0:
        ratio = zero_max / lam
    else:
        ratio = 0.0 if zero_max == 0 else np.inf
    return {"stationarity": stat, "zero_grad": zero_max, "zero_ratio": ratio}


def fit_srrr(x, y, rank, lam, ridge=0.0, max_alt=ALT_MAX, tol=ALT_TOL, init=None):
    """Sparse RRR by alternating encoder (group lasso) and decoder (Procrustes) steps.

    Starts from ridge RRR with the same ridge strength (or ridge 1e-6 in
    :func:`fit_rrr` units when ``ridge`` is 0 and X^T X is singular) unless
    ``init`` supplies ``(w, v)``. Stops when the relative change of the
    penalized loss falls below ``tol`` or after ``max_alt`` alternations,
    then re-solves the encoder once more for the final decoder. The loss is
    checked to be non-increasing; an increase beyond rounding raises
    :class:`SolverFault`.
    """
    x, y = _check_xy(x, y)
    n, p = x.shape
    q = y.shape[1]
    _check_rank(rank, p, q)
    if lam < 0 or ridge < 0:
        raise ArgumentError("lam and ridge must be >= 0")
    if init is None:
        start = _initial_rrr(x, y, rank, ridge)
        w, v = start.w, start.v
    else:
        w, v = (np.array(a, dtype=float) for a in init)
    gram = x.T @ x / n
    loss = penalized_loss(x, y, w, v, lam, ridge)
    history = [loss]
    sweeps = []
    converged = False
    info = {}
    for it in range(max_alt):
        w = encoder_step(x, y @ v, lam, ridge, w, gram=gram, info=info)
        sweeps.append(info["sweeps"])
        after_w = penalized_loss(x, y, w, v, lam, ridge)
        _check_descent(history[-1], after_w, it, "encoder")
        history.append(after_w)
        if not np.any(w):
            converged = True
            break
        v = procrustes_step(x, y, w, strict=False)
        new = penalized_loss(x, y, w, v, lam, ridge)
        _check_descent(after_w, new, it, "decoder")
        history.append(new)
        prev = loss
        loss = new
        if abs(prev - loss) <= tol * max(abs(prev), 1e-300):
            converged = True
            break
    if np.any(w) and sweeps:
        # re-solve the encoder for the final decoder so (W, V) meets the encoder KKT conditions
        w = encoder_step(x, y @ v, lam, ridge, w, gram=gram, info=info)
        sweeps.append(info["sweeps"])
        final = penalized_loss(x, y, w, v, lam, ridge)
        _check_descent(history[-1], final, len(sweeps), "final encoder")
        history.append(final)
    model = RrrModel(w, v, lam=lam, ridge=ridge)
    kkt = kkt_residuals(x, y @ v, w, lam, ridge)
    model.diagnostics = {
        "alternations": len(sweeps),
        "converged": converged,
        "cd_sweeps": sweeps,
        "loss_history": history,
        "kkt_stationarity": kkt["stationarity"],
        "kkt_zero_ratio": kkt["zero_ratio"],
    }
    return model


def _initial_rrr(x, y, rank, ridge):
    try:
        return fit_rrr(x, y, rank, ridge * x.shape[0])
    except RankError:
        return fit_rrr(x, y, rank, 1e-6)


def _check_descent(before, after, it, which):
    if after > before + 1e-10 * max(1.0, abs(before)):
        raise SolverFault(f"penalized loss increased in {which} step",
                          alternation=it, before=before, after=after)


def relaxed_refit(x, y, model):
    """Second stage of the relaxed elastic net.

    Refits ridge RRR on the selected columns of X only, passing the model's
    group-lasso strength as the ridge strength of :func:`fit_rrr`. Unselected rows of
    the returned encoder are exactly zero.
    """
    x, y = _check_xy(x, y)
    sel = model.selected
    if sel.size == 0:
        raise EmptyModelError("cannot refit a model with no selected predictors")
    rank = model.rank
    sub_rank = min(rank, sel.size, y.shape[1])
    sub = fit_rrr(x[:, sel], y, sub_rank, ridge=model.lam)
    w = np.zeros_like(model.w)
    w[sel, :sub_rank] = sub.w
    v = sub.v
    if sub_rank < rank:
        # pad the decoder to keep the requested rank; the extra encoder columns are zero
        complement = svd(np.eye(y.shape[1]) - v @ v.T).u[:, : rank - sub_rank]
        v = np.hstack([v, complement])
    out = RrrModel(w, v, lam=model.lam, ridge=model.lam, relaxed=True)
    out.diagnostics = {"stage1": {k: model.diagnostics.get(k) for k in ("alternations", "converged")},
                       "loss": rrr_loss(x, y, w, v)}
    for key in ("path_exact", "path", "target_genes"):
        if key in model.diagnostics:
            out.diagnostics[key] = model.diagnostics[key]
    return out


def regularization_path(x, y, rank, target_genes, ridge=0.0, max_steps=PATH_MAX_STEPS):
    """Find the group-lasso strength that selects `target_genes` predictors.

    Bisects log(lam) between ``lam_max`` (W = 0 is optimal for the RRR
    decoder) and ``lam_max * 1e-4``. Each probe is warm-started from the fit
    at the nearest larger evaluated lam. If no probe hits the target exactly
    the closest count is returned (ties go to the smaller lam, i.e. more
    genes) and ``model.diagnostics['path_exact']`` is False.

    Returns ``(lam, model)``.
    """
    x, y = _check_xy(x, y)
    n, p = x.shape
    if not 1 <= target_genes <= p:
        raise ArgumentError(f"target_genes must be between 1 and p={p}, got {target_genes}")
    _check_rank(rank, p, y.shape[1])
    start = _initial_rrr(x, y, rank, ridge)
    lmax = lambda_max(x, y @ start.v)
    hi, lo = math.log(lmax), math.log(lmax * PATH_LAMBDA_RANGE)
    evaluated = {}  # lam -> model

    def solve(lam):
        larger = [l for l in evaluated if l > lam]
        if larger:
            warm = evaluated[min(larger)]
            init = (warm.w, warm.v)
        else:
            init = (np.zeros_like(start.w), start.v)
        m = fit_srrr(x, y, rank, lam, ridge, init=init)
        evaluated[lam] = m
        return m

    best = None
    path = []
    for step in range(max_steps + 1):
        # first probe is the lower end of the bracket, then midpoints
        log_lam = lo if step == 0 else 0.5 * (lo + hi)
        lam = math.exp(log_lam)
        m = solve(lam)
        count = int(m.selected.size)
        path.append((lam, count))
        key = (abs(count - target_genes), lam)
        if best is None or key < (abs(best[2] - target_genes), best[0]):
            best = (lam, m, count)
        if count == target_genes:
            break
        if step == 0:
            if count < target_genes:
                break  # even the smallest lam does not reach the target
            continue
        if count > target_genes:
            lo = log_lam
        else:
            hi = log_lam
    lam, model, count = best
    model.diagnostics["path_exact"] = count == target_genes
    model.diagnostics["path"] = [[l, c] for l, c in sorted(path)]
    model.diagnostics["target_genes"] = target_genes
    return lam, model
