"""Pure-Python reference implementations of the hot kernels."""
import numpy as np


def _ls(E, f, P):
    return np.linalg.lstsq(E[:, P], f, rcond=None)[0]


def nnls(E, f, max_iter=500, tol=1e-12, init_passive=None):
    """Lawson-Hanson active-set NNLS: min ||E mu - f|| subject to mu >= 0.

    ``init_passive`` optionally warm-starts the passive set. Returns
    ``(mu, iterations, converged)``. Ties on entry are broken by the lowest
    column index.
    """
    E = np.ascontiguousarray(E, dtype=float)
    f = np.asarray(f, dtype=float)
    m, n = E.shape
    mu = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    blocked = np.zeros(n, dtype=bool)
    it = 0
    if init_passive is not None and len(init_passive):
        init = np.unique(np.asarray(init_passive, dtype=int))
        init = init[(init >= 0) & (init < n)]
        if init.size and np.linalg.matrix_rank(E[:, init]) == init.size:
            passive[init] = True
        while passive.any():
            it += 1
            P = np.flatnonzero(passive)
            z = _ls(E, f, P)
            if np.all(z > 0):
                mu[P] = z
                break
            passive[P[z <= 0]] = False
    w = E.T @ (f - E @ mu)
    while True:
        cand = ~passive & ~blocked & (w > tol)
        if not cand.any() or passive.sum() >= m:
            break
        t = int(np.argmax(np.where(cand, w, -np.inf)))
        passive[t] = True
        P = np.flatnonzero(passive)
        z = _ls(E, f, P)
        if z[np.searchsorted(P, t)] <= 0:
            # entering column cannot move off zero: roundoff guard
            passive[t] = False
            blocked[t] = True
            continue
        while True:
            it += 1
            if it > max_iter:
                return mu, it, False
            if np.all(z > 0):
                mu[:] = 0.0
                mu[P] = z
                blocked[:] = False
                break
            neg = z <= 0
            cur = mu[P]
            ratios = np.where(neg, cur / np.where(neg, cur - z, 1.0), np.inf)
            j = int(np.argmin(ratios))
            cur = cur + ratios[j] * (z - cur)
            drop = (cur <= 1e-300) | (neg & (cur <= np.abs(z) * 1e-15))
            drop[j] = True
            cur[drop] = 0.0
            mu[P] = cur
            passive[P[drop]] = False
            P = np.flatnonzero(passive)
            z = _ls(E, f, P)
        w = E.T @ (f - E @ mu)
    return mu, it, True


def local_maxima(values, neighbor_table):
    """Indices of positive vertices not exceeded by any neighbor.

    On plateaus only the lowest-index vertex is kept.
    """
    v = np.asarray(values, dtype=float)
    nb = np.asarray(neighbor_table)
    valid = nb >= 0
    nv = np.where(valid, v[np.where(valid, nb, 0)], -np.inf)
    idx = np.arange(v.size)[:, None]
    beats = (v[:, None] > nv) | ((v[:, None] == nv) & (idx < nb)) | ~valid
    return np.flatnonzero((v > 0) & beats.all(axis=1))
