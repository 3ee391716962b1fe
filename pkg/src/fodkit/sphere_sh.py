"""Real symmetric spherical harmonics, sphere meshes and gradient tables.

Basis convention (even orders only, orthonormal over the unit sphere)::

    Y_lm = sqrt(2) * K_l^|m| * P_l^|m|(cos theta) * sin(|m| phi)        m < 0
    Y_l0 = K_l^0 * P_l^0(cos theta)
    Y_lm = sqrt(2) * (-1)^m * K_l^m * P_l^m(cos theta) * cos(m phi)     m > 0

where ``P_l^m`` is the associated Legendre function without the
Condon-Shortley phase and ``K_l^m = sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!)``.
Coefficients are ordered by ascending ``l`` and, within ``l``, ``m`` from
``-l`` to ``l``.
"""
from dataclasses import dataclass, field
from functools import lru_cache
from math import factorial, pi, sqrt

import numpy as np

from .errors import IllConditionedError, InfeasibleError, InvalidArgumentError

UNIT_TOL = 1e-12
B0_THRESHOLD = 10.0
DEFAULT_LB_LAMBDA = 0.006
Y00 = 1.0 / (2.0 * sqrt(pi))


def n_coeffs(order):
    """Number of coefficients of the even real SH basis up to ``order``."""
    if int(order) != order or order < 0 or order % 2:
        raise InvalidArgumentError(f"SH order must be even and >= 0, got {order}")
    order = int(order)
    return (order + 1) * (order + 2) // 2


def max_order_for(n_meas):
    """Largest even order whose basis size does not exceed ``n_meas``."""
    order = 0
    while n_coeffs(order + 2) <= n_meas:
        order += 2
    return order


def order_from_ncoeffs(r):
    order = 0
    while n_coeffs(order) < r:
        order += 2
    if n_coeffs(order) != r:
        raise InvalidArgumentError(f"{r} is not a valid even-SH coefficient count")
    return order


@lru_cache(maxsize=None)
def lm_indices(order):
    """Arrays ``(l, m)`` giving the degree and order of every coefficient."""
    ls, ms = [], []
    for l in range(0, order + 1, 2):
        for m in range(-l, l + 1):
            ls.append(l)
            ms.append(m)
    return np.array(ls), np.array(ms)


def laplace_beltrami(order):
    l, _ = lm_indices(order)
    return (l * (l + 1)).astype(float)


def _legendre_table(order, x):
    """Associated Legendre ``P_l^m(x)`` for 0 <= m <= l <= order, no CS phase.

    Returns an array of shape ``(order+1, order+1, len(x))`` indexed ``[l, m]``.
    """
    x = np.asarray(x, dtype=float)
    somx2 = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    P = np.zeros((order + 1, order + 1) + x.shape)
    pmm = np.ones_like(x)
    for m in range(order + 1):
        if m > 0:
            pmm = pmm * (2 * m - 1) * somx2
        P[m, m] = pmm
        if m + 1 <= order:
            P[m + 1, m] = x * (2 * m + 1) * pmm
        for l in range(m + 2, order + 1):
            P[l, m] = ((2 * l - 1) * x * P[l - 1, m] - (l + m - 1) * P[l - 2, m]) / (l - m)
    return P


def _norm(l, m):
    return sqrt((2 * l + 1) / (4 * pi) * factorial(l - m) / factorial(l + m))


def as_directions(dirs, check=True):
    """Coerce to an ``(n, 3)`` float array, optionally checking unit norm."""
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    if d.ndim != 2 or d.shape[1] != 3:
        raise InvalidArgumentError(f"directions must have shape (n, 3), got {d.shape}")
    if check:
        err = np.abs(np.einsum("ij,ij->i", d, d) - 1.0)
        if d.shape[0] and err.max() > 1e-9:
            raise InvalidArgumentError(
                f"non-unit direction (max |norm^2 - 1| = {err.max():.3g})")
    return d


@lru_cache(maxsize=None)
def _basis_plan(order):
    """Per-column (l, |m|, trig row, scale) for ``sh_basis_matrix``."""
    l, m = lm_indices(order)
    am = np.abs(m)
    scale = np.array([_norm(a, b) for a, b in zip(l, am)])
    scale = np.where(m == 0, scale, sqrt(2.0) * scale)
    scale = np.where((m > 0) & (m % 2 == 1), -scale, scale)
    return l, am, m + order, scale


def sh_basis_matrix(dirs, order):
    """Basis matrix of shape ``(n_dirs, n_coeffs(order))``.

    Parameters
    ----------
    dirs : array_like, shape (n, 3)
        Unit directions.
    order : int
        Even maximum SH order.
    """
    d = as_directions(dirs)
    z = np.clip(d[:, 2], -1.0, 1.0)
    phi = np.arctan2(d[:, 1], d[:, 0])
    P = _legendre_table(order, z)
    ks = np.arange(-order, order + 1)[:, None]
    trig = np.where(ks < 0, np.sin(-ks * phi), np.cos(ks * phi))
    l, am, row, scale = _basis_plan(order)
    return (P[l, am] * trig[row] * scale[:, None]).T


def sh_eval(coeffs, dirs):
    """Evaluate SH coefficients (shape ``(..., R)``) at ``dirs``."""
    c = np.asarray(coeffs, dtype=float)
    B = sh_basis_matrix(dirs, order_from_ncoeffs(c.shape[-1]))
    return c @ B.T


def condition_number(B):
    s = np.linalg.svd(B, compute_uv=False)
    if s[-1] <= 0 or B.shape[0] < B.shape[1]:
        return np.inf
    return float(s[0] / s[-1])


def sh_fit(values, dirs, order, lb_lambda=DEFAULT_LB_LAMBDA):
    """Least-squares SH fit with optional Laplace-Beltrami regularization.

    Minimizes ``||B c - v||^2 + lb_lambda ||L c||^2`` with ``L`` the diagonal
    ``l(l+1)``. ``values`` may carry leading batch dimensions; the last axis
    runs over ``dirs``.

    Raises
    ------
    IllConditionedError
        If ``lb_lambda == 0`` and the design matrix is rank deficient.
    """
    if lb_lambda < 0:
        raise InvalidArgumentError("lb_lambda must be >= 0")
    B = sh_basis_matrix(dirs, order)
    v = np.asarray(values, dtype=float)
    if v.shape[-1] != B.shape[0]:
        raise InvalidArgumentError(
            f"got {v.shape[-1]} values for {B.shape[0]} directions")
    if lb_lambda == 0:
        cond = condition_number(B)
        if not np.isfinite(cond) or cond > 1e10:
            raise IllConditionedError(
                f"SH design matrix is ill-conditioned (cond={cond:.3g})", cond)
        A = B
    else:
        A = np.vstack([B, sqrt(lb_lambda) * np.diag(laplace_beltrami(order))])
    # pseudo-inverse applied to the flattened batch keeps the result deterministic
    pinv = np.linalg.pinv(A)[:, : B.shape[0]]
    return v @ pinv.T


# --------------------------------------------------------------------------
# gradient tables


@dataclass
class GradientTable:
    """Acquisition geometry: b-values (s/mm^2) and direction vectors.

    Directions of b=0 rows may be zero vectors.
    """

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=float).reshape(-1)
        self.bvecs = np.asarray(self.bvecs, dtype=float).reshape(-1, 3)
        if self.bvals.shape[0] != self.bvecs.shape[0]:
            raise InvalidArgumentError("bvals and bvecs differ in length")
        if np.any(self.bvals < 0):
            raise InvalidArgumentError("negative b-value")
        dw = ~self.b0_mask
        if dw.any():
            norms = np.linalg.norm(self.bvecs[dw], axis=1)
            if np.abs(norms - 1.0).max() > 1e-9:
                raise InvalidArgumentError("diffusion-weighted rows need unit directions")

    def __len__(self):
        return self.bvals.shape[0]

    @property
    def b0_mask(self):
        return self.bvals < B0_THRESHOLD

    def shell_values(self, tol=50.0):
        """Distinct nominal b-values (b0 reported as 0), ascending."""
        out = []
        for b in np.sort(np.where(self.b0_mask, 0.0, self.bvals)):
            if not out or b - out[-1] > tol:
                out.append(float(b))
        return out

    def shell_mask(self, bvalue, tol=50.0):
        if bvalue < B0_THRESHOLD:
            return self.b0_mask.copy()
        return (~self.b0_mask) & (np.abs(self.bvals - bvalue) <= tol)

    def select(self, index):
        index = np.asarray(index)
        return GradientTable(self.bvals[index], self.bvecs[index])

    def to_dict(self):
        return {"bvals": self.bvals.tolist(), "bvecs": self.bvecs.tolist()}


# --------------------------------------------------------------------------
# sphere tessellation


@dataclass
class SphereMesh:
    vertices: np.ndarray
    faces: np.ndarray
    neighbors: list = field(repr=False)

    @property
    def neighbor_table(self):
        """Neighbors padded with -1 into a rectangular int array."""
        width = max(len(n) for n in self.neighbors)
        table = -np.ones((len(self.neighbors), width), dtype=np.intp)
        for i, n in enumerate(self.neighbors):
            table[i, : len(n)] = n
        return table

    @property
    def weights(self):
        """Quadrature weights: a third of each adjacent spherical triangle's area."""
        return _vertex_areas(self.vertices, self.faces)


def _icosahedron():
    t = (1.0 + sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _spherical_triangle_area(a, b, c):
    num = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    den = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) \
        + np.einsum("ij,ij->i", c, a)
    return 2.0 * np.arctan2(num, den)


def _vertex_areas(vertices, faces):
    areas = _spherical_triangle_area(vertices[faces[:, 0]], vertices[faces[:, 1]],
                                     vertices[faces[:, 2]])
    w = np.zeros(len(vertices))
    for k in range(3):
        np.add.at(w, faces[:, k], areas / 3.0)
    return w


@lru_cache(maxsize=8)
def tessellate_sphere(subdivisions):
    """Icosahedron subdivided ``subdivisions`` times (``10 * 4**s + 2`` vertices)."""
    if int(subdivisions) != subdivisions or not 0 <= subdivisions <= 6:
        raise InvalidArgumentError("subdivisions must be an integer in [0, 6]")
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(int(subdivisions)):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces)
    V = np.array(verts)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    nb = [set() for _ in range(len(V))]
    for a, b, c in faces:
        nb[a].update((b, c))
        nb[b].update((a, c))
        nb[c].update((a, b))
    neighbors = [np.array(sorted(s), dtype=np.intp) for s in nb]
    return SphereMesh(V, faces, neighbors)


def fibonacci_hemisphere(n, rotation_seed=None):
    """``n`` well-spread unit vectors on the upper hemisphere (spiral lattice)."""
    k = np.arange(n) + 0.5
    z = 1.0 - k / n
    r = np.sqrt(1.0 - z * z)
    phi = k * pi * (3.0 - sqrt(5.0))
    v = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if rotation_seed is not None:
        v = v @ random_rotation(np.random.default_rng(rotation_seed)).T
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rotation_matrix(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def rotation_to(src, dst):
    """Rotation matrix taking unit vector ``src`` onto ``dst``."""
    src = np.asarray(src, float) / np.linalg.norm(src)
    dst = np.asarray(dst, float) / np.linalg.norm(dst)
    axis = np.cross(src, dst)
    s = np.linalg.norm(axis)
    c = float(np.clip(src @ dst, -1.0, 1.0))
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        perp = np.eye(3)[np.argmin(np.abs(src))]
        return rotation_matrix(np.cross(src, perp), pi)
    return rotation_matrix(axis, np.arctan2(s, c))


def axis_angle_deg(a, b):
    """Antipodally invariant angle(s) in degrees between axes ``a`` and ``b``."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    cos = np.abs(np.sum(a * b, axis=-1)) / (
        np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.degrees(np.arccos(np.clip(cos, 0.0, 1.0)))


# --------------------------------------------------------------------------
# direction subsampling


def _batched_cond(stack):
    s = np.linalg.svd(stack, compute_uv=False)
    with np.errstate(divide="ignore"):
        return np.where(s[..., -1] > 0, s[..., 0] / s[..., -1], np.inf)


def _farthest_point(dirs, n):
    chosen = [0]
    min_ang = axis_angle_deg(dirs, dirs[0])
    while len(chosen) < n:
        min_ang[chosen] = -1.0
        nxt = int(np.argmax(min_ang))
        chosen.append(nxt)
        min_ang = np.minimum(min_ang, axis_angle_deg(dirs, dirs[nxt]))
    return np.array(sorted(chosen))


def _exchange_search(B, selected):
    """Swap selected/unselected rows while any swap lowers the condition number."""
    n_all = B.shape[0]
    sel = list(selected)
    best = _batched_cond(B[sel][None])[0]
    improved = True
    while improved:
        improved = False
        for slot in range(len(sel)):
            others = np.setdiff1d(np.arange(n_all), sel)
            if others.size == 0:
                return np.array(sorted(sel)), best
            stack = np.repeat(B[sel][None], others.size, axis=0)
            stack[:, slot, :] = B[others]
            conds = _batched_cond(stack)
            k = int(np.argmin(conds))
            if conds[k] < best * (1.0 - 1e-12):
                best = float(conds[k])
                sel[slot] = int(others[k])
                improved = True
    return np.array(sorted(sel)), best


def subsample_directions(table, shell_bvalue, n, order, seed=0, n_restarts=10):
    """Pick ``n`` directions of one shell minimizing the SH design condition number.

    Greedy farthest-point start, pairwise exchange passes, then
    ``n_restarts`` seeded random restarts; the best subset wins.

    Returns
    -------
    index : ndarray
        Sorted indices into ``table``.
    """
    shell_idx = np.flatnonzero(table.shell_mask(shell_bvalue))
    R = n_coeffs(order)
    if n < R:
        raise InfeasibleError(f"{n} directions cannot support {R} SH coefficients")
    if n > shell_idx.size:
        raise InfeasibleError(
            f"shell b={shell_bvalue} has {shell_idx.size} directions, {n} requested")
    if n == shell_idx.size:
        return shell_idx.copy()
    dirs = table.bvecs[shell_idx]
    B = sh_basis_matrix(dirs, order)
    sel, best = _exchange_search(B, _farthest_point(dirs, n))
    rng = np.random.default_rng(seed)
    for _ in range(n_restarts):
        start = np.sort(rng.choice(shell_idx.size, size=n, replace=False))
        cand, c = _exchange_search(B, start)
        if c < best:
            sel, best = cand, c
    return shell_idx[sel]
