"""Peak extraction and apparent fiber density."""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import sphere_sh as shm
from ._kernels import local_maxima

MAX_STEP = np.radians(5.0)
_FD_STEP = 1e-4


@dataclass
class PeakSet:
    axes: np.ndarray          # (k, 3), canonical hemisphere
    amplitudes: np.ndarray    # (k,), descending

    def __len__(self):
        return len(self.amplitudes)

    def to_array(self, max_peaks=3):
        """Flat ``(x, y, z, amplitude)`` quadruples, zero padded."""
        out = np.zeros(4 * max_peaks)
        for i in range(min(len(self), max_peaks)):
            out[4 * i: 4 * i + 3] = self.axes[i]
            out[4 * i + 3] = self.amplitudes[i]
        return out

    @classmethod
    def from_array(cls, arr):
        q = np.asarray(arr, float).reshape(-1, 4)
        keep = q[:, 3] > 0
        return cls(q[keep, :3], q[keep, 3])


def canonical_axis(v):
    """Representative of ``{v, -v}`` with z >= 0 (ties resolved by y, then x)."""
    v = np.asarray(v, float)
    for c in (v[2], v[1], v[0]):
        if c != 0:
            return -v if c < 0 else v.copy()
    return v.copy()


@lru_cache(maxsize=16)
def _mesh_basis(subdivisions, order):
    mesh = shm.tessellate_sphere(subdivisions)
    return mesh, shm.sh_basis_matrix(mesh.vertices, order), mesh.neighbor_table


def _tangent_frames(p):
    helper = np.where(np.abs(p[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    e1 = np.cross(p, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(p, e1)
    return e1, e2


def _exp_map(p, e1, e2, t):
    v = t[..., 0:1] * e1 + t[..., 1:2] * e2
    ang = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(ang > 0, ang, 1.0)
    q = np.cos(ang) * p + np.where(ang > 0, np.sin(ang) / safe, 1.0) * v
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


_STENCIL = np.array([[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1],
                     [1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float) * _FD_STEP


def refine_peaks(fod, points, n_iter=10):
    """Riemannian Newton ascent of the FOD amplitude from each starting point.

    Derivatives come from a 9-point finite-difference stencil in the tangent
    plane; steps are clamped to 5 degrees and only accepted if they increase
    the amplitude. ``fod`` is one coefficient vector or one row per point.
    """
    p = np.array(points, float, copy=True)
    fod = np.asarray(fod, float)
    order = shm.order_from_ncoeffs(fod.shape[-1])
    k = len(p)
    h = _FD_STEP
    per_point = fod.ndim == 2
    if per_point:
        def amp(q):
            B = shm.sh_basis_matrix(q.reshape(-1, 3), order).reshape(k, -1, fod.shape[1])
            return (B * fod[:, None, :]).sum(axis=-1)
    else:
        def amp(q):
            return (shm.sh_basis_matrix(q.reshape(-1, 3), order) @ fod).reshape(k, -1)
    val = amp(p)[:, 0]
    active = np.ones(k, dtype=bool)
    for _ in range(n_iter):
        if not active.any():
            break
        e1, e2 = _tangent_frames(p)
        pts = _exp_map(p[:, None, :], e1[:, None, :], e2[:, None, :], _STENCIL[None])
        f = amp(pts)
        g = np.stack([(f[:, 1] - f[:, 2]) / (2 * h), (f[:, 3] - f[:, 4]) / (2 * h)], axis=1)
        hxx = (f[:, 1] - 2 * f[:, 0] + f[:, 2]) / h ** 2
        hyy = (f[:, 3] - 2 * f[:, 0] + f[:, 4]) / h ** 2
        hxy = (f[:, 5] - f[:, 6] - f[:, 7] + f[:, 8]) / (4 * h * h)
        det = hxx * hyy - hxy ** 2
        newton_ok = (hxx < 0) & (det > 0)
        step = np.where(
            newton_ok[:, None],
            -np.stack([hyy * g[:, 0] - hxy * g[:, 1], -hxy * g[:, 0] + hxx * g[:, 1]], axis=1)
            / np.where(newton_ok, det, 1.0)[:, None],
            g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300) * MAX_STEP)
        norm = np.linalg.norm(step, axis=1, keepdims=True)
        step = np.where(norm > MAX_STEP, step * (MAX_STEP / np.maximum(norm, 1e-300)), step)
        pending = active.copy()
        taken = np.zeros(k)
        for _half in range(8):
            q = _exp_map(p, e1, e2, step)
            qv = amp(q)[:, 0]
            better = pending & (qv >= val)
            p = np.where(better[:, None], q, p)
            val = np.where(better, qv, val)
            taken = np.where(better, np.linalg.norm(step, axis=1), taken)
            pending &= ~better
            if not pending.any():
                break
            step = step * 0.5
        active &= taken > 1e-9
    return p, val


def _seed_points(fod, mesh_subdivisions, rel_thresh):
    """Distinct 1-ring local maxima worth refining, strongest first."""
    order = shm.order_from_ncoeffs(len(fod))
    mesh, B, nb = _mesh_basis(mesh_subdivisions, order)
    vals = B @ fod
    vmax = vals.max()
    if not vmax > 0:
        return np.zeros((0, 3)), np.zeros(0)
    seeds = local_maxima(vals, nb)
    seeds = seeds[vals[seeds] >= 0.5 * rel_thresh * vmax]
    seeds = seeds[np.argsort(-vals[seeds], kind="stable")]
    kept = []
    for s in seeds:
        if all(shm.axis_angle_deg(mesh.vertices[s], mesh.vertices[j]) > 1.0 for j in kept):
            kept.append(s)
    return mesh.vertices[kept], vals[kept]


def _select_peaks(pts, amps, min_sep_deg, rel_thresh, max_peaks):
    empty = PeakSet(np.zeros((0, 3)), np.zeros(0))
    order_idx = np.argsort(-amps, kind="stable")
    pts, amps = pts[order_idx], amps[order_idx]
    if not len(amps) or not amps[0] > 0:
        return empty
    ok = amps >= rel_thresh * amps[0]
    pts, amps = pts[ok], amps[ok]
    axes, out_amps = [], []
    for p, a in zip(pts, amps):
        if all(shm.axis_angle_deg(p, q) >= min_sep_deg for q in axes):
            axes.append(canonical_axis(p))
            out_amps.append(a)
        if len(axes) == max_peaks:
            break
    return PeakSet(np.array(axes).reshape(-1, 3), np.array(out_amps))


def extract_peaks(fod, mesh_subdivisions=3, min_sep_deg=45.0, rel_thresh=0.5, max_peaks=3,
                  refine=True):
    """Extract up to ``max_peaks`` fiber directions from FOD coefficients.

    Seeds are 1-ring local maxima on the mesh, refined by Newton ascent. A
    peak survives if its amplitude is at least ``rel_thresh`` times the
    largest peak and it lies at least ``min_sep_deg`` (axis metric) from
    every stronger accepted peak.
    """
    fod = np.asarray(fod, float)
    pts, amps = _seed_points(fod, mesh_subdivisions, rel_thresh)
    if refine and len(pts):
        pts, amps = refine_peaks(np.tile(fod, (len(pts), 1)), pts)
    return _select_peaks(pts, amps, min_sep_deg, rel_thresh, max_peaks)


def extract_peaks_volume(fod_volume, mask=None, max_peaks=3, mesh_subdivisions=3,
                         min_sep_deg=45.0, rel_thresh=0.5, refine=True):
    """Peaks of every masked voxel as a ``(X, Y, Z, 4 * max_peaks)`` array.

    Same result as calling ``extract_peaks`` per voxel; refinement is batched.
    """
    fv = np.asarray(fod_volume, float)
    dims = fv.shape[:3]
    flat = fv.reshape(-1, fv.shape[-1])
    out = np.zeros((flat.shape[0], 4 * max_peaks))
    m = np.ones(flat.shape[0], bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    idx = np.flatnonzero(m)
    seeds = [_seed_points(flat[v], mesh_subdivisions, rel_thresh) for v in idx]
    counts = np.array([len(s[1]) for s in seeds], dtype=int)
    if counts.sum():
        pts = np.vstack([s[0] for s in seeds if len(s[1])])
        amps = np.concatenate([s[1] for s in seeds])
        owner = np.repeat(idx, counts)
        if refine:
            pts, amps = refine_peaks(flat[owner], pts)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i, v in enumerate(idx):
            a, b = bounds[i], bounds[i + 1]
            if b > a:
                out[v] = _select_peaks(pts[a:b], amps[a:b], min_sep_deg, rel_thresh,
                                       max_peaks).to_array(max_peaks)
    return out.reshape(tuple(dims) + (4 * max_peaks,))


def peak_counts(peaks_volume):
    q = np.asarray(peaks_volume).reshape(peaks_volume.shape[:-1] + (-1, 4))
    return (q[..., 3] > 0).sum(axis=-1)


def afd_total(fod):
    """Sphere integral of the FOD: only the l=0 term contributes."""
    return np.asarray(fod, float)[..., 0] / shm.Y00
