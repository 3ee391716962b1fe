"""Constrained spherical deconvolution.

One non-negative QP engine serves all three solvers::

    minimize ||B x - s||^2   subject to   A x >= 0

With ``B^T B = R^T R`` the problem becomes a least-distance problem in
``z = R x`` whose dual is a plain NNLS in the multipliers ``mu``; the
Lawson-Hanson kernel solves it and ``x = R^-1 (d + G^T mu)`` with
``G = A R^-1`` and ``d = R^-T B^T s``. Because ``B`` and ``A`` are shared by
every voxel of a volume, the factorization is computed once
(:class:`QpFactor`) and each voxel costs a single NNLS.
"""
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from . import sphere_sh as shm
from ._kernels import nnls
from .errors import (FodkitError, InvalidArgumentError, InvalidModelError,
                     NonConvergedError)
from .forward_model import conv_diag

_RIDGE_RATIO = 1e-12


class InfeasibleModelError(InvalidModelError):
    code = "infeasible-model"


@dataclass
class SolverConfig:
    mesh_subdivisions: int = 3
    kkt_tol: float = 1e-6
    max_iter: int = 2000
    ss3t_max_outer: int = 20
    ss3t_tol: float = 1e-4
    init: str = "csd"
    amplitude_eps: float = 1e-10

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.ss3t_tol <= 0 or self.amplitude_eps <= 0:
            raise InvalidArgumentError("solver tolerances must be > 0")
        if self.init not in ("csd", "zero"):
            raise InvalidArgumentError("init must be 'csd' or 'zero'")

    def to_dict(self):
        return asdict(self)


@dataclass
class QpDiagnostics:
    iterations: int
    objective: float
    stationarity: float
    dual_feasibility: float
    primal_feasibility: float
    complementarity: float
    tolerance: float
    ridge: float = 0.0
    fallback: bool = False

    @property
    def kkt_ok(self):
        return max(self.stationarity, self.dual_feasibility, self.primal_feasibility,
                   self.complementarity) <= self.tolerance

    def to_dict(self):
        return asdict(self)


class QpFactor:
    """Factorization of ``min ||Bx - s||^2 s.t. Ax >= 0`` reusable across ``s``.

    A tiny ridge is added to ``B^T B`` only when it is numerically singular
    (e.g. fewer independent measurements than unknowns).
    """

    def __init__(self, B, A=None):
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if B.shape[0] < 1:
            raise InvalidArgumentError("B needs at least one row")
        n = B.shape[1]
        A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[1] != n:
            raise InvalidArgumentError("A and B disagree on the number of variables")
        H = B.T @ B
        ev = np.linalg.eigvalsh(H)
        top = max(ev[-1], 1e-300)
        self.ridge = 0.0
        if ev[0] < _RIDGE_RATIO * top:
            self.ridge = 1e-10 * top
        self.B, self.A = B, A
        self.R = cholesky(H + self.ridge * np.eye(n), lower=False)
        self.Rinv = solve_triangular(self.R, np.eye(n), lower=False)
        # NNLS matrix of the dual: columns are G^T rows
        self.E = np.ascontiguousarray((A @ self.Rinv).T)
        self._enorm = float(np.linalg.norm(self.E)) if A.shape[0] else 0.0

    def solve(self, s, kkt_tol=1e-6, max_iter=2000, warm=None):
        """Solve for data ``s``; ``warm`` is a previous multiplier vector."""
        s = np.asarray(s, dtype=float)
        Bts = self.B.T @ s
        d = solve_triangular(self.R, Bts, trans="T", lower=False)
        fallback = False
        if self.A.shape[0]:
            tol = 1e-13 * max(1.0, self._enorm * np.linalg.norm(d))
            init = None if warm is None else np.flatnonzero(warm > 0)
            mu, it, ok = nnls(self.E, -d, max_iter, tol, init)
            if not ok:
                mu, it2 = _dual_projected_gradient(self.E, -d, mu)
                it += it2
                fallback = True
        else:
            mu, it = np.zeros(0), 0
        x = self.Rinv @ (d + self.E @ mu)
        diag = self.kkt(x, mu, s, kkt_tol)
        diag.iterations = int(it)
        diag.fallback = fallback
        if not diag.kkt_ok:
            raise NonConvergedError(
                "QP solve did not reach the KKT tolerance", best=x, diagnostics=diag)
        return x, mu, diag

    def kkt(self, x, mu, s, kkt_tol):
        r = self.B @ x - s
        Ax = self.A @ x
        Bts_norm = float(np.linalg.norm(self.B.T @ s))
        return QpDiagnostics(
            iterations=0,
            objective=float(r @ r),
            stationarity=float(np.linalg.norm(self.B.T @ r - self.A.T @ mu)),
            dual_feasibility=float(max(0.0, -mu.min())) if mu.size else 0.0,
            primal_feasibility=float(max(0.0, -Ax.min())) if Ax.size else 0.0,
            complementarity=float(abs(mu @ Ax)) if mu.size else 0.0,
            tolerance=kkt_tol * max(1.0, Bts_norm),
            ridge=self.ridge,
        )


def _dual_projected_gradient(E, f, mu0, n_restarts=3, n_iter=5000):
    """Accelerated projected gradient on the dual NNLS; used on degeneracy only."""
    L = np.linalg.norm(E, 2) ** 2
    mu = np.maximum(mu0, 0.0)
    it = 0
    for _ in range(n_restarts):
        y, t = mu.copy(), 1.0
        for _ in range(n_iter):
            it += 1
            nxt = np.maximum(y - (E.T @ (E @ y - f)) / L, 0.0)
            t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            y = nxt + ((t - 1) / t_next) * (nxt - mu)
            mu, t = nxt, t_next
    return mu, it


def nnqp_solve(B, s, A=None, cfg=None):
    """Solve ``min ||Bx - s||^2 s.t. Ax >= 0``.

    Returns
    -------
    x : ndarray
    diagnostics : QpDiagnostics
        Iterations and the four KKT residuals (with multipliers ``mu``
        satisfying ``B^T (Bx - s) = A^T mu``).

    Raises
    ------
    NonConvergedError
        If the KKT tolerance is not met; ``best`` holds the last iterate.
    """
    cfg = cfg or SolverConfig()
    x, mu, diag = QpFactor(B, A).solve(s, cfg.kkt_tol, cfg.max_iter)
    diag.multipliers = mu
    return x, diag


# --------------------------------------------------------------------------
# design matrices


def constraint_matrix(order, cfg):
    mesh = shm.tessellate_sphere(cfg.mesh_subdivisions)
    return shm.sh_basis_matrix(mesh.vertices, order)


def _row_basis(table, order):
    dirs = table.bvecs.copy()
    dirs[table.b0_mask] = (0.0, 0.0, 1.0)  # only l=0 survives at b=0
    return shm.sh_basis_matrix(dirs, order)


def _nominal_shells(table, bvalues):
    """Map each row to the closest of the given nominal b-values."""
    b = np.where(table.b0_mask, 0.0, table.bvals)
    bv = np.asarray(bvalues, float)
    return bv[np.argmin(np.abs(b[:, None] - bv[None, :]), axis=1)]


def three_tissue_design(table, responses, order):
    """Columns ``[wm (R) | gm | csf]``; GM/CSF columns carry ``exp(-b d)`` per unit."""
    shells = table.shell_values()
    missing = [b for b in shells if not _has_response(responses, b)]
    if missing:
        raise InvalidArgumentError(f"responses missing for shells {missing}")
    keys = [_response_key(responses, b) for b in shells]
    row_b = _nominal_shells(table, keys)
    Y = _row_basis(table, order)
    R = shm.n_coeffs(order)
    M = np.zeros((len(table), R + 2))
    y00 = shm.Y00
    for b in keys:
        rows = row_b == b
        M[rows, :R] = Y[rows] * conv_diag(responses.wm[b], order)
        M[rows, R] = responses.gm[b][0] * y00
        M[rows, R + 1] = responses.csf[b][0] * y00
    return M


def _response_key(responses, b, tol=50.0):
    for k in responses.wm:
        if abs(k - b) <= tol:
            return k
    raise InvalidArgumentError(f"no response for b={b}")


def _has_response(responses, b):
    try:
        _response_key(responses, b)
        return True
    except InvalidArgumentError:
        return False


# --------------------------------------------------------------------------
# solvers


@dataclass
class TissueDecomposition:
    wm: np.ndarray
    gm: float = 0.0
    csf: float = 0.0
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def fractions(self):
        """Tissue signal fractions ``(wm, gm, csf)``; WM is the FOD integral."""
        return np.array([self.wm[0] / shm.Y00, self.gm, self.csf])


class SingleTissueCSD:
    def __init__(self, dirs, response, order=8, cfg=None):
        self.cfg = cfg or SolverConfig()
        self.order = order
        B = shm.sh_basis_matrix(dirs, order) * conv_diag(response, order)
        self.A = constraint_matrix(order, self.cfg)
        self.qp = QpFactor(B, self.A)

    def fit(self, signal):
        x, mu, diag = self.qp.solve(signal, self.cfg.kkt_tol, self.cfg.max_iter)
        return x, diag


def csd_single(signal, dirs, response, order=8, cfg=None):
    """Single-shell single-tissue CSD with hard non-negativity on the constraint mesh."""
    return SingleTissueCSD(dirs, response, order, cfg).fit(signal)[0]


class MSMTCSD:
    def __init__(self, table, responses, order=8, cfg=None):
        self.cfg = cfg or SolverConfig()
        if len(table.shell_values()) < 3:
            raise InfeasibleModelError(
                "MSMT-CSD needs at least 3 distinct b-values; use SS3T-CSD instead")
        self.order = order
        self.R = shm.n_coeffs(order)
        self.M = three_tissue_design(table, responses, order)
        A_wm = constraint_matrix(order, self.cfg)
        A = np.zeros((A_wm.shape[0] + 2, self.R + 2))
        A[: A_wm.shape[0], : self.R] = A_wm
        A[-2, self.R] = A[-1, self.R + 1] = 1.0
        self.qp = QpFactor(self.M, A)

    def fit(self, signal):
        x, mu, diag = self.qp.solve(signal, self.cfg.kkt_tol, self.cfg.max_iter)
        r = self.M @ x - signal
        return TissueDecomposition(x[: self.R], max(x[self.R], 0.0), max(x[self.R + 1], 0.0),
                                   {"qp": diag.to_dict(), "residual": float(r @ r)})


def msmt_csd(signals, table, responses, order=8, cfg=None):
    return MSMTCSD(table, responses, order, cfg).fit(np.asarray(signals, float))


class SS3TCSD:
    """Single-shell three-tissue CSD by alternating two constrained sub-problems.

    Step A holds the WM FOD fixed and fits non-negative GM and CSF; step B
    holds CSF fixed and fits the WM FOD jointly with GM. The WM FOD starts
    from single-tissue CSD of the diffusion-weighted shell.
    """

    def __init__(self, table, responses, order=8, cfg=None):
        self.cfg = cfg or SolverConfig()
        shells = table.shell_values()
        if len(shells) != 2 or shells[0] != 0.0:
            raise InvalidModelError(
                f"SS3T-CSD needs exactly two b-values (b0 and one shell), got {shells}")
        self.order = order
        self.R = R = shm.n_coeffs(order)
        self.M = three_tissue_design(table, responses, order)
        A_wm = constraint_matrix(order, self.cfg)
        self.shell_rows = ~table.b0_mask
        self.init_qp = QpFactor(self.M[self.shell_rows, :R], A_wm)
        self.iso_qp = QpFactor(self.M[:, R:], np.eye(2))
        A_b = np.zeros((A_wm.shape[0] + 1, R + 1))
        A_b[:-1, :R] = A_wm
        A_b[-1, R] = 1.0
        self.wm_gm_qp = QpFactor(self.M[:, : R + 1], A_b)

    def _objective(self, x, s):
        r = self.M @ x - s
        return float(r @ r)

    def fit(self, signal):
        s = np.asarray(signal, float)
        cfg, R = self.cfg, self.R
        x = np.zeros(R + 2)
        if cfg.init == "csd":
            x[:R], _, _ = self.init_qp.solve(s[self.shell_rows], cfg.kkt_tol, cfg.max_iter)
        trace = []
        converged = False
        mu_a = mu_b = None
        for it in range(cfg.ss3t_max_outer):
            prev = x.copy()
            iso, mu_a, _ = self.iso_qp.solve(s - self.M[:, :R] @ x[:R], cfg.kkt_tol,
                                             cfg.max_iter, mu_a)
            x[R:] = np.maximum(iso, 0.0)
            wg, mu_b, _ = self.wm_gm_qp.solve(s - self.M[:, R + 1] * x[R + 1], cfg.kkt_tol,
                                              cfg.max_iter, mu_b)
            x[: R + 1] = wg
            x[R] = max(x[R], 0.0)
            trace.append(self._objective(x, s))
            scale = max(np.abs(prev).max(), np.abs(x).max(), 1e-300)
            if np.abs(x - prev).max() / scale < cfg.ss3t_tol:
                converged = True
                break
        out = TissueDecomposition(x[:R], x[R], x[R + 1],
                                  {"objective_trace": trace, "outer_iterations": len(trace),
                                   "converged": converged, "residual": trace[-1]})
        if not converged:
            raise NonConvergedError("SS3T outer iteration cap reached", best=out,
                                    diagnostics=out.diagnostics)
        return out


def ss3t_csd(signals, table, responses, order=8, cfg=None):
    return SS3TCSD(table, responses, order, cfg).fit(signals)


# --------------------------------------------------------------------------
# volumes


@dataclass
class FitResult:
    fod: np.ndarray           # (X, Y, Z, R)
    gm: np.ndarray            # (X, Y, Z)
    csf: np.ndarray
    residual: np.ndarray      # per-voxel squared residual
    failures: list = field(default_factory=list)

    def report(self):
        return {"n_failures": len(self.failures), "failures": self.failures[:50]}


def _build_solver(method, table, responses, order, cfg):
    if method == "msmt":
        return MSMTCSD(table, responses, order, cfg)
    if method == "ss3t":
        return SS3TCSD(table, responses, order, cfg)
    if method == "csd":
        shells = [b for b in table.shell_values() if b > 0]
        if len(shells) != 1:
            raise InvalidModelError("single-tissue CSD needs exactly one non-zero shell")
        if not table.b0_mask.any():
            raise InvalidModelError("single-tissue CSD needs a b0 for normalization")
        key = _response_key(responses, shells[0])
        return _NormalizedCSD(table, responses.wm[key], order, cfg)
    raise InvalidArgumentError(f"unknown method {method!r}")


class _NormalizedCSD:
    """Adapter: b0-normalize, then single-tissue CSD on the shell rows."""

    def __init__(self, table, response, order, cfg):
        self.b0 = int(np.flatnonzero(table.b0_mask)[0])
        self.rows = ~table.b0_mask
        self.solver = SingleTissueCSD(table.bvecs[self.rows], response, order, cfg)

    def fit(self, signal):
        s0 = signal[self.b0]
        if not s0 > 0:
            return TissueDecomposition(np.zeros(self.solver.qp.B.shape[1]),
                                       diagnostics={"residual": 0.0, "b0_flagged": True})
        y = signal[self.rows] / s0
        x, diag = self.solver.fit(y)
        r = self.solver.qp.B @ x - y
        return TissueDecomposition(x, diagnostics={"qp": diag.to_dict(),
                                                   "residual": float(r @ r)})


def worker_count(n_jobs=None):
    if n_jobs is None:
        n_jobs = int(os.environ.get("FODKIT_THREADS", "1") or 1)
    return max(1, int(n_jobs))


def fit_volume(volume, method, responses, order=8, cfg=None, mask=None, n_jobs=None):
    """Fit every masked voxel; failures are recorded, never fatal.

    Non-converged voxels keep the solver's best iterate.
    """
    cfg = cfg or SolverConfig()
    solver = _build_solver(method, volume.table, responses, order, cfg)
    dims = volume.dims
    data = volume.data.reshape(-1, volume.data.shape[-1])
    if mask is None:
        mask = np.ones(dims, dtype=bool)
    idx = np.flatnonzero(np.asarray(mask, bool).reshape(-1))
    R = shm.n_coeffs(order)
    fod = np.zeros((data.shape[0], R))
    gm = np.zeros(data.shape[0])
    csf = np.zeros(data.shape[0])
    resid = np.zeros(data.shape[0])
    failures = {}

    def work(chunk):
        for v in chunk:
            try:
                dec = solver.fit(data[v])
            except NonConvergedError as err:
                failures[int(v)] = err.code
                dec = err.best if isinstance(err.best, TissueDecomposition) else None
                if dec is None:
                    continue
            except FodkitError as err:
                failures[int(v)] = err.code
                continue
            fod[v] = dec.wm
            gm[v] = dec.gm
            csf[v] = dec.csf
            resid[v] = dec.diagnostics.get("residual", 0.0)

    jobs = worker_count(n_jobs)
    if jobs == 1:
        work(idx)
    else:
        with ThreadPoolExecutor(jobs) as pool:
            list(pool.map(work, np.array_split(idx, jobs * 4)))
    shape = tuple(dims)
    return FitResult(fod.reshape(shape + (R,)), gm.reshape(shape), csf.reshape(shape),
                     resid.reshape(shape),
                     [{"voxel": k, "error": failures[k]} for k in sorted(failures)])
