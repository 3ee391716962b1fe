"""Synthetic diffusion signals: multi-tensor voxels, tissue compartments,
Rician noise, responses, DTI and phantom generation.

All tissue parameters are synthetic modeling choices. Diffusivities are in
mm^2/s and b-values in s/mm^2.
"""
from dataclasses import dataclass, field, asdict
from math import pi, sqrt

import numpy as np

from . import sphere_sh as shm
from .errors import InfeasibleError, InvalidArgumentError

WM, GM, CSF = "wm", "gm", "csf"

# tissue model anchors: (age in weeks PMA) -> parameters
_REF_AGE = 40.0
_YOUNG_AGE = 30.0
_WM_L1 = (1.7e-3, 1.2e-3)    # (a=40, a=30)
_WM_LPERP = (0.2e-3, 0.5e-3)
_D_GM_REF = 0.9e-3
_D_CSF = 3.0e-3
AGE_RANGE = (26.0, 46.0)


# --------------------------------------------------------------------------
# tensors


@dataclass
class DiffusionTensor:
    """Eigen-decomposed tensor; ``evals`` descending, ``evecs`` as columns."""

    evals: np.ndarray
    evecs: np.ndarray

    @classmethod
    def axial(cls, l_par, l_perp, axis=(0.0, 0.0, 1.0)):
        if not l_par >= l_perp > 0:
            raise InvalidArgumentError("need l_par >= l_perp > 0")
        R = shm.rotation_to((0.0, 0.0, 1.0), axis)
        evecs = R @ np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        return cls(np.array([l_par, l_perp, l_perp], float), evecs)

    @property
    def axis(self):
        return self.evecs[:, 0]

    @property
    def matrix(self):
        return (self.evecs * self.evals) @ self.evecs.T


def tensor_signal(bvalue, direction, tensor):
    """Normalized single-tensor attenuation ``exp(-b d^T D d)``."""
    if np.any(np.asarray(bvalue) < 0):
        raise InvalidArgumentError("b-value must be >= 0")
    d = np.asarray(direction, float)
    adc = np.einsum("...i,ij,...j->...", d, tensor.matrix, d)
    return np.exp(-np.asarray(bvalue, float) * adc)


def fa(tensor):
    """Fractional anisotropy of a tensor (or of a raw eigenvalue triple)."""
    ev = np.asarray(getattr(tensor, "evals", tensor), float)
    norm = np.linalg.norm(ev)
    if norm == 0:
        return 0.0
    return float(sqrt(1.5) * np.linalg.norm(ev - ev.mean()) / norm)


def dti_fit(signal, table, min_eval=1e-9):
    """Log-linear least-squares tensor fit.

    Samples with non-positive signal are dropped. At least six usable
    diffusion-weighted samples and one usable b0 are required.
    """
    s = np.asarray(signal, float)
    usable = s > 0
    b0 = table.b0_mask & usable
    dw = ~table.b0_mask & usable
    if dw.sum() < 6 or b0.sum() < 1:
        raise InfeasibleError("DTI fit needs >= 6 usable diffusion-weighted samples and a b0")
    g = table.bvecs[usable]
    b = np.where(table.b0_mask, 0.0, table.bvals)[usable]
    X = np.column_stack([
        np.ones(g.shape[0]),
        -b * g[:, 0] ** 2, -b * g[:, 1] ** 2, -b * g[:, 2] ** 2,
        -2 * b * g[:, 0] * g[:, 1], -2 * b * g[:, 0] * g[:, 2], -2 * b * g[:, 1] * g[:, 2],
    ])
    coef, *_ = np.linalg.lstsq(X, np.log(s[usable]), rcond=None)
    dxx, dyy, dzz, dxy, dxz, dyz = coef[1:]
    D = np.array([[dxx, dxy, dxz], [dxy, dyy, dyz], [dxz, dyz, dzz]])
    w, v = np.linalg.eigh(D)
    order = np.argsort(w)[::-1]
    return DiffusionTensor(np.maximum(w[order], min_eval), v[:, order])


# --------------------------------------------------------------------------
# tissue model


@dataclass(frozen=True)
class TissueParams:
    wm_l_par: float
    wm_l_perp: float
    d_gm: float
    d_csf: float

    @property
    def wm_md(self):
        return (self.wm_l_par + 2 * self.wm_l_perp) / 3.0


def tissue_params(age=_REF_AGE):
    """Age-modulated tissue diffusivities (synthetic, linear in age).

    Younger white matter is less anisotropic and grey matter diffusivity
    approaches the white-matter mean diffusivity.
    """
    a = float(np.clip(age, *AGE_RANGE))
    t = (_REF_AGE - a) / (_REF_AGE - _YOUNG_AGE)
    l_par = _WM_L1[0] + t * (_WM_L1[1] - _WM_L1[0])
    l_perp = max(_WM_LPERP[0] + t * (_WM_LPERP[1] - _WM_LPERP[0]), 0.02e-3)
    md = (l_par + 2 * l_perp) / 3.0
    md_ref = (_WM_L1[0] + 2 * _WM_LPERP[0]) / 3.0
    gap = (_D_GM_REF - md_ref) * max((a - 28.0) / (_REF_AGE - 28.0), 0.05)
    return TissueParams(l_par, l_perp, md + gap, _D_CSF)


# --------------------------------------------------------------------------
# voxel configuration and simulation


@dataclass
class FiberConfig:
    axes: np.ndarray                  # (k, 3)
    weights: np.ndarray               # (k,), sums to 1
    f_wm: float = 1.0
    f_gm: float = 0.0
    f_csf: float = 0.0

    def __post_init__(self):
        self.axes = np.atleast_2d(np.asarray(self.axes, float))
        self.weights = np.atleast_1d(np.asarray(self.weights, float))
        if not 1 <= len(self.axes) <= 3 or len(self.axes) != len(self.weights):
            raise InvalidArgumentError("a voxel holds 1 to 3 fibers")
        if abs(self.weights.sum() - 1) > 1e-9 or np.any(self.weights < 0):
            raise InvalidArgumentError("fiber fractions must be >= 0 and sum to 1")
        total = self.f_wm + self.f_gm + self.f_csf
        if abs(total - 1) > 1e-9 or min(self.f_wm, self.f_gm, self.f_csf) < 0:
            raise InvalidArgumentError("tissue fractions must be >= 0 and sum to 1")
        self.axes = self.axes / np.linalg.norm(self.axes, axis=1, keepdims=True)

    @property
    def n_fibers(self):
        return len(self.axes)


def _simulate(axes, weights, fractions, table, params):
    """Vectorized noiseless signals.

    axes (V, 3, 3), weights (V, 3) with zero for absent fibers,
    fractions (V, 3) as (wm, gm, csf). Returns (V, N).
    """
    b = np.where(table.b0_mask, 0.0, table.bvals)
    proj = np.einsum("vkj,nj->vkn", axes, table.bvecs)
    adc = params.wm_l_perp + (params.wm_l_par - params.wm_l_perp) * proj ** 2
    wm = np.einsum("vk,vkn->vn", weights, np.exp(-b * adc))
    return (fractions[:, 0:1] * wm
            + fractions[:, 1:2] * np.exp(-b * params.d_gm)
            + fractions[:, 2:3] * np.exp(-b * params.d_csf))


def kernel_fod(axes, weights, order=8, power=8):
    """SH coefficients of ``sum_k w_k c (u . a_k)^power`` with unit sphere integral per lobe.

    The lobe is a polynomial of degree ``power``, so it is exact for
    ``order >= power`` and non-negative everywhere (``power`` even).
    """
    if power % 2 or power > order:
        raise InvalidArgumentError("power must be even and <= order")
    axes = np.asarray(axes, float).reshape(-1, 3)
    weights = np.asarray(weights, float).reshape(-1)
    keep = weights != 0
    axes, weights = axes[keep], weights[keep]
    t = _GL_NODES
    f = (power + 1) / (4 * pi) * t ** power
    P = shm._legendre_table(order, t)
    l, _ = shm.lm_indices(order)
    zonal = np.array([2 * pi * np.sum(_GL_WEIGHTS * f * sqrt((2 * k + 1) / (4 * pi)) * P[k, 0])
                      for k in range(0, order + 1, 2)])
    scale = zonal[l // 2] * np.sqrt(4 * pi / (2 * l + 1))
    return (weights @ shm.sh_basis_matrix(axes, order)) * scale


def _simulate_kernel(axes, weights, fractions, table, params, order=8):
    """Like ``_simulate`` but WM is a band-limited kernel FOD convolved with the response."""
    V = axes.shape[0]
    fods = np.stack([kernel_fod(axes[v], weights[v], order) for v in range(V)])
    out = np.empty((V, len(table)))
    b = np.where(table.b0_mask, 0.0, table.bvals)
    for bv in np.unique(b):
        rows = b == bv
        resp = response_from_model(params.wm_l_par, params.wm_l_perp, bv, order)
        B = shm.sh_basis_matrix(np.where(table.b0_mask[rows, None], [[0.0, 0.0, 1.0]],
                                         table.bvecs[rows]), order)
        out[:, rows] = (fods * conv_diag(resp, order)) @ B.T
    return (fractions[:, 0:1] * out
            + fractions[:, 1:2] * np.exp(-b * params.d_gm)
            + fractions[:, 2:3] * np.exp(-b * params.d_csf))


def _pack(config):
    axes = np.zeros((1, 3, 3))
    weights = np.zeros((1, 3))
    axes[0, : config.n_fibers] = config.axes
    weights[0, : config.n_fibers] = config.weights
    return axes, weights, np.array([[config.f_wm, config.f_gm, config.f_csf]])


def simulate_voxel(config, table, params=None, wm_model="tensor"):
    """Noiseless measurement vector of one voxel.

    ``wm_model`` is "tensor" (one axial tensor per fiber) or "kernel"
    (band-limited lobes, see ``kernel_fod``).
    """
    params = params or tissue_params()
    axes, weights, fr = _pack(config)
    return _WM_MODELS[_check_wm_model(wm_model)](axes, weights, fr, table, params)[0]


_WM_MODELS = {"tensor": _simulate, "kernel": _simulate_kernel}


def _check_wm_model(name):
    if name not in _WM_MODELS:
        raise InvalidArgumentError(f"wm_model must be one of {sorted(_WM_MODELS)}")
    return name


def add_rician_noise(signal, snr, seed=0, s0=1.0):
    """Magnitude of the signal plus complex Gaussian noise, sigma = s0 / snr."""
    s = np.asarray(signal, float)
    if not snr > 0:
        raise InvalidArgumentError("snr must be > 0")
    if np.isinf(snr):
        return s.copy()
    sigma = s0 / snr
    rng = np.random.default_rng(seed)
    n = rng.normal(0.0, sigma, size=(2,) + s.shape)
    return np.sqrt((s + n[0]) ** 2 + n[1] ** 2)


# --------------------------------------------------------------------------
# responses and spherical convolution


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(128)


def response_from_model(l_par, l_perp, bvalue, order):
    """Zonal SH coefficients ``r_l`` (even l, index ``l // 2``) of a tensor along +z.

    Computed by Gauss-Legendre quadrature in cos(theta).
    """
    t = _GL_NODES
    S = np.exp(-bvalue * (l_perp + (l_par - l_perp) * t * t))
    P = shm._legendre_table(order, t)
    r = np.empty(order // 2 + 1)
    for l in range(0, order + 1, 2):
        y = sqrt((2 * l + 1) / (4 * pi)) * P[l, 0]
        r[l // 2] = 2 * pi * np.sum(_GL_WEIGHTS * S * y)
    return r


def isotropic_response(d, bvalue):
    return np.array([2 * sqrt(pi) * np.exp(-bvalue * d)])


def conv_diag(response, order):
    """Per-coefficient multipliers ``r_l sqrt(4 pi / (2l + 1))``."""
    r = np.asarray(response, float)
    if len(r) < order // 2 + 1:
        if np.any(r[1:]) or len(r) != 1:
            raise InvalidArgumentError("response does not reach the FOD order")
    l, _ = shm.lm_indices(order)
    rl = np.zeros(len(l))
    have = l // 2 < len(r)
    rl[have] = r[l[have] // 2]
    return rl * np.sqrt(4 * pi / (2 * l + 1))


def fod_to_signal(fod, response, dirs):
    """Spherical convolution of an FOD with a zonal response, evaluated at ``dirs``."""
    c = np.asarray(fod, float)
    order = shm.order_from_ncoeffs(c.shape[-1])
    return shm.sh_eval(c * conv_diag(response, order), dirs)


@dataclass
class ResponseSet:
    """Zonal responses per tissue and shell, keyed by nominal b-value."""

    wm: dict
    gm: dict
    csf: dict
    order: int

    @property
    def bvalues(self):
        return sorted(self.wm)

    def restrict(self, bvalues):
        keep = [float(b) for b in bvalues]
        return ResponseSet({b: self.wm[b] for b in keep}, {b: self.gm[b] for b in keep},
                           {b: self.csf[b] for b in keep}, self.order)

    def to_dict(self):
        return {"order": self.order,
                "wm": {str(b): np.asarray(v).tolist() for b, v in self.wm.items()},
                "gm": {str(b): float(np.asarray(v).reshape(-1)[0]) for b, v in self.gm.items()},
                "csf": {str(b): float(np.asarray(v).reshape(-1)[0]) for b, v in self.csf.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls({float(b): np.asarray(v, float) for b, v in d["wm"].items()},
                   {float(b): np.array([v]) for b, v in d["gm"].items()},
                   {float(b): np.array([v]) for b, v in d["csf"].items()},
                   int(d["order"]))


def model_responses(bvalues, order=8, params=None):
    """Responses matched to the generative tissue model."""
    params = params or tissue_params()
    wm, gm, csf = {}, {}, {}
    for b in bvalues:
        b = float(b)
        wm[b] = response_from_model(params.wm_l_par, params.wm_l_perp, b, order)
        gm[b] = isotropic_response(params.d_gm, b)
        csf[b] = isotropic_response(params.d_csf, b)
    return ResponseSet(wm, gm, csf, order)


# --------------------------------------------------------------------------
# phantoms


@dataclass
class PhantomSpec:
    dims: tuple = (20, 20, 10)
    voxel_size: float = 1.5
    fiber_count_probs: tuple = (0.40, 0.45, 0.15)
    wm_fraction_range: tuple = (0.55, 0.95)
    min_separation_deg: float = 30.0
    snr: float = float("inf")
    age: float = 40.0
    seed: int = 0
    wm_model: str = "tensor"

    def __post_init__(self):
        _check_wm_model(self.wm_model)
        self.dims = tuple(int(d) for d in self.dims)
        self.fiber_count_probs = tuple(float(p) for p in self.fiber_count_probs)
        self.wm_fraction_range = tuple(float(p) for p in self.wm_fraction_range)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidArgumentError("phantom dims must be three positive integers")
        if not self.snr > 0:
            raise InvalidArgumentError("snr must be > 0 (inf for noiseless)")
        if not AGE_RANGE[0] <= self.age <= AGE_RANGE[1]:
            raise InvalidArgumentError(f"age must lie in {AGE_RANGE}")
        p = np.asarray(self.fiber_count_probs)
        if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise InvalidArgumentError("fiber_count_probs must be 3 probabilities")

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["snr"] = None if np.isinf(self.snr) else self.snr
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("snr", 0) is None:
            d["snr"] = float("inf")
        return cls(**d)


@dataclass
class SignalVolume:
    data: np.ndarray                   # (X, Y, Z, N)
    table: shm.GradientTable
    voxel_size: float = 1.5
    truth: dict = field(default=None, repr=False)
    flagged: np.ndarray = field(default=None, repr=False)

    @property
    def dims(self):
        return self.data.shape[:3]

    def fiber_config(self, index):
        t = self.truth
        k = int(t["n_fibers"][index])
        fr = t["fractions"][index]
        return FiberConfig(t["axes"][index][:k], t["weights"][index][:k], *fr)


def _exact_counts(probs, n):
    raw = np.asarray(probs) * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def _random_axes(rng, k, min_sep):
    axes = []
    while len(axes) < k:
        v = rng.standard_normal(3)
        v /= np.linalg.norm(v)
        if all(shm.axis_angle_deg(v, a) >= min_sep for a in axes):
            axes.append(v)
    return np.array(axes)


def phantom_truth(spec):
    """Per-voxel ground-truth configuration drawn from ``spec`` (deterministic)."""
    n = int(np.prod(spec.dims))
    rng = np.random.default_rng([spec.seed, 7])
    counts = _exact_counts(spec.fiber_count_probs, n)
    labels = rng.permutation(np.repeat([1, 2, 3], counts))
    axes = np.zeros((n, 3, 3))
    weights = np.zeros((n, 3))
    fractions = np.zeros((n, 3))
    lo, hi = spec.wm_fraction_range
    for v in range(n):
        k = int(labels[v])
        axes[v, :k] = _random_axes(rng, k, spec.min_separation_deg)
        weights[v, :k] = rng.dirichlet(np.full(k, 4.0)) if k > 1 else 1.0
        f_wm = rng.uniform(lo, hi)
        share = rng.uniform()
        fractions[v] = (f_wm, (1 - f_wm) * share, (1 - f_wm) * (1 - share))
    shape = tuple(spec.dims)
    return {
        "n_fibers": labels.reshape(shape),
        "axes": axes.reshape(shape + (3, 3)),
        "weights": weights.reshape(shape + (3,)),
        "fractions": fractions.reshape(shape + (3,)),
        "age": spec.age,
    }


def generate_phantom(spec, table):
    """Simulate a phantom volume; noise streams are keyed per voxel index."""
    truth = phantom_truth(spec)
    params = tissue_params(spec.age)
    n = int(np.prod(spec.dims))
    clean = _WM_MODELS[spec.wm_model](truth["axes"].reshape(n, 3, 3), truth["weights"].reshape(n, 3),
                      truth["fractions"].reshape(n, 3), table, params)
    if np.isinf(spec.snr):
        data = clean
    else:
        b0 = table.b0_mask
        data = np.empty_like(clean)
        for v in range(n):
            s0 = clean[v, b0].mean() if b0.any() else 1.0
            data[v] = add_rician_noise(clean[v], spec.snr, seed=[spec.seed, 1, v], s0=s0)
    return SignalVolume(data.reshape(tuple(spec.dims) + (len(table),)), table,
                        spec.voxel_size, truth)


def b0_normalize(volume, b0_index=None):
    """Divide by a single b0 measurement (the first one by default) and drop b0 rows.

    Voxels whose b0 is not positive are zeroed and marked in ``flagged``.
    """
    table = volume.table
    b0_rows = np.flatnonzero(table.b0_mask)
    if b0_rows.size == 0:
        raise InvalidArgumentError("no b0 measurement to normalize by")
    ref = b0_rows[0] if b0_index is None else int(b0_index)
    s0 = volume.data[..., ref]
    flagged = ~(s0 > 0)
    keep = ~table.b0_mask
    with np.errstate(divide="ignore", invalid="ignore"):
        out = volume.data[..., keep] / s0[..., None]
    out[flagged] = 0.0
    return SignalVolume(out, table.select(np.flatnonzero(keep)), volume.voxel_size,
                        volume.truth, flagged)


def acquisition_table(shells=((0, 20), (400, 64), (1000, 88), (2600, 128)), seed=0):
    """Multi-shell table; each shell uses a differently rotated spiral set."""
    bvals, bvecs = [], []
    for k, (b, n) in enumerate(shells):
        if b < shm.B0_THRESHOLD:
            bvals += [0.0] * n
            bvecs.append(np.zeros((n, 3)))
        else:
            bvals += [float(b)] * n
            bvecs.append(shm.fibonacci_hemisphere(n, rotation_seed=[seed, k]))
    return shm.GradientTable(np.array(bvals), np.vstack(bvecs))
