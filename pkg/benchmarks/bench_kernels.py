"""Compare the compiled and pure-Python kernels on realistic problem sizes.

Usage::

    python benchmarks/bench_kernels.py [--repeat N]

The NNLS problems are the duals of L=8 single-shell deconvolutions of noisy
crossing-fiber signals with non-negativity on the s=3 mesh; the
local-maxima input is a random FOD sampled on the same mesh.
"""
import argparse
import timeit

import numpy as np
from scipy.linalg import solve_triangular

from fodkit import _kernels
from fodkit import csd, forward_model as fm, sphere_sh as shm
from fodkit._kernels import _pykernels


def nnls_problems(n, seed=0):
    rng = np.random.default_rng(seed)
    table = fm.acquisition_table(((0, 6), (1000, 60)))
    dw = ~table.b0_mask
    solver = csd.SingleTissueCSD(table.bvecs[dw], fm.model_responses([0, 1000]).wm[1000.0])
    qp = solver.qp
    out = []
    for i in range(n):
        k = int(rng.integers(1, 4))
        axes = rng.normal(size=(k, 3))
        cfg = fm.FiberConfig(axes / np.linalg.norm(axes, axis=1, keepdims=True),
                             rng.dirichlet(np.ones(k)))
        s = fm.add_rician_noise(fm.simulate_voxel(cfg, table), 20, seed=i)[dw]
        d = solve_triangular(qp.R, qp.B.T @ s, trans="T", lower=False)
        out.append((qp.E, -d))
    return out


def peak_input(seed=0):
    rng = np.random.default_rng(seed)
    mesh = shm.tessellate_sphere(3)
    vals = shm.sh_eval(rng.normal(size=45), mesh.vertices)
    return vals, mesh.neighbor_table


def run(backend, problems, values, table, repeat):
    t_nnls = min(timeit.repeat(lambda: [backend.nnls(E, f) for E, f in problems],
                               number=1, repeat=repeat)) / len(problems)
    t_max = min(timeit.repeat(lambda: backend.local_maxima(values, table),
                              number=50, repeat=repeat)) / 50
    return t_nnls, t_max


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--problems", type=int, default=20)
    args = ap.parse_args()

    problems = nnls_problems(args.problems)
    values, table = peak_input()
    backends = {"python": _pykernels}
    if _kernels.BACKEND == "cython":
        from fodkit._kernels import _ckernels
        backends["cython"] = _ckernels
    else:
        print("compiled kernels not built; only the Python fallback is timed")

    # both backends must agree before timing means anything
    if "cython" in backends:
        for E, f in problems[:5]:
            # multipliers need not be unique; their image E mu is
            xp = E @ _pykernels.nnls(E, f)[0]
            xc = E @ backends["cython"].nnls(E, f)[0]
            assert np.allclose(xp, xc, atol=1e-8), "backends disagree on nnls"
        assert np.array_equal(_pykernels.local_maxima(values, table),
                              backends["cython"].local_maxima(values, table))

    results = {name: run(mod, problems, values, table, args.repeat)
               for name, mod in backends.items()}
    print(f"{'kernel':<14}{'backend':<9}{'time per call':>16}{'speedup':>10}")
    for i, kernel in enumerate(("nnls", "local_maxima")):
        base = results["python"][i]
        for name, times in results.items():
            print(f"{kernel:<14}{name:<9}{times[i] * 1e3:>13.3f} ms{base / times[i]:>9.1f}x")


if __name__ == "__main__":
    main()
