"""Command-line interface.

Every subcommand reads an optional JSON config (``--config``) and applies
flag overrides on top; unknown config keys are rejected. Failures print a
JSON object ``{"error": code, "message": ...}`` on stderr and exit 1; usage
errors exit 2.
"""
import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import csd, experiments as ex, fod_analysis as fa, forward_model as fm
from . import io, metrics, regressor as rg
from . import sphere_sh as shm
from .errors import ConfigError, FodkitError, InvalidArgumentError

SEED_ENV = "FODKIT_SEED"


# --------------------------------------------------------------------------
# run configs


@dataclass
class PhantomRun:
    out: str = "phantom.fvol"
    bvals: Optional[str] = None
    bvecs: Optional[str] = None
    truth: Optional[str] = None
    dims: tuple = (8, 8, 4)
    voxel_size: float = 1.5
    fiber_count_probs: tuple = (0.40, 0.45, 0.15)
    wm_fraction_range: tuple = (0.55, 0.95)
    min_separation_deg: float = 30.0
    snr: Optional[float] = None
    age: float = 40.0
    seed: int = 0
    wm_model: str = "tensor"
    shells: tuple = ex.FULL_SHELLS
    table_seed: int = 0


@dataclass
class FitRun:
    signal: str = ""
    bvals: str = ""
    bvecs: str = ""
    method: str = "msmt"
    out: str = "fod.fvol"
    tissue_out: Optional[str] = None
    report: Optional[str] = None
    mask: Optional[str] = None
    order: int = 8
    age: float = 40.0
    responses: Optional[str] = None
    threads: Optional[int] = None
    solver: csd.SolverConfig = field(default_factory=csd.SolverConfig)


@dataclass
class PeaksRun:
    fod: str = ""
    out: str = "peaks.fvol"
    mask: Optional[str] = None
    max_peaks: int = 3
    min_sep_deg: float = 45.0
    rel_thresh: float = 0.5
    mesh_subdivisions: int = 3


@dataclass
class MetricsRun:
    peaks_a: str = ""
    peaks_b: str = ""
    fod_a: str = ""
    fod_b: str = ""
    mask: Optional[str] = None
    out: Optional[str] = None
    csv: Optional[str] = None
    label: str = "metrics"


@dataclass
class DataPaths:
    """One subject: an input SH volume, or a signal volume with its gradients."""
    targets: str = ""
    inputs: Optional[str] = None
    signal: Optional[str] = None
    bvals: Optional[str] = None
    bvecs: Optional[str] = None
    mask: Optional[str] = None


@dataclass
class TrainRun:
    train_data: list[DataPaths] = field(default_factory=list)
    val_data: list[DataPaths] = field(default_factory=list)
    input_order: Optional[int] = None
    model: rg.ModelSpec = field(default_factory=rg.ModelSpec)
    train: rg.TrainConfig = field(default_factory=rg.TrainConfig)
    out: str = "model.bin"
    history: Optional[str] = None


@dataclass
class PredictRun:
    model: str = ""
    inputs: Optional[str] = None
    signal: Optional[str] = None
    bvals: Optional[str] = None
    bvecs: Optional[str] = None
    mask: Optional[str] = None
    out: str = "pred.fvol"
    window: int = 16


@dataclass
class SubsampleRun:
    bvals: str = ""
    bvecs: str = ""
    shell: float = 1000.0
    n: int = 15
    order: Optional[int] = None
    seed: int = 0
    restarts: int = 10
    out: Optional[str] = None


# --------------------------------------------------------------------------
# helpers


def _nest(flat):
    out = {}
    for key, value in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _load_config(path):
    """JSON config from ``path``, or a bundled config by name (``demo_consistency``)."""
    if path is None:
        return {}
    if not Path(path).exists():
        bundled = resources.files("fodkit") / "data" / f"{path}.json"
        if bundled.is_file():
            return json.loads(bundled.read_text())
    obj = io.load_json(path)
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return obj


def _settings(args, cls):
    base = _load_config(args.config)
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "command", "handler")}
    return io.from_config(cls, _merge(base, _nest(flags)))


def _env_seed():
    v = os.environ.get(SEED_ENV, "")
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {v!r}") from None


def _default_side(path, suffix):
    p = Path(path)
    stem = p.name[:-len(".nii.gz")] if p.name.endswith(".nii.gz") else p.stem
    return str(p.with_name(stem + suffix))


def _read_mask(path, dims):
    if path is None:
        return None
    m = io.read_volume(path).data
    m = m.reshape(m.shape[:3]) if m.ndim == 4 and m.shape[3] == 1 else m
    if m.shape != tuple(dims):
        raise InvalidArgumentError(f"mask dims {m.shape} != volume dims {tuple(dims)}")
    return m != 0


def _read_signal(signal, bvals, bvecs):
    if not (bvals and bvecs):
        raise ConfigError("a signal volume needs bvals and bvecs")
    vol = io.read_volume(signal)
    table = io.read_gradients(bvals, bvecs)
    data = vol.data.astype(float)
    if data.ndim != 4 or data.shape[3] != len(table):
        raise InvalidArgumentError(
            f"signal has {data.shape[3] if data.ndim == 4 else 1} volumes, table has {len(table)}")
    return fm.SignalVolume(data, table, vol.voxel_size[0]), vol


def _signal_sh(path, bvals, bvecs, order=None):
    sig, _ = _read_signal(path, bvals, bvecs)
    norm = fm.b0_normalize(sig)
    order = shm.max_order_for(len(norm.table)) if order is None else order
    return shm.sh_fit(norm.data, norm.table.bvecs, min(order, 8))


def _input_volume(paths, order=None):
    if paths.inputs:
        return io.read_volume(paths.inputs).data.astype(float)
    if paths.signal:
        return _signal_sh(paths.signal, paths.bvals, paths.bvecs, order)
    raise ConfigError("each dataset needs 'inputs' or 'signal'")


def _write(path, data, like=None):
    vs = like.voxel_size if like is not None else (1.0, 1.0, 1.0)
    aff = like.affine if like is not None else None
    io.write_volume(path, io.VolumeFile(np.asarray(data, np.float64), vs, aff))


def _emit(obj):
    sys.stdout.write(io.dump_json(obj))


# --------------------------------------------------------------------------
# commands


def cmd_phantom(args):
    cfg = _settings(args, PhantomRun)
    seed = _env_seed()
    spec = fm.PhantomSpec(dims=cfg.dims, voxel_size=cfg.voxel_size,
                          fiber_count_probs=cfg.fiber_count_probs,
                          wm_fraction_range=cfg.wm_fraction_range,
                          min_separation_deg=cfg.min_separation_deg,
                          snr=float("inf") if cfg.snr is None else cfg.snr, age=cfg.age,
                          seed=cfg.seed if seed is None else seed, wm_model=cfg.wm_model)
    table = fm.acquisition_table(tuple(tuple(s) for s in cfg.shells), seed=cfg.table_seed)
    vol = fm.generate_phantom(spec, table)
    bvals = cfg.bvals or _default_side(cfg.out, ".bval")
    bvecs = cfg.bvecs or _default_side(cfg.out, ".bvec")
    truth = cfg.truth or _default_side(cfg.out, "_truth.json")
    io.write_volume(cfg.out, io.VolumeFile(vol.data, (spec.voxel_size,) * 3))
    io.write_gradients(bvals, bvecs, table)
    io.dump_json({"spec": spec.to_dict(), **vol.truth}, truth)
    _emit({"signal": cfg.out, "bvals": bvals, "bvecs": bvecs, "truth": truth,
           "dims": list(vol.dims), "n_measurements": len(table)})


def cmd_fit(args):
    cfg = _settings(args, FitRun)
    if cfg.method not in ("csd", "msmt", "ss3t"):
        raise ConfigError(f"method must be csd, msmt or ss3t, got {cfg.method!r}")
    sig, raw = _read_signal(cfg.signal, cfg.bvals, cfg.bvecs)
    if cfg.responses:
        responses = fm.ResponseSet.from_dict(io.load_json(cfg.responses))
    else:
        responses = fm.model_responses(sig.table.shell_values(), cfg.order,
                                       fm.tissue_params(cfg.age))
    mask = _read_mask(cfg.mask, sig.dims)
    res = csd.fit_volume(sig, cfg.method, responses, cfg.order, cfg.solver, mask,
                         n_jobs=cfg.threads)
    _write(cfg.out, res.fod, raw)
    tissue = cfg.tissue_out or _default_side(cfg.out, "_tissue.fvol")
    _write(tissue, np.stack([fa.afd_total(res.fod), res.gm, res.csf], axis=-1), raw)
    summary = {"fod": cfg.out, "tissue": tissue, "method": cfg.method,
               "mean_residual": float(res.residual.mean()), **res.report()}
    if cfg.report:
        io.dump_json(summary, cfg.report)
    _emit(summary)


def cmd_peaks(args):
    cfg = _settings(args, PeaksRun)
    vol = io.read_volume(cfg.fod)
    fod = vol.data.astype(float)
    mask = _read_mask(cfg.mask, fod.shape[:3])
    peaks = fa.extract_peaks_volume(fod, mask, cfg.max_peaks, cfg.mesh_subdivisions,
                                    cfg.min_sep_deg, cfg.rel_thresh)
    _write(cfg.out, peaks, vol)
    counts = fa.peak_counts(peaks)
    _emit({"peaks": cfg.out, "count_histogram": [int((counts == k).sum()) for k in range(4)]})


def cmd_metrics(args):
    cfg = _settings(args, MetricsRun)
    pa = io.read_volume(cfg.peaks_a).data.astype(float)
    pb = io.read_volume(cfg.peaks_b).data.astype(float)
    fa_vol = io.read_volume(cfg.fod_a).data.astype(float)
    fb_vol = io.read_volume(cfg.fod_b).data.astype(float)
    mask = _read_mask(cfg.mask, pa.shape[:3])
    rep = metrics.compare(pa, pb, fa.afd_total(fa_vol), fa.afd_total(fb_vol), mask)
    if cfg.out:
        io.dump_json(rep, cfg.out)
    if cfg.csv:
        Path(cfg.csv).write_text(metrics.rows_to_csv(metrics.report_rows(cfg.label, "", rep)))
    _emit(rep)


def _datasets(items, order, patch_size):
    out = []
    for i, p in enumerate(items):
        x = _input_volume(p, order)
        y = io.read_volume(p.targets).data.astype(float)
        mask = _read_mask(p.mask, y.shape[:3])
        out.append(rg.RegressionDataset(x, y, np.ones(y.shape[:3], bool) if mask is None else mask,
                                        patch_size))
    return out


def cmd_train(args):
    cfg = _settings(args, TrainRun)
    seed = _env_seed()
    train_cfg, spec = cfg.train, cfg.model
    if seed is not None:
        train_cfg = rg.TrainConfig(**{**train_cfg.to_dict(), "seed": seed})
        spec = rg.ModelSpec(**{**spec.to_dict(), "seed": seed})
    tr = _datasets(cfg.train_data, cfg.input_order, train_cfg.patch_size)
    va = _datasets(cfg.val_data, cfg.input_order, train_cfg.patch_size)
    model, hist = rg.train(tr, va, spec, train_cfg)
    rg.save_model(cfg.out, model)
    if cfg.history:
        io.dump_json(hist, cfg.history)
    _emit({"model": cfg.out, "best_epoch": hist.best_epoch, "epochs": len(hist.val_loss),
           "best_val_loss": min(hist.val_loss)})


def cmd_predict(args):
    cfg = _settings(args, PredictRun)
    model = rg.load_model(cfg.model)
    x = _input_volume(DataPaths("", cfg.inputs, cfg.signal, cfg.bvals, cfg.bvecs), model.in_order)
    mask = _read_mask(cfg.mask, x.shape[:3])
    pred = rg.predict_volume(model, x, mask, cfg.window)
    _write(cfg.out, pred)
    _emit({"prediction": cfg.out, "dims": list(pred.shape[:3])})


def cmd_exp(args):
    base = _load_config(args.config)
    flags = {k: v for k, v in vars(args).items()
             if k not in ("config", "command", "handler", "experiment")}
    merged = _merge(base, _nest(flags))
    out_dir = Path(merged.pop("out_dir", "."))
    merged["experiment"] = args.experiment
    seed = _env_seed()
    if seed is not None:
        merged["seeds"] = [seed]
    cfg = io.from_config(ex.ExperimentConfig, merged)
    report = ex.run_experiment(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    io.dump_json(report, out_dir / "report.json")
    (out_dir / "metrics.csv").write_text(report.metrics_csv())
    (out_dir / "plot.csv").write_text(report.plot_csv())
    _emit({"report": str(out_dir / "report.json"), "conditions": list(report.conditions)})


def cmd_subsample(args):
    cfg = _settings(args, SubsampleRun)
    seed = _env_seed()
    table = io.read_gradients(cfg.bvals, cfg.bvecs)
    order = shm.max_order_for(cfg.n) if cfg.order is None else cfg.order
    idx = shm.subsample_directions(table, cfg.shell, cfg.n, order,
                                   seed=cfg.seed if seed is None else seed,
                                   n_restarts=cfg.restarts)
    cond = shm.condition_number(shm.sh_basis_matrix(table.bvecs[idx], order))
    out = {"indices": [int(i) for i in idx], "order": order, "condition_number": float(cond)}
    if cfg.out:
        io.dump_json(out, cfg.out)
    _emit(out)


# --------------------------------------------------------------------------
# parser


def _add(p, flag, dest, **kw):
    p.add_argument(flag, dest=dest, default=argparse.SUPPRESS, **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="fodkit", description="Fiber orientation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name, handler, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file or bundled config name; flags "
                                        "override its keys")
        p.set_defaults(handler=handler)
        return p

    p = command("phantom", cmd_phantom, "simulate a multi-tissue phantom")
    _add(p, "--out", "out")
    _add(p, "--dims", "dims", type=int, nargs=3)
    _add(p, "--snr", "snr", type=float)
    _add(p, "--age", "age", type=float)
    _add(p, "--seed", "seed", type=int)
    _add(p, "--wm-model", "wm_model", choices=["tensor", "kernel"])

    p = command("fit", cmd_fit, "fit FODs with csd, msmt or ss3t")
    _add(p, "--signal", "signal")
    _add(p, "--bvals", "bvals")
    _add(p, "--bvecs", "bvecs")
    _add(p, "--method", "method", choices=["csd", "msmt", "ss3t"])
    _add(p, "--out", "out")
    _add(p, "--mask", "mask")
    _add(p, "--age", "age", type=float)
    _add(p, "--responses", "responses")
    _add(p, "--threads", "threads", type=int)

    p = command("peaks", cmd_peaks, "extract FOD peaks")
    _add(p, "--fod", "fod")
    _add(p, "--out", "out")
    _add(p, "--mask", "mask")
    _add(p, "--max-peaks", "max_peaks", type=int)
    _add(p, "--min-sep", "min_sep_deg", type=float)
    _add(p, "--rel-thresh", "rel_thresh", type=float)

    p = command("metrics", cmd_metrics, "compare two FOD/peak fields")
    _add(p, "--peaks-a", "peaks_a")
    _add(p, "--peaks-b", "peaks_b")
    _add(p, "--fod-a", "fod_a")
    _add(p, "--fod-b", "fod_b")
    _add(p, "--mask", "mask")
    _add(p, "--out", "out")
    _add(p, "--csv", "csv")

    p = command("train", cmd_train, "train a voxel-wise SH regressor")
    _add(p, "--out", "out")
    _add(p, "--lr", "train.lr", type=float)
    _add(p, "--max-epochs", "train.max_epochs", type=int)
    _add(p, "--patches", "train.patches_per_subject", type=int)
    _add(p, "--seed", "train.seed", type=int)
    _add(p, "--kind", "model.kind", choices=["linear", "mlp"])
    _add(p, "--hidden", "model.hidden", type=int, nargs="+")

    p = command("predict", cmd_predict, "apply a trained regressor")
    _add(p, "--model", "model")
    _add(p, "--inputs", "inputs")
    _add(p, "--signal", "signal")
    _add(p, "--bvals", "bvals")
    _add(p, "--bvecs", "bvecs")
    _add(p, "--mask", "mask")
    _add(p, "--out", "out")

    p = command("exp", cmd_exp, "run an experiment over synthetic cohorts")
    p.add_argument("experiment", choices=["consistency", "ablation", "ageshift"])
    _add(p, "--out-dir", "out_dir")
    _add(p, "--seeds", "seeds", type=int, nargs="+")
    _add(p, "--methods", "methods", nargs="+", choices=["msmt", "ss3t"])
    _add(p, "--n-sig", "n_sig", type=int)
    _add(p, "--n-sig-list", "n_sig_list", type=int, nargs="+")

    p = command("subsample", cmd_subsample, "pick well-conditioned directions of a shell")
    _add(p, "--bvals", "bvals")
    _add(p, "--bvecs", "bvecs")
    _add(p, "--shell", "shell", type=float)
    _add(p, "--n", "n", type=int)
    _add(p, "--order", "order", type=int)
    _add(p, "--seed", "seed", type=int)
    _add(p, "--out", "out")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.handler(args)
    except FodkitError as err:
        sys.stderr.write(json.dumps(err.to_dict()) + "\n")
        return 1
    except OSError as err:
        sys.stderr.write(json.dumps({"error": "io-error", "message": str(err)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
