"""Experiment drivers on synthetic cohorts.

Three experiments are provided:

* ``consistency``: fit FODs on two disjoint halves of each subject's
  measurements and compare the halves.
* ``ablation``: train regressors from a reduced number of b=1000 samples
  (6, 15, 28, 45) to ground-truth FODs and evaluate on held-out subjects.
* ``ageshift``: train on an early and a late age cohort, test each model on
  both cohorts.

Everything is seeded; serial runs are bit-for-bit reproducible.
"""
import csv
import functools
import io as _io
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import csd, fod_analysis as fa, forward_model as fm, metrics, regressor as rg
from . import sphere_sh as shm
from .errors import InvalidArgumentError, InvalidCohortError

FULL_SHELLS = ((0, 20), (400, 64), (1000, 88), (2600, 128))
# measurements per half for the split-half experiment, by method and shell
HALF_COUNTS = {
    "msmt": {0: 10, 400: 32, 1000: 44, 2600: 64},
    "ss3t": {0: 10, 1000: 44},
}
EARLY_AGES = (33.29, 37.86)
LATE_AGES = (41.0, 45.14)
INPUT_SHELL = 1000.0


@dataclass(frozen=True)
class CohortSpec:
    """Synthetic subjects sharing one acquisition.

    Subject ``i`` gets phantom seed ``seed * 100003 + i`` and an age drawn
    uniformly from ``age_range``.
    """
    n_train: int = 20
    n_val: int = 5
    n_test: int = 5
    n_subjects: Optional[int] = None
    dims: tuple = (8, 8, 4)
    snr: Optional[float] = 20.0
    age_range: tuple = (33.29, 45.14)
    fiber_count_probs: tuple = (0.40, 0.45, 0.15)
    wm_fraction_range: tuple = (0.55, 0.95)
    min_separation_deg: float = 30.0
    wm_model: str = "tensor"
    shells: tuple = FULL_SHELLS
    table_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        conv = object.__setattr__
        conv(self, "dims", tuple(int(d) for d in self.dims))
        conv(self, "age_range", tuple(float(a) for a in self.age_range))
        conv(self, "fiber_count_probs", tuple(float(p) for p in self.fiber_count_probs))
        conv(self, "wm_fraction_range", tuple(float(p) for p in self.wm_fraction_range))
        conv(self, "shells", tuple((float(b), int(n)) for b, n in self.shells))
        if self.snr is None:
            conv(self, "snr", float("inf"))
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise InvalidCohortError("split sizes must be >= 0")
        total = self.n_train + self.n_val + self.n_test
        if self.n_subjects is None:
            conv(self, "n_subjects", total)
        if total > self.n_subjects or self.n_subjects < 1:
            raise InvalidCohortError("splits exceed the number of subjects")
        lo, hi = self.age_range
        if not fm.AGE_RANGE[0] <= lo <= hi <= fm.AGE_RANGE[1]:
            raise InvalidCohortError(f"age_range must lie within {fm.AGE_RANGE}")

    @property
    def train_ids(self):
        return list(range(self.n_train))

    @property
    def val_ids(self):
        return list(range(self.n_train, self.n_train + self.n_val))

    @property
    def test_ids(self):
        a = self.n_train + self.n_val
        return list(range(a, a + self.n_test))

    def with_seed(self, seed):
        return CohortSpec(**{**self.to_dict(), "seed": int(seed)})

    def table(self):
        return fm.acquisition_table(self.shells, seed=self.table_seed)

    def subject_age(self, i):
        lo, hi = self.age_range
        return float(np.random.default_rng([self.seed, i, 5]).uniform(lo, hi))

    def subject_spec(self, i):
        if not 0 <= i < self.n_subjects:
            raise InvalidArgumentError(f"subject {i} outside the cohort")
        return fm.PhantomSpec(
            dims=self.dims, fiber_count_probs=self.fiber_count_probs,
            wm_fraction_range=self.wm_fraction_range,
            min_separation_deg=self.min_separation_deg, snr=self.snr,
            age=self.subject_age(i), seed=self.seed * 100003 + i, wm_model=self.wm_model)

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["age_range"] = list(self.age_range)
        d["fiber_count_probs"] = list(self.fiber_count_probs)
        d["wm_fraction_range"] = list(self.wm_fraction_range)
        d["shells"] = [list(s) for s in self.shells]
        d["snr"] = None if np.isinf(self.snr) else self.snr
        return d


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    conditions: dict                      # name -> MetricsReport dict
    diagnostics: dict = field(default_factory=dict)
    per_seed: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def rows(self):
        out = []
        for name in self.conditions:
            method, _, cond = name.partition("/")
            rep = self.conditions[name]
            for k in ("1", "2", "3"):
                out.append((self.experiment, method, cond, k, "AR", rep["ar"][k]))
                out.append((self.experiment, method, cond, k, "AE", rep["ae"][k]))
            out.append((self.experiment, method, cond, "", "dAFD", rep["afd_mape"]))
            out.append((self.experiment, method, cond, "", "multi_fiber_a", rep["multi_fiber_a"]))
            out.append((self.experiment, method, cond, "", "multi_fiber_b", rep["multi_fiber_b"]))
        return out

    def metrics_csv(self):
        return metrics.rows_to_csv(self.rows())

    def plot_csv(self):
        """Long-format curves: one row per (method, x, metric)."""
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "condition", "x", "metric", "value"])
        for name, rep in self.conditions.items():
            method, _, cond = name.partition("/")
            x = cond.split("=", 1)[1] if "=" in cond else cond
            for k in ("1", "2", "3"):
                w.writerow([method, cond, x, f"AR{k}", _fmt(rep["ar"][k])])
                w.writerow([method, cond, x, f"AE{k}", _fmt(rep["ae"][k])])
            w.writerow([method, cond, x, "dAFD", _fmt(rep["afd_mape"])])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else repr(float(v))


# --------------------------------------------------------------------------
# subjects, ground truth and inputs


class SubjectCache:
    """Memoizes phantoms and FOD fits so experiments can share them."""

    def __init__(self):
        self._vols = {}
        self._fits = {}

    def volume(self, cohort, i):
        key = (cohort, i)
        if key not in self._vols:
            self._vols[key] = fm.generate_phantom(cohort.subject_spec(i), cohort.table())
        return self._vols[key]

    def fit(self, cohort, i, method, rows=None, solver_cfg=None):
        """FOD fit of subject ``i`` on table ``rows`` (default: all rows usable by ``method``)."""
        vol = self.volume(cohort, i)
        if rows is None:
            rows = method_rows(vol.table, method)
        rows = np.asarray(rows)
        key = (cohort, i, method, rows.tobytes(), solver_cfg)
        if key not in self._fits:
            sub = fm.SignalVolume(vol.data[..., rows], vol.table.select(rows), vol.voxel_size)
            params = fm.tissue_params(cohort.subject_age(i))
            responses = fm.model_responses(sub.table.shell_values(), 8, params)
            res = csd.fit_volume(sub, method, responses, 8, solver_cfg, n_jobs=1)
            peaks = fa.extract_peaks_volume(res.fod)
            self._fits[key] = (res, peaks)
        return self._fits[key]


DEFAULT_CACHE = SubjectCache()


def method_rows(table, method):
    if method == "msmt":
        return np.arange(len(table))
    if method == "ss3t":
        return np.flatnonzero(table.b0_mask | table.shell_mask(INPUT_SHELL))
    raise InvalidArgumentError(f"unknown ground-truth method {method!r}")


def _check_table(table, method):
    have = {b: int(table.shell_mask(b).sum()) for b in table.shell_values()}
    for b, n in HALF_COUNTS[method].items():
        if have.get(float(b), 0) < 2 * n:
            raise InvalidCohortError(
                f"{method} split needs {2 * n} measurements at b={b}, table has {have.get(float(b), 0)}")


@functools.lru_cache(maxsize=64)
def _subsample_cached(bvals, bvecs, shell, n, order, seed, restarts):
    table = shm.GradientTable(np.frombuffer(bvals), np.frombuffer(bvecs).reshape(-1, 3))
    out = shm.subsample_directions(table, shell, n, order, seed=seed, n_restarts=restarts)
    out.setflags(write=False)
    return out


def _subsample(table, shell, n, order, seed, restarts=10):
    return _subsample_cached(table.bvals.tobytes(), table.bvecs.tobytes(), float(shell),
                             int(n), int(order), int(seed), int(restarts))


def split_halves(table, method, seed=0, restarts=10):
    """Disjoint half tables: half A balances directions per shell, half B is the rest.

    b0 rows are split in table order.
    """
    if method not in HALF_COUNTS:
        raise InvalidArgumentError(f"unknown method {method!r}")
    _check_table(table, method)
    a, b = [], []
    for bval, n in HALF_COUNTS[method].items():
        shell = np.flatnonzero(table.shell_mask(bval))
        if bval == 0:
            pick = shell[:n]
            rest = shell[n:2 * n]
        else:
            order = min(8, shm.max_order_for(n))
            pick = _subsample(table, bval, n, order, seed, restarts)
            rest = np.setdiff1d(shell, pick)[:n]
        a.append(pick)
        b.append(rest)
    return np.sort(np.concatenate(a)), np.sort(np.concatenate(b))


def input_rows(table, n_sig, seed=0, restarts=10):
    """One b0 plus ``n_sig`` condition-optimized b=1000 directions."""
    order = shm.max_order_for(n_sig)
    dw = _subsample(table, INPUT_SHELL, n_sig, order, seed, restarts)
    b0 = np.flatnonzero(table.b0_mask)
    if not b0.size:
        raise InvalidCohortError("input construction needs a b0 measurement")
    return np.concatenate([[b0[0]], dw]), order


def input_sh(volume, rows, order):
    """b0-normalized signal on ``rows`` projected to SH of ``order``."""
    sub = fm.SignalVolume(volume.data[..., rows], volume.table.select(rows), volume.voxel_size)
    norm = fm.b0_normalize(sub)
    return shm.sh_fit(norm.data, norm.table.bvecs, order)


def _dataset(cache, cohort, i, gt_method, rows, order, mask=None):
    vol = cache.volume(cohort, i)
    x = input_sh(vol, rows, order)
    gt, _ = cache.fit(cohort, i, gt_method)
    m = np.ones(cohort.dims, bool) if mask is None else mask
    return rg.RegressionDataset(x, gt.fod, m)


def _evaluate(cache, model, cohort, ids, gt_method, rows, order):
    reps = []
    for i in ids:
        vol = cache.volume(cohort, i)
        x = input_sh(vol, rows, order)
        pred = rg.predict_volume(model, x)
        gt, gt_peaks = cache.fit(cohort, i, gt_method)
        peaks = fa.extract_peaks_volume(pred)
        reps.append(metrics.compare(gt_peaks, peaks, fa.afd_total(gt.fod), fa.afd_total(pred)))
    return metrics.mean_reports(reps)


def _train(cache, cohort, gt_method, rows, order, model_spec, train_cfg):
    train = [_dataset(cache, cohort, i, gt_method, rows, order) for i in cohort.train_ids]
    val = [_dataset(cache, cohort, i, gt_method, rows, order) for i in cohort.val_ids]
    return rg.train(train, val, model_spec, train_cfg)


# --------------------------------------------------------------------------
# experiments


def run_consistency(cohort, method, split_seed=0, cache=None, restarts=10):
    """Split-half agreement of one fitting method over all cohort subjects."""
    cache = cache or DEFAULT_CACHE
    table = cohort.table()
    half_a, half_b = split_halves(table, method, split_seed, restarts)
    reps, failures = [], 0
    for i in range(cohort.n_subjects):
        fit_a, peaks_a = cache.fit(cohort, i, method, half_a)
        fit_b, peaks_b = cache.fit(cohort, i, method, half_b)
        failures += len(fit_a.failures) + len(fit_b.failures)
        reps.append(metrics.compare(peaks_a, peaks_b, fa.afd_total(fit_a.fod),
                                    fa.afd_total(fit_b.fod)))
    agg = metrics.mean_reports(reps)
    return ExperimentReport(
        "consistency",
        {"cohort": cohort.to_dict(), "method": method, "split_seed": split_seed,
         "half_sizes": [int(len(half_a)), int(len(half_b))]},
        {f"{method}/halves": agg.to_dict()},
        {"solver_failures": failures, "n_subjects": cohort.n_subjects})


def run_ablation(cohort, n_sig_list=(6, 15, 28, 45), gt_method="msmt", model_spec=None,
                 train_cfg=None, input_seed=0, cache=None, restarts=10):
    """Regressor accuracy against ground truth as a function of input size."""
    cache = cache or DEFAULT_CACHE
    model_spec = model_spec or rg.ModelSpec()
    train_cfg = train_cfg or rg.TrainConfig()
    table = cohort.table()
    n_b1000 = int(table.shell_mask(INPUT_SHELL).sum())
    if max(n_sig_list) > n_b1000:
        raise InvalidCohortError(f"b=1000 shell has only {n_b1000} directions")
    conditions, diag = {}, {}
    for n_sig in n_sig_list:
        rows, order = input_rows(table, n_sig, input_seed, restarts)
        model, hist = _train(cache, cohort, gt_method, rows, order, model_spec, train_cfg)
        name = f"{gt_method}/n_sig={n_sig}"
        conditions[name] = _evaluate(cache, model, cohort, cohort.test_ids, gt_method,
                                     rows, order).to_dict()
        diag[name] = {"input_order": order, "best_epoch": hist.best_epoch,
                      "epochs": len(hist.val_loss), "best_val_loss": min(hist.val_loss)}
    return ExperimentReport(
        "ablation",
        {"cohort": cohort.to_dict(), "gt_method": gt_method, "n_sig_list": list(n_sig_list),
         "model": model_spec.to_dict(), "train": train_cfg.to_dict(), "input_seed": input_seed},
        conditions, diag)


def run_age_shift(early, late, gt_method="msmt", n_sig=15, model_spec=None, train_cfg=None,
                  input_seed=0, cache=None, restarts=10):
    """Self- and cross-age evaluation of models trained per age group."""
    cache = cache or DEFAULT_CACHE
    model_spec = model_spec or rg.ModelSpec()
    train_cfg = train_cfg or rg.TrainConfig()
    t_early, t_late = early.table(), late.table()
    if len(t_early) != len(t_late) or not (
            np.array_equal(t_early.bvals, t_late.bvals) and np.array_equal(t_early.bvecs, t_late.bvecs)):
        raise InvalidCohortError("early and late cohorts must share the gradient table")
    rows, order = input_rows(t_early, n_sig, input_seed, restarts)
    groups = {"early": early, "late": late}
    models, diag = {}, {}
    for g, cohort in groups.items():
        model, hist = _train(cache, cohort, gt_method, rows, order, model_spec, train_cfg)
        models[g] = model
        diag[f"{gt_method}/model={g}"] = {"best_epoch": hist.best_epoch,
                                          "epochs": len(hist.val_loss)}
    conditions = {}
    for mg in groups:
        for tg, cohort in groups.items():
            rep = _evaluate(cache, models[mg], cohort, cohort.test_ids, gt_method, rows, order)
            conditions[f"{gt_method}/model={mg},test={tg}"] = rep.to_dict()
    return ExperimentReport(
        "ageshift",
        {"early": early.to_dict(), "late": late.to_dict(), "gt_method": gt_method,
         "n_sig": n_sig, "model": model_spec.to_dict(), "train": train_cfg.to_dict(),
         "input_seed": input_seed},
        conditions, diag)


# --------------------------------------------------------------------------
# configured runs over several seeds


@dataclass
class ExperimentConfig:
    """Configuration of a full experiment run (``experiment.json``)."""
    experiment: str = "consistency"
    methods: tuple = ("msmt", "ss3t")
    seeds: tuple = (0,)
    cohort: CohortSpec = field(default_factory=CohortSpec)
    n_sig_list: tuple = (6, 15, 28, 45)
    n_sig: int = 15
    early_ages: tuple = EARLY_AGES
    late_ages: tuple = LATE_AGES
    protocol_seed: int = 0
    subsample_restarts: int = 10
    model: rg.ModelSpec = field(default_factory=rg.ModelSpec)
    train: rg.TrainConfig = field(default_factory=rg.TrainConfig)

    def __post_init__(self):
        if self.experiment not in ("consistency", "ablation", "ageshift"):
            raise InvalidArgumentError(f"unknown experiment {self.experiment!r}")
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.n_sig_list = tuple(int(n) for n in self.n_sig_list)
        if not self.seeds:
            raise InvalidArgumentError("at least one seed is required")
        for m in self.methods:
            if m not in HALF_COUNTS:
                raise InvalidArgumentError(f"unknown method {m!r}")

    def to_dict(self):
        return {"experiment": self.experiment, "methods": list(self.methods),
                "seeds": list(self.seeds), "cohort": self.cohort.to_dict(),
                "n_sig_list": list(self.n_sig_list), "n_sig": self.n_sig,
                "early_ages": list(self.early_ages), "late_ages": list(self.late_ages),
                "protocol_seed": self.protocol_seed,
                "subsample_restarts": self.subsample_restarts,
                "model": self.model.to_dict(), "train": self.train.to_dict()}


def _mean_condition(dicts):
    def avg(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None
    out = {
        "ar": {k: avg([d["ar"][k] for d in dicts]) for k in ("1", "2", "3")},
        "ae": {k: avg([d["ae"][k] for d in dicts]) for k in ("1", "2", "3")},
        "afd_mape": avg([d["afd_mape"] for d in dicts]),
        "multi_fiber_a": avg([d["multi_fiber_a"] for d in dicts]),
        "multi_fiber_b": avg([d["multi_fiber_b"] for d in dicts]),
        "confusion": np.mean([d["confusion"] for d in dicts], axis=0).tolist(),
        "n_voxels": int(sum(d["n_voxels"] for d in dicts)),
        "n_afd_excluded": int(sum(d["n_afd_excluded"] for d in dicts)),
        "extra": {"n_seeds": len(dicts)},
    }
    return out


def run_experiment(cfg, cache=None):
    """Run ``cfg`` for every seed and method; conditions are averaged over seeds."""
    cache = cache or SubjectCache()
    per_seed = []
    for seed in cfg.seeds:
        cohort = cfg.cohort.with_seed(seed)
        reports = []
        for method in cfg.methods:
            if cfg.experiment == "consistency":
                reports.append(run_consistency(cohort, method, cfg.protocol_seed, cache=cache,
                                               restarts=cfg.subsample_restarts))
            elif cfg.experiment == "ablation":
                train_cfg = rg.TrainConfig(**{**cfg.train.to_dict(), "seed": seed})
                model = rg.ModelSpec(**{**cfg.model.to_dict(), "seed": seed})
                reports.append(run_ablation(cohort, cfg.n_sig_list, method, model, train_cfg,
                                            input_seed=cfg.protocol_seed, cache=cache,
                                            restarts=cfg.subsample_restarts))
            else:
                early = CohortSpec(**{**cohort.to_dict(), "age_range": cfg.early_ages})
                late = CohortSpec(**{**cohort.to_dict(), "age_range": cfg.late_ages,
                                     "seed": seed + 7919})
                train_cfg = rg.TrainConfig(**{**cfg.train.to_dict(), "seed": seed})
                model = rg.ModelSpec(**{**cfg.model.to_dict(), "seed": seed})
                reports.append(run_age_shift(early, late, method, cfg.n_sig, model, train_cfg,
                                             input_seed=cfg.protocol_seed, cache=cache,
                                             restarts=cfg.subsample_restarts))
        conds, diags = {}, {}
        for r in reports:
            conds.update(r.conditions)
            diags.update(r.diagnostics)
        per_seed.append({"seed": seed, "conditions": conds, "diagnostics": diags})
    names = list(per_seed[0]["conditions"])
    merged = {n: _mean_condition([p["conditions"][n] for p in per_seed]) for n in names}
    return ExperimentReport(cfg.experiment, cfg.to_dict(), merged,
                            {"n_seeds": len(cfg.seeds)}, per_seed)
