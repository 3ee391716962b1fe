"""Fiber-count agreement, angular error and AFD error between two FOD fields."""
import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import EmptyPopulationError, InvalidArgumentError
from .fod_analysis import peak_counts

CLASSES = (1, 2, 3)
UNDEFINED = None


def _as_peaks(peaks):
    p = np.asarray(peaks, float)
    return p.reshape(p.shape[:-1] + (-1, 4))


def _mask_for(shape, mask):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, bool)
    if m.shape != shape:
        raise InvalidArgumentError(f"mask shape {m.shape} != volume shape {shape}")
    return m


def confusion_counts(peaks_a, peaks_b, mask=None):
    """Integer 3x3 fiber-count table over voxels where both sides have 1-3 peaks."""
    pa, pb = _as_peaks(peaks_a), _as_peaks(peaks_b)
    if pa.shape[:-2] != pb.shape[:-2]:
        raise InvalidArgumentError("peak volumes differ in shape")
    m = _mask_for(pa.shape[:-2], mask)
    ka = (pa[..., 3] > 0).sum(-1)[m]
    kb = (pb[..., 3] > 0).sum(-1)[m]
    ok = (ka >= 1) & (ka <= 3) & (kb >= 1) & (kb <= 3)
    counts = np.zeros((3, 3), dtype=np.int64)
    np.add.at(counts, (ka[ok] - 1, kb[ok] - 1), 1)
    return counts


def confusion_matrix(peaks_a, peaks_b, mask=None):
    """Fiber-count confusion normalized over the eligible population.

    Rows index side A's peak count (1..3), columns side B's. Voxels with no
    peak on either side are excluded.
    """
    counts = confusion_counts(peaks_a, peaks_b, mask)
    total = counts.sum()
    if total == 0:
        raise EmptyPopulationError("no voxel has 1-3 peaks on both sides")
    return counts / total


def agreement_rate(cm, k):
    """Class-``k`` Jaccard agreement in percent (``None`` if the class is absent)."""
    if k not in CLASSES:
        raise InvalidArgumentError("k must be 1, 2 or 3")
    cm = np.asarray(cm, float)
    i = k - 1
    denom = cm[i].sum() + cm[:, i].sum() - cm[i, i]
    if denom <= 0:
        return UNDEFINED
    return float(100.0 * cm[i, i] / denom)


def multi_fiber_fraction(cm, side="a"):
    """Percentage of the population with two or more peaks on one side."""
    cm = np.asarray(cm, float)
    if side not in ("a", "b"):
        raise InvalidArgumentError("side must be 'a' or 'b'")
    single = cm[0].sum() if side == "a" else cm[:, 0].sum()
    return float(100.0 * (1.0 - single / cm.sum()))


def _pair_angles(a, b):
    cos = np.abs(a @ b.T) / (np.linalg.norm(a, axis=1)[:, None] * np.linalg.norm(b, axis=1)[None])
    return np.degrees(np.arccos(np.clip(cos, 0.0, 1.0)))


def match_peaks(axes_a, axes_b):
    """Optimal one-to-one matching (exhaustive over permutations, k <= 3).

    Returns the matched angles in degrees for the minimum total angle.
    """
    ang = _pair_angles(np.asarray(axes_a, float), np.asarray(axes_b, float))
    k = ang.shape[0]
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(k)):
        tot = sum(ang[i, perm[i]] for i in range(k))
        if tot < best:
            best, best_perm = tot, perm
    return np.array([ang[i, best_perm[i]] for i in range(k)])


def angular_error(peaks_a, peaks_b, mask=None):
    """Mean matched-peak angle per class, pooled over count-agreeing voxels.

    Returns a dict ``{k: degrees or None}``.
    """
    pa, pb = _as_peaks(peaks_a), _as_peaks(peaks_b)
    m = _mask_for(pa.shape[:-2], mask)
    A, B = pa[m], pb[m]
    ka = (A[..., 3] > 0).sum(-1)
    kb = (B[..., 3] > 0).sum(-1)
    sums = {k: 0.0 for k in CLASSES}
    counts = {k: 0 for k in CLASSES}
    for v in np.flatnonzero((ka == kb) & (ka >= 1) & (ka <= 3)):
        k = int(ka[v])
        ia = A[v][A[v, :, 3] > 0, :3]
        ib = B[v][B[v, :, 3] > 0, :3]
        ang = match_peaks(ia, ib)
        sums[k] += float(ang.sum())
        counts[k] += k
    return {k: (sums[k] / counts[k] if counts[k] else UNDEFINED) for k in CLASSES}


def afd_mape(afd_ref, afd_test, mask=None):
    """Mean absolute percentage error of AFD; non-positive references are skipped.

    Returns ``(mape, n_excluded)``.
    """
    ref = np.asarray(afd_ref, float)
    test = np.asarray(afd_test, float)
    m = _mask_for(ref.shape, mask)
    valid = m & (ref > 0)
    excluded = int((m & ~(ref > 0)).sum())
    if not valid.any():
        raise EmptyPopulationError("no voxel with a positive reference AFD")
    return 100.0 * float(np.mean(np.abs(ref[valid] - test[valid]) / ref[valid])), excluded


@dataclass
class MetricsReport:
    ar: dict
    ae: dict
    afd_mape: float
    multi_fiber_a: float
    multi_fiber_b: float
    confusion: list
    n_voxels: int
    n_afd_excluded: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["ar"] = {str(k): v for k, v in self.ar.items()}
        d["ae"] = {str(k): v for k, v in self.ae.items()}
        return d


def compare(peaks_a, peaks_b, afd_a, afd_b, mask=None):
    """All comparison metrics between field A (reference) and field B."""
    counts = confusion_counts(peaks_a, peaks_b, mask)
    if counts.sum() == 0:
        raise EmptyPopulationError("no voxel has 1-3 peaks on both sides")
    cm = counts / counts.sum()
    mape, excl = afd_mape(afd_a, afd_b, mask)
    return MetricsReport(
        ar={k: agreement_rate(cm, k) for k in CLASSES},
        ae=angular_error(peaks_a, peaks_b, mask),
        afd_mape=mape,
        multi_fiber_a=multi_fiber_fraction(cm, "a"),
        multi_fiber_b=multi_fiber_fraction(cm, "b"),
        confusion=cm.tolist(),
        n_voxels=int(counts.sum()),
        n_afd_excluded=excl,
    )


def mean_reports(reports):
    """Unweighted mean over reports; undefined class values are skipped."""
    def avg(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    return MetricsReport(
        ar={k: avg([r.ar[k] for r in reports]) for k in CLASSES},
        ae={k: avg([r.ae[k] for r in reports]) for k in CLASSES},
        afd_mape=avg([r.afd_mape for r in reports]),
        multi_fiber_a=avg([r.multi_fiber_a for r in reports]),
        multi_fiber_b=avg([r.multi_fiber_b for r in reports]),
        confusion=np.mean([r.confusion for r in reports], axis=0).tolist(),
        n_voxels=int(sum(r.n_voxels for r in reports)),
        n_afd_excluded=int(sum(r.n_afd_excluded for r in reports)),
        extra={"n_subjects": len(reports),
               "ar_std": {str(k): _std([r.ar[k] for r in reports]) for k in CLASSES},
               "ae_std": {str(k): _std([r.ae[k] for r in reports]) for k in CLASSES},
               "afd_mape_std": _std([r.afd_mape for r in reports])},
    )


def _std(vals):
    vals = [v for v in vals if v is not None]
    return float(np.std(vals)) if vals else None


def report_rows(experiment, method, report, condition=""):
    """Flat rows ``(experiment, method, condition, class, metric, value)``."""
    rows = []
    for k in CLASSES:
        rows.append((experiment, method, condition, k, "AR", report.ar[k]))
        rows.append((experiment, method, condition, k, "AE", report.ae[k]))
    rows.append((experiment, method, condition, "", "dAFD", report.afd_mape))
    rows.append((experiment, method, condition, "", "multi_fiber_a", report.multi_fiber_a))
    rows.append((experiment, method, condition, "", "multi_fiber_b", report.multi_fiber_b))
    return rows


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment", "method", "condition", "class", "metric", "value"])
    for r in rows:
        w.writerow(["" if x is None else (repr(float(x)) if isinstance(x, (float, np.floating)) else x)
                    for x in r])
    return buf.getvalue()


def report_to_json(report):
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)


__all__ = ["confusion_matrix", "confusion_counts", "agreement_rate", "multi_fiber_fraction",
           "angular_error", "afd_mape", "match_peaks", "compare", "mean_reports",
           "MetricsReport", "peak_counts", "report_rows", "rows_to_csv"]
