import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fodkit import metrics as mt
from fodkit import sphere_sh as shm
from fodkit.errors import EmptyPopulationError, InvalidArgumentError

from reference_values import AR, CM, MULTI_FIBER


def peaks_from_axes(axes_list):
    """Peak volume of shape (n, 1, 1, 12) from per-voxel axis lists."""
    out = np.zeros((len(axes_list), 1, 1, 12))
    for v, axes in enumerate(axes_list):
        for i, a in enumerate(axes):
            out[v, 0, 0, 4 * i: 4 * i + 3] = a
            out[v, 0, 0, 4 * i + 3] = 1.0 - 0.1 * i
    return out


def count_volume(counts):
    rng = np.random.default_rng(0)
    return peaks_from_axes([list(rng.normal(size=(k, 3))) for k in counts])


def tilt(deg, about=(1.0, 0.0, 0.0), base=(0.0, 0.0, 1.0)):
    return shm.rotation_matrix(np.array(about), np.radians(deg)) @ np.array(base)


# ------------------------------------------------------------- confusion

def test_confusion_identity_diagonal():
    p = count_volume([1, 2, 3, 2, 1])
    cm = mt.confusion_matrix(p, p)
    assert np.allclose(cm, np.diag([0.4, 0.4, 0.2]))
    assert np.trace(cm) == pytest.approx(1.0)


def test_confusion_hand_built():
    a = count_volume([1, 1, 2, 3])
    b = count_volume([1, 2, 2, 3])
    cm = mt.confusion_matrix(a, b)
    assert np.allclose(cm, [[.25, .25, 0], [0, .25, 0], [0, 0, .25]])


def test_confusion_excludes_empty_and_masks():
    a = count_volume([0, 1, 2])
    b = count_volume([1, 1, 0])
    assert np.array_equal(mt.confusion_counts(a, b), [[1, 0, 0], [0, 0, 0], [0, 0, 0]])
    with pytest.raises(EmptyPopulationError):
        mt.confusion_matrix(count_volume([0, 1]), count_volume([1, 0]))
    mask = np.zeros((3, 1, 1), bool)
    with pytest.raises(EmptyPopulationError):
        mt.confusion_matrix(a, b, mask)
    with pytest.raises(InvalidArgumentError):
        mt.confusion_matrix(a, b, np.ones((2, 1, 1), bool))


# ------------------------------------------------------------- agreement

@pytest.mark.parametrize("method", ["msmt", "ss3t"])
def test_agreement_rates_from_reference_matrices(method):
    for k, expect in zip((1, 2, 3), AR[method]):
        assert mt.agreement_rate(CM[method], k) == pytest.approx(expect, abs=0.1)


def test_agreement_worked_value():
    cm = CM["msmt"]
    direct = 0.715 / (cm[0].sum() + cm[:, 0].sum() - 0.715) * 100
    assert cm[0].sum() == pytest.approx(0.7648)
    assert cm[:, 0].sum() == pytest.approx(0.7547)
    assert mt.agreement_rate(cm, 1) == pytest.approx(direct)


@pytest.mark.parametrize("method", ["msmt", "ss3t"])
def test_multi_fiber_fraction_reference(method):
    assert mt.multi_fiber_fraction(CM[method], "a") == pytest.approx(MULTI_FIBER[method], abs=1.0)


def test_agreement_identity_and_undefined():
    for k in (1, 2, 3):
        assert mt.agreement_rate(np.eye(3) / 3, k) == pytest.approx(100.0)
    cm = np.zeros((3, 3))
    cm[0, 0] = 1
    assert mt.agreement_rate(cm, 2) is None
    assert mt.multi_fiber_fraction(cm) == 0.0
    with pytest.raises(InvalidArgumentError):
        mt.agreement_rate(cm, 4)
    with pytest.raises(InvalidArgumentError):
        mt.multi_fiber_fraction(cm, "c")


@given(st.lists(st.floats(0, 1), min_size=9, max_size=9).filter(lambda v: sum(v) > 1e-3))
def test_agreement_transpose_symmetry(vals):
    cm = np.array(vals).reshape(3, 3)
    cm = cm / cm.sum()
    for k in (1, 2, 3):
        a, b = mt.agreement_rate(cm, k), mt.agreement_rate(cm.T, k)
        if a is None:
            assert b is None
        else:
            assert 0 <= a <= 100
            assert a == pytest.approx(b, abs=1e-9)


# ---------------------------------------------------------- angular error

def test_angular_error_identity_zero():
    p = count_volume([1, 2, 3])
    ae = mt.angular_error(p, p)
    assert all(ae[k] == pytest.approx(0.0, abs=1e-6) for k in (1, 2, 3))


def test_angular_error_single_ten_degrees():
    ae = mt.angular_error(peaks_from_axes([[tilt(0)]]), peaks_from_axes([[tilt(10)]]))
    assert ae[1] == pytest.approx(10.0, abs=1e-9)
    assert ae[2] is None and ae[3] is None


def test_angular_error_picks_minimum_assignment():
    x = np.array([1.0, 0.0, 0.0])
    z = np.array([0.0, 0.0, 1.0])
    a = [x, z]
    # b[0] is 5 deg from z (and ~85 from x) after the crossed ordering
    b = [tilt(5, about=x, base=z), tilt(7, about=z, base=x)]
    ae = mt.angular_error(peaks_from_axes([a]), peaks_from_axes([b]))
    assert ae[2] == pytest.approx(6.0, abs=1e-9)


def test_match_peaks_against_all_permutations():
    rng = np.random.default_rng(7)
    for _ in range(50):
        k = int(rng.integers(1, 4))
        A = rng.normal(size=(k, 3))
        B = rng.normal(size=(k, 3))
        got = mt.match_peaks(A, B).sum()
        brute = min(sum(shm.axis_angle_deg(A[i], B[p[i]]) for i in range(k))
                    for p in itertools.permutations(range(k)))
        assert got == pytest.approx(brute, abs=1e-9)


def test_angular_error_antipodal_metric():
    z = np.array([0.0, 0.0, 1.0])
    ae = mt.angular_error(peaks_from_axes([[z]]), peaks_from_axes([[-tilt(3)]]))
    assert ae[1] == pytest.approx(3.0, abs=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_angular_error_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    A = [list(rng.normal(size=(k, 3))) for k in (1, 2, 3)]
    B = [[a + 0.2 * rng.normal(size=3) for a in axes] for axes in A]
    Rm = shm.random_rotation(rng)
    e1 = mt.angular_error(peaks_from_axes(A), peaks_from_axes(B))
    e2 = mt.angular_error(peaks_from_axes([[Rm @ a for a in v] for v in A]),
                          peaks_from_axes([[Rm @ b for b in v] for v in B]))
    for k in (1, 2, 3):
        assert 0 <= e1[k] <= 90
        assert e1[k] == pytest.approx(e2[k], abs=1e-6)


# -------------------------------------------------------------------- AFD

def test_afd_mape_examples():
    ref = np.array([[[2.0]]])
    assert mt.afd_mape(ref, ref) == (0.0, 0)
    assert mt.afd_mape(ref, np.array([[[1.0]]]))[0] == pytest.approx(50.0)
    rng = np.random.default_rng(0)
    r = rng.uniform(0.5, 2, size=(3, 3, 2))
    assert mt.afd_mape(r, 1.1 * r)[0] == pytest.approx(10.0, abs=1e-12)


def test_afd_mape_excludes_nonpositive_reference():
    ref = np.array([[[0.0, 2.0, -1.0]]])
    test = np.array([[[5.0, 3.0, 1.0]]])
    mape, excl = mt.afd_mape(ref, test)
    assert mape == pytest.approx(50.0) and excl == 2
    with pytest.raises(EmptyPopulationError):
        mt.afd_mape(np.zeros((1, 1, 2)), np.ones((1, 1, 2)))


@given(st.floats(0.01, 10))
def test_afd_mape_homogeneity(k):
    ref = np.linspace(0.5, 3, 12).reshape(2, 3, 2)
    assert mt.afd_mape(ref, k * ref)[0] == pytest.approx(100 * abs(k - 1), rel=1e-9, abs=1e-9)


# ----------------------------------------------------------------- reports

def test_compare_and_serialization():
    a = count_volume([1, 2, 3, 2])
    b = count_volume([1, 2, 2, 2])
    afd = np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1)
    rep = mt.compare(a, b, afd, afd * 1.2)
    assert rep.n_voxels == 4
    assert rep.afd_mape == pytest.approx(20.0)
    assert rep.ar[1] == pytest.approx(100.0)
    assert sum(map(sum, rep.confusion)) == pytest.approx(1.0, abs=1e-6)
    d = json.loads(mt.report_to_json(rep))
    assert set(d["ar"]) == {"1", "2", "3"}
    csv_text = mt.rows_to_csv(mt.report_rows("consistency", "msmt", rep))
    lines = csv_text.strip().split("\n")
    assert lines[0] == "experiment,method,condition,class,metric,value"
    assert len(lines) == 1 + 9


def test_mean_reports_skips_undefined():
    a = count_volume([1, 2])
    r1 = mt.compare(a, a, np.ones((2, 1, 1)), np.ones((2, 1, 1)))
    r2 = mt.compare(a, count_volume([1, 1]), np.ones((2, 1, 1)), 2 * np.ones((2, 1, 1)))
    m = mt.mean_reports([r1, r2])
    assert m.afd_mape == pytest.approx(50.0)
    assert m.ar[2] == pytest.approx((100.0 + 0.0) / 2)
    assert m.ae[3] is None
    assert m.extra["n_subjects"] == 2
