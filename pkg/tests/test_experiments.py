import json

import numpy as np
import pytest

from fodkit import experiments as ex, io, regressor as rg
from fodkit.errors import InvalidArgumentError, InvalidCohortError
from fodkit.sphere_sh import tessellate_sphere

TINY = dict(n_train=2, n_val=0, n_test=0, dims=(4, 4, 2))
AR_KEYS = ("1", "2", "3")


@pytest.fixture(scope="module")
def cache():
    return ex.SubjectCache()


@pytest.fixture(scope="module")
def table():
    return ex.CohortSpec(**TINY).table()


# -------------------------------------------------------------- splits


@pytest.mark.parametrize("method", ["msmt", "ss3t"])
def test_split_halves_disjoint_with_counts(table, method):
    a, b = ex.split_halves(table, method, restarts=0)
    assert not set(a) & set(b)
    for half in (a, b):
        sub = table.select(half)
        got = {int(bv): int(sub.shell_mask(bv).sum()) for bv in sub.shell_values()}
        assert got == ex.HALF_COUNTS[method]
    expected = 150 if method == "msmt" else 54
    assert len(a) == len(b) == expected


def test_split_halves_rejects_short_table():
    short = ex.CohortSpec(**TINY, shells=((0, 20), (1000, 60))).table()
    with pytest.raises(InvalidCohortError):
        ex.split_halves(short, "ss3t", restarts=0)
    with pytest.raises(InvalidCohortError):
        ex.split_halves(short, "msmt", restarts=0)


def test_input_rows_has_b0_and_shell_directions(table):
    rows, order = ex.input_rows(table, 15, restarts=0)
    assert order == 4 and len(rows) == 16
    assert table.b0_mask[rows[0]]
    assert np.all(table.shell_mask(1000.0)[rows[1:]])


# -------------------------------------------------------------- cohort


def test_cohort_split_ids_are_disjoint():
    c = ex.CohortSpec(n_train=3, n_val=2, n_test=1, n_subjects=8)
    ids = c.train_ids + c.val_ids + c.test_ids
    assert len(set(ids)) == len(ids) == 6 and max(ids) < c.n_subjects


@pytest.mark.parametrize("kw", [
    dict(n_train=-1),
    dict(n_train=5, n_val=5, n_test=5, n_subjects=10),
    dict(age_range=(20.0, 30.0)),
    dict(n_train=0, n_val=0, n_test=0, n_subjects=0),
])
def test_cohort_errors(kw):
    with pytest.raises(InvalidCohortError):
        ex.CohortSpec(**kw)


def test_subject_specs_are_seeded_and_in_range():
    c = ex.CohortSpec(age_range=(41.0, 45.14), seed=3)
    a, b = c.subject_spec(0), c.subject_spec(1)
    assert a.seed != b.seed and 41.0 <= a.age <= 45.14
    assert c.subject_spec(0) == a
    with pytest.raises(InvalidArgumentError):
        c.subject_spec(c.n_subjects)


# -------------------------------------------------------------- consistency


@pytest.mark.parametrize("method", ["msmt", "ss3t"])
def test_noiseless_consistency_agrees(cache, method):
    cohort = ex.CohortSpec(**TINY, snr=None)
    rep = ex.run_consistency(cohort, method, cache=cache, restarts=0)
    cond = rep.conditions[f"{method}/halves"]
    assert cond["ar"]["1"] > 95.0
    # s=3 mesh spacing is about 7.6 degrees between neighbours
    mesh = tessellate_sphere(3)
    v = mesh.vertices[mesh.faces]
    spacing = np.degrees(np.median(np.arccos(np.einsum("fi,fi->f", v[:, 0], v[:, 1]))))
    assert cond["ae"]["1"] < spacing


def test_consistency_report_schema(cache):
    cohort = ex.CohortSpec(**TINY)
    rep = ex.run_consistency(cohort, "msmt", cache=cache, restarts=0)
    assert rep.experiment == "consistency"
    assert rep.config["cohort"] == cohort.to_dict()
    assert rep.config["half_sizes"] == [150, 150]
    (name, cond), = rep.conditions.items()
    assert name == "msmt/halves"
    cm = np.array(cond["confusion"])
    assert cm.shape == (3, 3) and cm.sum() == pytest.approx(1.0)
    assert set(cond["ar"]) == set(AR_KEYS) and set(cond["ae"]) == set(AR_KEYS)
    assert cond["extra"]["n_subjects"] == cohort.n_subjects


def test_run_experiment_both_methods_and_csv(cache):
    cfg = ex.ExperimentConfig(methods=("msmt", "ss3t"), cohort=ex.CohortSpec(**TINY),
                              subsample_restarts=0)
    rep = ex.run_experiment(cfg, cache)
    assert list(rep.conditions) == ["msmt/halves", "ss3t/halves"]
    for cond in rep.conditions.values():
        cm = np.array(cond["confusion"])
        assert cm.shape == (3, 3) and cm.sum() == pytest.approx(1.0)
    lines = rep.metrics_csv().splitlines()
    assert lines[0] == "experiment,method,condition,class,metric,value"
    assert len(lines) == 1 + 2 * 9
    assert rep.config == cfg.to_dict()
    plot = rep.plot_csv().splitlines()
    assert plot[0] == "method,condition,x,metric,value" and len(plot) == 1 + 2 * 7


def test_report_is_byte_identical_on_rerun():
    cfg = ex.ExperimentConfig(methods=("ss3t",), seeds=(0, 1),
                              cohort=ex.CohortSpec(n_train=1, n_val=0, n_test=0, dims=(3, 3, 2)),
                              subsample_restarts=0)
    first = io.dump_json(ex.run_experiment(cfg, ex.SubjectCache()))
    second = io.dump_json(ex.run_experiment(cfg, ex.SubjectCache()))
    assert first == second
    assert len(json.loads(first)["per_seed"]) == 2


def test_experiment_config_round_trip():
    cfg = ex.ExperimentConfig(experiment="ablation", seeds=(1, 2), n_sig_list=(6, 15))
    again = io.from_config(ex.ExperimentConfig, cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises(InvalidArgumentError):
        ex.ExperimentConfig(experiment="nope")
    with pytest.raises(InvalidArgumentError):
        ex.ExperimentConfig(seeds=())


# -------------------------------------------------------------- ablation / age shift

FAST_TRAIN = rg.TrainConfig(lr=1e-2, patch_size=4, patches_per_subject=16, max_epochs=60,
                            patience=10)


def test_ablation_noiseless_linear_sanity(cache):
    cohort = ex.CohortSpec(n_train=3, n_val=1, n_test=1, dims=(6, 6, 3), snr=None)
    rep = ex.run_ablation(cohort, [45], "msmt", rg.ModelSpec(kind="linear"), FAST_TRAIN,
                          cache=cache, restarts=0)
    assert list(rep.conditions) == ["msmt/n_sig=45"]
    assert rep.conditions["msmt/n_sig=45"]["ar"]["1"] > 90.0
    assert rep.diagnostics["msmt/n_sig=45"]["input_order"] == 8


def test_ablation_condition_count_and_shell_check(cache):
    cohort = ex.CohortSpec(n_train=1, n_val=1, n_test=1, dims=(3, 3, 2))
    cfg = rg.TrainConfig(lr=1e-2, patch_size=3, patches_per_subject=2, max_epochs=2)
    rep = ex.run_ablation(cohort, [6, 15], "ss3t", rg.ModelSpec(kind="linear"), cfg,
                          cache=cache, restarts=0)
    assert list(rep.conditions) == ["ss3t/n_sig=6", "ss3t/n_sig=15"]
    with pytest.raises(InvalidCohortError):
        ex.run_ablation(cohort, [100], "ss3t", cache=cache, restarts=0)


def test_age_shift_degenerate_cohorts_match(cache):
    c = ex.CohortSpec(n_train=2, n_val=1, n_test=1, dims=(4, 4, 2), age_range=(38.0, 39.0))
    cfg = rg.TrainConfig(lr=1e-2, patch_size=4, patches_per_subject=4, max_epochs=5)
    rep = ex.run_age_shift(c, c, "msmt", 15, rg.ModelSpec(kind="linear"), cfg,
                           cache=cache, restarts=0)
    cells = rep.conditions
    assert len(cells) == 4
    for cell in cells.values():
        assert set(cell["ar"]) == set(AR_KEYS) and "afd_mape" in cell
    self_e = cells["msmt/model=early,test=early"]
    cross = cells["msmt/model=early,test=late"]
    assert self_e == cross


def test_age_shift_requires_shared_table(cache):
    a = ex.CohortSpec(n_train=1, n_val=1, n_test=1, dims=(3, 3, 2))
    b = ex.CohortSpec(n_train=1, n_val=1, n_test=1, dims=(3, 3, 2), table_seed=5)
    with pytest.raises(InvalidCohortError):
        ex.run_age_shift(a, b, "msmt", cache=cache, restarts=0)
