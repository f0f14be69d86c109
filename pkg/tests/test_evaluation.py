import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from ssvep_cstl.evaluation import (REPORT_SCHEMA, ExperimentConfig, accuracy, betainc_reg, itr,
                                   load_report_accuracies, paired_ttest, run_experiment, split_source_target,
                                   student_t_two_sided_p, summarize, summary_csv, trials_csv, write_report)
from ssvep_cstl.fuzzy import TrainConfig
from ssvep_cstl.signal_core import Dataset, FrequencyTable, synthetic_dataset


# --- metrics

def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([1] * 29 + [0] * 7, [1] * 36) == pytest.approx(0.80556, abs=1e-5)
    assert accuracy([1] * 29 + [0] * 7, [1] * 36) == 29 / 36
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])
    with pytest.raises(ValueError):
        accuracy([], [])


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=60))
def test_accuracy_hand_count(pairs):
    p, t = zip(*pairs)
    assert accuracy(p, t) == sum(a == b for a, b in pairs) / len(pairs)


@pytest.mark.parametrize("n", [2, 6, 12, 40])
@pytest.mark.parametrize("t", [0.5, 1.0, 2.0, 3.7])
def test_itr_zero_at_chance(n, t):
    assert itr(1.0 / n, n, t) == 0.0


def test_itr_examples():
    assert itr(1.0, 40, 2.0) == pytest.approx(30 * math.log2(40), abs=1e-9)
    assert itr(1.0, 40, 2.0) == pytest.approx(159.66, abs=0.01)
    assert itr(0.5, 2, 1.0) == 0.0
    # Wolpaw formula by hand: N = 4, P = 0.7, T = 1.5 s
    bits = 2 + 0.7 * math.log2(0.7) + 0.3 * math.log2(0.1)
    assert itr(0.7, 4, 1.5) == pytest.approx(40 * bits, rel=1e-12)


@pytest.mark.parametrize("n", [2, 6, 40])
def test_itr_monotone_above_chance(n):
    grid = np.linspace(1.0 / n, 1.0, 200)
    vals = [itr(p, n, 1.0) for p in grid]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_itr_errors():
    for args in ((1.1, 4, 1.0), (0.5, 1, 1.0), (0.5, 4, 0.0)):
        with pytest.raises(ValueError):
            itr(*args)


# --- t-test

A10 = [0.81, 0.77, 0.92, 0.85, 0.79, 0.88, 0.74, 0.90, 0.83, 0.86]
B10 = [0.78, 0.75, 0.86, 0.84, 0.73, 0.85, 0.74, 0.85, 0.80, 0.81]


def test_ttest_matches_scipy():
    t, p = paired_ttest(A10, B10)
    ref = stats.ttest_rel(A10, B10)
    assert t == pytest.approx(ref.statistic, abs=1e-6)
    assert p == pytest.approx(ref.pvalue, abs=1e-6)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=30), st.integers(0, 1000))
def test_ttest_against_scipy_random(a, seed):
    b = list(np.asarray(a) + np.random.default_rng(seed).normal(0.3, 1.0, len(a)))
    t, p = paired_ttest(a, b)
    ref = stats.ttest_rel(a, b)
    assert t == pytest.approx(ref.statistic, rel=1e-9, abs=1e-9)
    assert p == pytest.approx(ref.pvalue, abs=1e-9)
    t2, p2 = paired_ttest(b, a)
    assert t2 == pytest.approx(-t) and p2 == pytest.approx(p)


def test_ttest_symmetric_fixture_and_errors():
    t, p = paired_ttest([1.0, 2.0, 3.0, 4.0], [2.0, 1.0, 4.0, 3.0])
    assert abs(t) < 1e-12 and p > 0.5
    with pytest.raises(ValueError):
        paired_ttest([1, 2], [1, 2])
    with pytest.raises(ValueError):
        paired_ttest([1, 2, 3], [0, 1, 2])
    with pytest.raises(ValueError):
        paired_ttest([1, 2, 3], [1, 2])


@given(st.floats(0.5, 30), st.floats(0.5, 30), st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    from scipy.special import betainc
    assert betainc_reg(a, b, x) == pytest.approx(betainc(a, b, x), abs=1e-10)


@given(st.floats(-50, 50), st.integers(1, 200))
def test_student_p_matches_scipy(t, dof):
    assert student_t_two_sided_p(t, dof) == pytest.approx(2 * stats.t.sf(abs(t), dof), abs=1e-10)


# --- splits

def test_split_examples():
    table = FrequencyTable.from_freqs([8.0 + 0.2 * i for i in range(40)])
    plan = split_source_target(table, 4, 6, seed=3)
    assert len(plan.P) == 4 and len(plan.Q) == 36
    assert set(plan.P) | set(plan.Q) == set(range(40)) and not set(plan.P) & set(plan.Q)
    assert plan == split_source_target(table, 4, 6, seed=3)
    assert all(0 <= k < 6 for k in plan.held_out.values()) and set(plan.held_out) == set(plan.P)
    with pytest.raises(ValueError):
        split_source_target(table, 40, 6, 0)


def test_split_frequencies_are_uniform():
    table = FrequencyTable.from_freqs([8.0 + i for i in range(8)])
    counts = np.zeros(8)
    n = 1000
    for s in range(n):
        for c in split_source_target(table, 4, 6, s).P:
            counts[c] += 1
    p = 4 / 8
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


# --- experiments

def fast_cfg(method, repeats=2, **kw):
    return ExperimentConfig(method=method, n_source=2, repeats=repeats, seed=5, stride_s=0.25,
                            train=TrainConfig(epochs_max=15, rules=3, D=8, D_v=8, D_hidden=16), **kw)


@pytest.mark.parametrize("method", ["fuzzy", "cca", "fbcca", "ecca", "emd-ecca"])
def test_run_experiment_methods(small_dataset, method):
    reports, summary = run_experiment(small_dataset, fast_cfg(method))
    assert summary.failures == 0 and summary.repeats == 2
    for r in reports:
        assert r.acc == r.recomputed_acc()
        assert {t.true for t in r.trials} == set(range(4))
        assert len(r.trials) == 2 + 2 * 4
        assert r.t_total_s >= 1.0


def test_run_experiment_deterministic_and_order_invariant(small_dataset, tmp_path):
    r1, s1 = run_experiment(small_dataset, fast_cfg("fuzzy"))
    r2, s2 = run_experiment(small_dataset, fast_cfg("fuzzy"))
    assert trials_csv(r1) == trials_csv(r2) and summary_csv(r1) == summary_csv(r2)
    assert s1.acc_mean == s2.acc_mean
    s_rev = summarize(list(reversed(r1)), "fuzzy")
    assert s_rev.acc_mean == s1.acc_mean and s_rev.acc_std == s1.acc_std
    path = write_report(tmp_path, r1, s1, {"seed": 5})
    doc = json.loads(path.read_text())
    assert doc["schema"] == REPORT_SCHEMA
    assert load_report_accuracies(path) == [r.acc for r in r1]
    for rep in doc["repeats"]:
        assert rep["acc"] == accuracy([t["predicted"] for t in rep["trials"]], [t["true"] for t in rep["trials"]])


def test_failed_repeat_is_recorded(small_dataset):
    bad = Dataset(small_dataset.table, {c: v[:1] for c, v in small_dataset.trials.items()}, 250.0)
    reports, summary = run_experiment(bad, fast_cfg("cca", repeats=1))
    assert summary.failures == 1 and reports[0].error


def test_unknown_method():
    with pytest.raises(ValueError):
        ExperimentConfig(method="svm")


@pytest.mark.slow
def test_noiseless_fuzzy_end_to_end():
    table = FrequencyTable.from_freqs([float(f) for f in range(8, 16)])
    ds = Dataset(table, synthetic_dataset(table, 6, 250.0, 4.0, 4, 0.0, seed=1), 250.0)
    cfg = ExperimentConfig(method="fuzzy", n_source=4, repeats=2, seed=0, stride_s=0.2,
                           train=TrainConfig(epochs_max=40))
    _, summary = run_experiment(ds, cfg)
    assert summary.acc_mean >= 0.95
