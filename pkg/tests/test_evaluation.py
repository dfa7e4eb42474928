import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfunlearn import nncore as nn
from dfunlearn.checkpoint import Checkpoint
from dfunlearn.data import BlobSpec, Dataset, make_blobs, restrict
from dfunlearn.engine import SupervisedConfig, retrain_gold, train_teacher
from dfunlearn.errors import ConfigError, UndefinedMetricError
from dfunlearn.evaluation import (DegenerateMetricWarning, RelearnConfig, RunMetrics, ShadowConfig,
                                  accuracy, ain, assemble_report, attack_f1, attack_predictions,
                                  f1_score, fit_shadow_attack, fit_threshold, mia_i, mia_ii,
                                  per_class_accuracy, per_sample_loss, report_csv)
from dfunlearn.losses import LabelSplit
from dfunlearn.models import ClassifierSpec, init_network, make_rng
from oracle import population_std

SPEC = ClassifierSpec(2, (32, 32), 5)


def fixed_model(logit_fn, k=5, d=2):
    """A linear 'model' whose logits are ``x @ W``; ``logit_fn`` sets W."""
    spec = ClassifierSpec(d, (), k)
    params = nn.ParameterSet({"fc0.weight": logit_fn(np.zeros((d, k))), "fc0.bias": np.zeros((1, k))})
    return Checkpoint(spec, params)


@pytest.fixture(scope="module")
def toy():
    train, test = make_blobs(BlobSpec(n_train=40, n_test=40, seed=5))
    sup = SupervisedConfig(epochs=20)
    teacher = train_teacher(train, SPEC, sup, test)
    split = LabelSplit(5, (3,))
    gold = retrain_gold(train, split, SPEC, sup)
    return train, test, sup, teacher, gold, split


def test_accuracy_trivial_models():
    ds = Dataset(np.eye(5)[:, :5], np.arange(5))
    perfect = fixed_model(lambda w: np.eye(5), d=5)
    assert accuracy(perfect, ds) == 100.0
    const = fixed_model(lambda w: np.zeros((5, 5)), d=5)
    assert accuracy(const, ds) == pytest.approx(100.0 / 5)
    with pytest.raises(UndefinedMetricError):
        accuracy(perfect, ds, [9])


def test_accuracy_weighted_combination(toy):
    train, test, _, teacher, _, split = toy
    nf = np.isin(test.y, split.forget).sum()
    nr = len(test) - nf
    combo = (accuracy(teacher, test, split.forget) * nf + accuracy(teacher, test, split.retain) * nr) / len(test)
    assert accuracy(teacher, test) == pytest.approx(combo, abs=1e-10)
    pc = per_class_accuracy(teacher, test, 5)
    assert np.mean(pc) == pytest.approx(accuracy(teacher, test), abs=1e-10)


def test_per_sample_loss_matches_direct(toy):
    train, _, _, teacher, _, _ = toy
    p = teacher.proba(train.x)
    direct = -np.log(p[np.arange(len(train)), train.y])
    got = per_sample_loss(teacher, train)
    ok = direct < 30
    assert np.allclose(got[ok], direct[ok], rtol=1e-9, atol=1e-12)
    assert np.all(got >= 0)


# -- AIN ------------------------------------------------------------------------------

def test_ain_gold_vs_gold_is_one(toy):
    train, test, _, teacher, gold, split = toy
    cfg = RelearnConfig(max_steps=200)
    assert ain(gold, gold, teacher, train, test, split, cfg) == 1.0


def test_ain_teacher_counts_one_step(toy):
    train, test, _, teacher, gold, split = toy
    cfg = RelearnConfig(max_steps=200)
    value = ain(teacher, gold, teacher, train, test, split, cfg)
    assert 0 < value <= 1.0


def test_ain_undefined_for_zero_original(toy):
    train, test, _, _, gold, split = toy
    with pytest.raises(UndefinedMetricError):
        ain(gold, gold, gold, train, test, split, RelearnConfig())


def test_relearn_config_validates():
    with pytest.raises(ConfigError):
        RelearnConfig(margin=1.0)
    with pytest.raises(ConfigError):
        RelearnConfig(max_steps=0)


# -- MIA-I ------------------------------------------------------------------------------

def test_fit_threshold_separable():
    thr = fit_threshold(np.array([0.1, 0.2]), np.array([0.8, 0.9]))
    assert 0.2 <= thr < 0.8


grid = st.integers(0, 200).map(lambda i: i / 20.0)  # keeps the transform strictly monotone in f64


@given(st.lists(grid, min_size=2, max_size=30), st.lists(grid, min_size=2, max_size=30),
       st.lists(grid, min_size=1, max_size=30))
def test_threshold_attack_monotone_invariant(mem, non, forget):
    # the attack outcome depends only on the order of the scores
    def outcome(f):
        m, n, q = (f(np.array(v)) for v in (mem, non, forget))
        thr = fit_threshold(m, n)
        return None if thr is None else (q > thr).tolist()
    assert outcome(lambda v: v) == outcome(lambda v: np.exp(v / 3.0) * 2.0 + 1.0)


def test_mia_i_directions(toy):
    train, test, _, teacher, gold, split = toy
    d_f = restrict(train, split.forget)
    d_r, d_r_test = restrict(train, split.retain), restrict(test, split.retain)
    assert mia_i(gold, d_f, d_r, d_r_test) >= 95.0
    assert mia_i(gold, d_f, d_r, d_r_test) == mia_i(gold.copy(), d_f, d_r, d_r_test)


def test_mia_i_degenerate_warns():
    const = fixed_model(lambda w: np.zeros((2, 5)))
    ds = Dataset(np.ones((4, 2)), np.array([0, 1, 2, 3]))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert mia_i(const, ds, ds, ds) == 50.0
    assert any(issubclass(w.category, DegenerateMetricWarning) for w in caught)


# -- MIA-II ---------------------------------------------------------------------------------

def test_f1_score():
    assert f1_score(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0])) == pytest.approx(0.5)
    assert f1_score(np.zeros(4, int), np.array([1, 0, 1, 0])) == 0.0


def test_shadow_config_validates():
    with pytest.raises(ConfigError):
        ShadowConfig(n_shadow=1)


def test_mia_ii_deterministic_and_chance_on_random(toy):
    train, test, sup, teacher, _, _ = toy
    cfg = ShadowConfig(n_shadow=2, attack_epochs=5)
    quick = SupervisedConfig(epochs=5)
    a = mia_ii(teacher, train, test, quick, cfg, seed=1)
    assert a == mia_ii(teacher, train, test, quick, cfg, seed=1)
    attack = fit_shadow_attack(SPEC, train, test, quick, cfg, seed=1)
    assert attack_f1(teacher, attack, train, test, 1) == a
    rand = Checkpoint(SPEC, init_network(SPEC, make_rng(77)))
    pred, truth = attack_predictions(rand, attack, train, test, 1)
    assert truth.mean() == 0.5
    assert abs(np.mean(pred == truth) - 0.5) <= 0.15


def test_mia_ii_needs_data():
    ds = Dataset(np.zeros((2, 2)), np.array([0, 1]))
    with pytest.raises(ConfigError):
        fit_shadow_attack(ClassifierSpec(2, (), 2), ds, ds, SupervisedConfig(epochs=1))


# -- report -------------------------------------------------------------------------------------

def run(method, seed, af, ar=50.0):
    return RunMetrics(method, seed, af, ar, 10.0, 20.0, 1.0)


def test_report_aggregation():
    rows = assemble_report([run("A", 1, 90.0), run("A", 2, 92.0), run("A", 3, 94.0), run("B", 7, 5.0)])
    assert [r.method for r in rows] == ["A", "B"]
    assert rows[0].A_f_mean == pytest.approx(92.0)
    assert rows[0].A_f_std == pytest.approx(population_std([90.0, 92.0, 94.0]), abs=1e-12)
    assert rows[0].A_f_std == pytest.approx(1.633, abs=5e-4)
    assert rows[1].A_f_std == 0.0 and rows[1].seed_count == 1
    same = assemble_report([run("C", s, 3.0) for s in range(3)])
    assert same[0].A_f_std == 0.0


def test_report_csv_shape():
    text = report_csv(assemble_report([run("A", 1, 90.0)]))
    lines = text.splitlines()
    assert lines[0] == "method,seed_count,A_f_mean,A_f_std,A_r_mean,A_r_std,MIA_I,MIA_II,AIN"
    assert lines[1].split(",")[:4] == ["A", "1", "90.0000", "0.0000"]
    assert '"' not in text


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=6))
def test_report_std_property(values):
    rows = assemble_report([run("M", i, v) for i, v in enumerate(values)])
    assert rows[0].A_f_std == pytest.approx(population_std(values), abs=1e-9)
    assert math.isclose(rows[0].A_f_mean, sum(values) / len(values), abs_tol=1e-9)
