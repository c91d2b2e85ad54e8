import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from affordance3d.metrics import MetricRow, aggregate, aiou, auc, mae, score_pair, sim

scores = st.integers(2, 60).flatmap(
    lambda n: st.tuples(
        arrays(np.float64, n, elements=st.floats(0, 1)),
        arrays(np.float64, n, elements=st.floats(0, 1)),
    )
)


def test_aiou_examples():
    assert aiou([1, 0, 1], [1, 0, 1]) == 1.0
    assert aiou([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(1 / 3)
    assert aiou([0, 0], [0.2, 0.1]) == 1.0  # empty union


def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.3] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    assert auc([0.4, 0.2], [1, 1]) is None


def test_sim_examples():
    g = np.array([0.0, 0.5, 1.0])
    assert sim(g, g) == pytest.approx(1.0)
    assert sim([1, 0], [0, 1]) == 0.0
    assert sim([0.5, 0.5], [1, 0]) == pytest.approx(0.5)
    assert sim([0, 0], [1, 0]) == 0.0


def test_mae_examples():
    g = np.random.default_rng(0).random(20) * 0.8
    assert mae(g, g) == 0.0
    assert mae(g + 0.1, g) == pytest.approx(0.1)


def test_oracles_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(2, 80))
        p = rng.random(n)
        # coarse grid forces ties in AUC
        p = np.round(p * 8) / 8 if rng.random() < 0.5 else p
        g = (rng.random(n) < rng.random()).astype(float) * rng.random(n) ** 0.3
        assert aiou(p, g) == oracles.aiou(p, g)
        ref = oracles.auc(p, g)
        got = auc(p, g)
        assert (got is None) == (ref is None)
        if ref is not None:
            assert abs(got - ref) < 1e-9
        assert abs(mae(p, g) - oracles.mae(p, g)) < 1e-9
        if p.sum() > 0 and g.sum() > 0:
            assert abs(sim(p, g) - oracles.sim(p, g)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(scores)
def test_metric_ranges_and_symmetry(pg):
    p, g = pg
    for v in (aiou(p, g), sim(p, g)):
        assert 0 <= v <= 1 + 1e-12
    assert aiou(p, g) == aiou(g, p)
    assert sim(p, g) == pytest.approx(sim(g, p), abs=1e-12)
    assert mae(p, g) >= 0
    a = auc(p, g)
    assert a is None or 0 <= a <= 1


@settings(max_examples=100, deadline=None)
@given(scores, st.randoms(use_true_random=False))
def test_metrics_permutation_invariant(pg, rnd):
    p, g = pg
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    assert aiou(p[perm], g[perm]) == aiou(p, g)
    assert sim(p[perm], g[perm]) == pytest.approx(sim(p, g), abs=1e-12)
    assert mae(p[perm], g[perm]) == pytest.approx(mae(p, g), abs=1e-12)
    a, b = auc(p[perm], g[perm]), auc(p, g)
    assert (a is None and b is None) or a == pytest.approx(b, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31))
def test_auc_complement_for_strict_rankings(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.permutation(n) / n
    g = rng.random(n) < 0.5
    a = auc(s, g)
    if a is not None:
        assert auc(1 - s, g) == pytest.approx(1 - a, abs=1e-12)


def test_aggregate_skips_single_class_auc():
    rows = [score_pair("o1", "a", [0.9, 0.1], [1, 0]), score_pair("o2", "a", [0.2, 0.1], [0, 0])]
    rep = aggregate(rows)
    assert rep.auc == 1.0 and rep.auc_skipped == 1
    assert rep.empty_unions == 1
    assert rep.aiou == pytest.approx(1.0)


def test_report_text_schema():
    rep = aggregate([MetricRow("mug_0001", "grasp/text", 0.5, None, 0.25, 0.125, False)])
    text = rep.to_text({"model": "m.npz"})
    lines = text.splitlines()
    assert lines[0].startswith("#")
    assert "model = m.npz" in lines
    assert "aggregate.aiou = 0.500000" in lines
    assert lines[-1] == ("row object=mug_0001 prompt=grasp/text aiou=0.500000 auc=nan sim=0.250000 "
                         "mae=0.125000 auc_skipped=1 empty_union=0")
