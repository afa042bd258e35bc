import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dgmnet import metrics
from dgmnet.errors import ShapeMismatchError, UndefinedMetricError
from dgmnet.gmamba import CascadeConfig


def test_miou_examples():
    gt = np.array([[0, 0], [1, 1]])
    assert metrics.miou(gt, gt, 2)[0] == 1.0
    assert metrics.miou(1 - gt, gt, 2)[0] == 0.0
    value, per_class = metrics.miou(np.array([[0, 1], [1, 1]]), gt, 2)
    np.testing.assert_allclose(per_class, [1 / 2, 2 / 3], rtol=1e-15)
    assert value == pytest.approx(7 / 12, abs=1e-15)


def test_absent_class_excluded():
    gt = np.array([[0, 2], [2, 2]])
    value, per_class = metrics.miou(gt, gt, 3)
    assert np.isnan(per_class[1]) and value == 1.0


def test_ignore_label_and_errors():
    gt = np.array([[0, 9], [1, 1]])
    pred = np.array([[0, 0], [1, 1]])
    assert metrics.miou(pred, gt, 2, ignore_label=9)[0] == 1.0
    cm = metrics.confusion_matrix(pred, gt, 2, ignore_label=9)
    assert cm.sum() == 3
    with pytest.raises(UndefinedMetricError):
        metrics.miou(np.full((2, 2), 9), np.full((2, 2), 9), 2, ignore_label=9)
    with pytest.raises(ShapeMismatchError):
        metrics.miou(pred, gt[:1], 2)
    with pytest.raises(ValueError):
        metrics.miou(pred, gt, 2)


@given(arrays(np.int64, (4, 5), elements=st.integers(0, 3)),
       arrays(np.int64, (4, 5), elements=st.integers(0, 3)), st.permutations(range(4)))
def test_miou_permutation_invariant(pred, gt, perm):
    perm = np.array(perm)
    a = metrics.miou(pred, gt, 4)[0]
    b = metrics.miou(perm[pred], perm[gt], 4)[0]
    assert a == pytest.approx(b, abs=1e-15)
    assert metrics.confusion_matrix(pred, gt, 4).sum() == pred.size


@pytest.fixture(scope="module")
def small_config():
    return CascadeConfig.init(4, 2, seed=0)


def test_scan_cost_ratios(small_config):
    reports = metrics.measure_scan_cost(small_config, [(16, 16), (16, 32), (32, 32)], repeats=1)
    assert [r.pixels for r in reports] == [256, 512, 1024]
    assert reports[1].madds == 2 * reports[0].madds
    assert reports[2].madds == 4 * reports[0].madds
    again = metrics.measure_scan_cost(small_config, [(16, 16)], repeats=1)
    assert len(again) == 1 and again[0].madds == reports[0].madds


def test_scan_cost_needs_sizes(small_config):
    with pytest.raises(ValueError):
        metrics.measure_scan_cost(small_config, [])


def test_scan_cost_needs_repeats(small_config):
    with pytest.raises(ValueError):
        metrics.measure_scan_cost(small_config, [(8, 8)], repeats=0)
