import numpy as np
import pytest

from oracles import oracle_metrics

from cocodistill.metrics import ConfusionMatrix, MetricError, accumulate, accuracy, miou, predict_mask


def _cm(counts):
    return ConfusionMatrix(len(counts), counts)


def test_hand_built_masks():
    true = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    pred = np.array([0, 0, 0, 1, 1, 1, 1, 0])
    cm = accumulate(ConfusionMatrix(2), pred, true)
    assert cm.counts.tolist() == [[3, 1], [1, 3]]
    assert accuracy(cm) == 0.75
    assert miou(cm) == pytest.approx(0.6, abs=1e-15)


def test_perfect_and_empty(rng):
    m = rng.integers(0, 3, size=(5, 5))
    cm = accumulate(ConfusionMatrix(3), m, m)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    assert accuracy(cm) == 1.0 and miou(cm) == 1.0
    before = cm.counts.copy()
    accumulate(cm, np.zeros((0,), int), np.zeros((0,), int))
    assert np.array_equal(cm.counts, before)


def test_zero_diagonal_and_absent_class():
    assert accuracy(_cm([[0, 2], [5, 0]])) == 0.0
    # class 2 never appears in truth or prediction: contributes 0 to the mean
    assert miou(_cm([[4, 0, 0], [0, 4, 0], [0, 0, 0]])) == pytest.approx(2 / 3)


def test_errors():
    with pytest.raises(MetricError):
        accuracy(ConfusionMatrix(2))
    with pytest.raises(MetricError):
        accumulate(ConfusionMatrix(2), np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(MetricError):
        accumulate(ConfusionMatrix(2), np.array([0]), np.array([0, 1]))


def test_oracle_sweep(rng):
    for _ in range(200):
        k = int(rng.integers(2, 5))
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        pred, true = rng.integers(0, k, shape), rng.integers(0, k, shape)
        cm = accumulate(ConfusionMatrix(k), pred, true)
        acc, mi = oracle_metrics(pred, true, k)
        assert abs(accuracy(cm) - acc) < 1e-10 and abs(miou(cm) - mi) < 1e-10


def test_merge_and_predict(rng):
    a, b = _cm([[1, 2], [3, 4]]), _cm([[5, 0], [0, 1]])
    assert a.merge(b).counts.tolist() == [[6, 2], [3, 5]]
    probs = np.array([[[0.2, 0.5]], [[0.8, 0.5]]])
    assert predict_mask(probs).tolist() == [[1, 0]]
