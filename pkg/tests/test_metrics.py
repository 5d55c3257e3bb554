"""Confusion-matrix metrics against hand-computed oracles."""

import numpy as np
import pytest

from wavecontrast.metrics import cohen_kappa, confusion_matrix, per_class_f1, weighted_f1

HAND_CM = np.array([[5, 1], [2, 4]])


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 2, 0])
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 2]]
    assert cm.sum() == 6


def test_confusion_matrix_fixed_width():
    cm = confusion_matrix([0, 1], [1, 0], n_classes=4)
    assert cm.shape == (4, 4)
    assert cm.sum() == 2
    with pytest.raises(ValueError):
        confusion_matrix([0, 3], [0, 0], n_classes=2)


def test_confusion_matrix_validation():
    with pytest.raises(ValueError):
        confusion_matrix([], [])
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0])
    with pytest.raises(ValueError):
        confusion_matrix([0, -1], [0, 0])


def test_weighted_f1_hand_case():
    # per-class F1 = 10/13 and 8/11, supports 6 and 6.
    expected = (6 * 10 / 13 + 6 * 8 / 11) / 12
    assert abs(weighted_f1(HAND_CM) - expected) < 1e-12
    assert abs(weighted_f1(HAND_CM) - 0.7482517482517482) < 1e-9


def test_per_class_f1_hand_case():
    f1 = per_class_f1(HAND_CM)
    assert np.allclose(f1, [10 / 13, 8 / 11], rtol=0, atol=1e-12)


def test_weighted_f1_perfect_diagonal():
    assert weighted_f1(np.diag([3, 9, 1])) == 1.0


def test_weighted_f1_single_column_collapse():
    # All predictions land on class 0 against balanced binary truth.
    cm = np.array([[5, 0], [5, 0]])
    assert abs(weighted_f1(cm) - 1 / 3) < 1e-12


def test_weighted_f1_excludes_zero_support():
    # Third row empty: metric must equal the two-class computation.
    padded = np.zeros((3, 3), dtype=int)
    padded[:2, :2] = HAND_CM
    assert abs(weighted_f1(padded) - weighted_f1(HAND_CM)) < 1e-12


def test_weighted_f1_zero_over_zero_class_scores_zero():
    # Class 1 has support but zero tp and zero predicted positives.
    cm = np.array([[4, 0, 0], [0, 0, 2], [0, 0, 3]])
    f1 = per_class_f1(cm)
    assert f1[1] == 0.0
    assert 0.0 <= weighted_f1(cm) <= 1.0


def test_kappa_hand_case():
    assert abs(cohen_kappa(HAND_CM) - 0.5) < 1e-9


def test_kappa_perfect_and_chance():
    assert cohen_kappa(np.diag([4, 4])) == 1.0
    # Predictions independent of truth: uniform 2x2 block.
    assert abs(cohen_kappa(np.full((2, 2), 25))) < 1e-12


def test_kappa_degenerate_agreement_pins_zero():
    # Single supported class predicted perfectly: p_e = 1, pinned to 0.
    assert cohen_kappa(np.array([[7]])) == 0.0
    assert cohen_kappa(np.array([[7, 0], [0, 0]])) == 0.0


def test_kappa_can_be_negative():
    cm = np.array([[0, 5], [5, 0]])
    assert cohen_kappa(cm) < 0.0


def test_metric_bounds_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(2, 6))
        cm = rng.integers(0, 20, (k, k))
        cm[0, 0] += 1  # keep the total positive
        f1 = weighted_f1(cm)
        kappa = cohen_kappa(cm)
        assert 0.0 <= f1 <= 1.0
        assert kappa <= 1.0 + 1e-12


def test_perfect_scores_iff_diagonal():
    rng = np.random.default_rng(1)
    for _ in range(30):
        k = int(rng.integers(2, 5))
        diag = rng.integers(1, 10, k)
        cm = np.diag(diag)
        assert weighted_f1(cm) == 1.0
        assert cohen_kappa(cm) == 1.0
        off = cm.copy()
        off[0, 1] += 1
        assert weighted_f1(off) < 1.0
        assert cohen_kappa(off) < 1.0


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    y_true = rng.integers(0, 4, 200)
    y_pred = rng.integers(0, 4, 200)
    base_cm = confusion_matrix(y_true, y_pred, n_classes=4)
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(4)
        cm = confusion_matrix(perm[y_true], perm[y_pred], n_classes=4)
        assert abs(weighted_f1(cm) - weighted_f1(base_cm)) < 1e-12
        assert abs(cohen_kappa(cm) - cohen_kappa(base_cm)) < 1e-12


def test_metric_validation():
    with pytest.raises(ValueError):
        weighted_f1(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        cohen_kappa(np.zeros((0, 0)))
    with pytest.raises(ValueError):
        weighted_f1(np.array([[1, 2, 3], [4, 5, 6]]))
    with pytest.raises(ValueError):
        cohen_kappa(np.array([[1, -1], [0, 2]]))
