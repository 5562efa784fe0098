import math

import numpy as np
import pytest

from sanet.ops import softmax_channels
from sanet.tensor import SeededRng, ShapeError, Tensor, parameter
from sanet.training import (AdamWState, AugmentConfig, EmptyTargetWarning, adamw_step, augment, confusion_matrix,
                            cross_entropy, hflip, lovasz_softmax, metrics, multi_scale_infer, poly_lr, snap_extent)
from sanet.verification import lovasz_softmax_oracle


def probs_tensor(p):
    """(P, C) probabilities laid out as a (1, C, 1, P) map."""
    p = np.asarray(p, dtype=float)
    return Tensor(p.T[None, :, None, :])


# -- cross-entropy -----------------------------------------------------------------

def test_ce_uniform_logits_give_log_k():
    labels = SeededRng(0).integers(0, 5, size=(2, 3, 4))
    assert math.isclose(cross_entropy(Tensor(np.zeros((2, 5, 3, 4))), labels).item(), math.log(5), rel_tol=1e-14)


def test_ce_confident_correct_is_near_zero():
    labels = np.array([[[0, 1]]])
    logits = np.zeros((1, 2, 1, 2))
    logits[0, 0, 0, 0] = logits[0, 1, 0, 1] = 50.0
    assert cross_entropy(Tensor(logits), labels).item() < 1e-20


def test_ce_two_pixel_hand_case():
    # pixel 0: p(correct) = 1/(1+e), pixel 1 uniform over 2 classes
    logits = np.array([0.0, 0.0, 1.0, 0.0]).reshape(1, 2, 1, 2)
    labels = np.array([[[0, 1]]])
    expected = (math.log(1 + math.e) + math.log(2)) / 2
    assert math.isclose(cross_entropy(Tensor(logits), labels).item(), expected, rel_tol=1e-14)


def test_ce_ignores_pixels_and_warns_when_all_ignored():
    logits = SeededRng(1).normal((1, 3, 2, 2))
    labels = np.array([[[0, 255], [2, 255]]])
    full = cross_entropy(Tensor(logits[..., :1]), labels[..., :1]).item()
    assert math.isclose(cross_entropy(Tensor(logits), labels).item(), full, rel_tol=1e-14)
    with pytest.warns(EmptyTargetWarning):
        assert cross_entropy(Tensor(logits), np.full((1, 2, 2), 255)).item() == 0.0


def test_ce_label_errors():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 2, 1, 1))), np.array([[[2]]]))
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((1, 2, 1, 1))), np.array([[0]]))


# -- Lovasz-softmax ------------------------------------------------------------------

def test_lovasz_single_pixel():
    out = lovasz_softmax(probs_tensor([[0.6, 0.4]]), np.array([[[0]]])).item()
    assert math.isclose(out, 0.4, rel_tol=1e-14)


def test_lovasz_perfect_prediction_is_zero():
    labels = np.array([0, 2, 1, 1, 0])
    p = np.eye(3)[labels]
    assert lovasz_softmax(probs_tensor(p), labels[None, None]).item() == 0.0


def test_lovasz_hard_prediction_equals_one_minus_iou():
    rng = SeededRng(2)
    labels = rng.integers(0, 3, size=20)
    pred = rng.integers(0, 3, size=20)
    rep = metrics(pred, labels, 3)
    present = np.bincount(labels, minlength=3) > 0
    expected = float(np.mean(1.0 - rep.per_class_iou[present]))
    got = lovasz_softmax(probs_tensor(np.eye(3)[pred]), labels[None, None]).item()
    assert math.isclose(got, expected, rel_tol=0, abs_tol=1e-12)


def test_lovasz_matches_prefix_set_oracle_on_random_inputs():
    rng = SeededRng(3)
    for _ in range(50):
        n = int(rng.integers(1, 9))
        p = softmax_channels(Tensor(rng.normal((1, 4, 1, n)))).data[0, :, 0, :].T
        labels = rng.integers(0, 4, size=n)
        got = lovasz_softmax(probs_tensor(p), labels[None, None]).item()
        assert abs(got - lovasz_softmax_oracle(p, labels)) <= 1e-12


def test_lovasz_all_ignored_warns():
    with pytest.warns(EmptyTargetWarning):
        assert lovasz_softmax(probs_tensor([[0.5, 0.5]]), np.array([[[255]]])).item() == 0.0


# -- metrics ---------------------------------------------------------------------------

def test_binary_iou_hand_case():
    rep = metrics(np.array([1, 1, 1, 0]), np.array([1, 1, 0, 1]), 2)
    assert rep.per_class_iou[1] == 0.5
    assert rep.pixel_accuracy == 0.5


def test_identical_maps_give_unit_iou_and_disjoint_give_zero():
    labels = SeededRng(4).integers(0, 4, size=(3, 5, 5))
    rep = metrics(labels, labels, 4)
    assert rep.mean_iou == 1.0 and rep.pixel_accuracy == 1.0
    zero = metrics(np.zeros(6, int), np.ones(6, int), 2)
    assert zero.mean_iou == 0.0


def test_absent_classes_are_excluded_and_ignore_skipped():
    rep = metrics(np.array([0, 0, 1]), np.array([0, 0, 255]), 3)
    assert rep.present.tolist() == [True, False, False]
    assert rep.mean_iou == 1.0
    conf = confusion_matrix(np.array([2, 0]), np.array([0, 0]), 3)
    assert conf[0, 2] == 1 and conf[0, 0] == 1
    assert "class_id,iou" in rep.to_csv() and "2,nan" in rep.to_csv()


# -- AdamW -------------------------------------------------------------------------------

def test_zero_gradient_without_decay_is_fixed_point():
    x = SeededRng(5).normal((3, 2))
    p = {"w": parameter(x.copy())}
    state = AdamWState(weight_decay=0.0)
    for _ in range(5):
        adamw_step(p, {"w": np.zeros((3, 2))}, state, 1e-2)
    assert np.array_equal(p["w"].data, x)


def test_zero_gradient_with_decay_shrinks_exactly():
    x = SeededRng(6).normal((4,))
    p = {"w": parameter(x.copy())}
    adamw_step(p, {"w": np.zeros(4)}, AdamWState(weight_decay=0.1), 0.5)
    assert np.array_equal(p["w"].data, x * (1.0 - 0.5 * 0.1))


def test_first_step_moves_by_lr_against_gradient_sign():
    p = {"w": parameter(np.array([1.0, -2.0, 3.0]))}
    adamw_step(p, {"w": np.array([0.3, -5.0, 1e3])}, AdamWState(weight_decay=0.0), 1e-3)
    assert np.allclose(p["w"].data - [1.0, -2.0, 3.0], [-1e-3, 1e-3, -1e-3], rtol=1e-6, atol=0)


def adam_reference(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adamw_without_decay_is_adam():
    rng = SeededRng(7)
    x = rng.normal((5,))
    grads = [rng.normal((5,)) for _ in range(20)]
    p = {"w": parameter(x.copy())}
    state = AdamWState(weight_decay=0.0)
    for g in grads:
        adamw_step(p, {"w": g}, state, 3e-3)
    assert np.array_equal(p["w"].data, adam_reference(x, grads, 3e-3))


def test_adamw_errors():
    p = {"w": parameter(np.zeros(2))}
    with pytest.raises(ShapeError):
        adamw_step(p, {"w": np.zeros(3)}, AdamWState(), 1e-3)
    with pytest.raises(ValueError):
        adamw_step(p, {"w": np.zeros(2)}, AdamWState(), -1.0)


# -- poly schedule -------------------------------------------------------------------------

def test_poly_schedule_values():
    assert poly_lr(0, 100, 0.01) == 0.01
    assert poly_lr(100, 100, 0.01) == 0.0
    assert math.isclose(poly_lr(50, 100, 1.0), 0.5 ** 0.9, rel_tol=1e-15)
    assert round(poly_lr(50, 100, 1.0), 3) == 0.536
    with pytest.raises(ValueError):
        poly_lr(101, 100, 0.01)
    with pytest.raises(ValueError):
        poly_lr(0, 0, 0.01)


# -- augmentation ------------------------------------------------------------------------

def test_flip_is_involution():
    rng = SeededRng(8)
    img, lab = rng.uniform(0, 1, size=(3, 5, 7)), rng.integers(0, 4, size=(5, 7))
    i2, l2 = hflip(*hflip(img, lab))
    assert np.array_equal(i2, img) and np.array_equal(l2, lab)


def test_neutral_augmentation_is_identity():
    rng = SeededRng(9)
    img, lab = rng.uniform(0, 1, size=(3, 8, 8)), rng.integers(0, 4, size=(8, 8))
    cfg = AugmentConfig(flip_prob=0.0, scale_prob=0.0, contrast_prob=0.0)
    out_img, out_lab = augment(img, lab, cfg, SeededRng(10))
    assert np.array_equal(out_img, img) and np.array_equal(out_lab, lab)


def test_augmented_labels_stay_in_label_set():
    rng = SeededRng(11)
    img, lab = rng.uniform(0, 1, size=(3, 16, 16)), rng.integers(0, 4, size=(16, 16))
    cfg = AugmentConfig(flip_prob=1.0, scale_prob=1.0, contrast_prob=1.0)
    for k in range(10):
        out_img, out_lab = augment(img, lab, cfg, SeededRng(12, k))
        assert out_img.shape == img.shape and out_lab.shape == lab.shape
        assert set(np.unique(out_lab)) <= set(range(4)) | {255}


def test_augment_is_deterministic_per_seed():
    rng = SeededRng(13)
    img, lab = rng.uniform(0, 1, size=(3, 12, 12)), rng.integers(0, 3, size=(12, 12))
    a = augment(img, lab, AugmentConfig(), SeededRng(14))
    b = augment(img, lab, AugmentConfig(), SeededRng(14))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# -- multi-scale inference -------------------------------------------------------------

def toy_model(x):
    # class scores are fixed linear functions of the channel values
    w = np.array([[1.0, -1.0, 0.5], [0.0, 2.0, -1.0]])
    return Tensor(np.einsum("kc,nchw->nkhw", w, x.data))


def test_multi_scale_probabilities_sum_to_one():
    img = SeededRng(15).uniform(0, 1, size=(2, 3, 24, 16))
    probs = multi_scale_infer(toy_model, img)
    assert probs.shape == (2, 2, 24, 16)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) <= 1e-9


def test_single_unit_scale_equals_plain_softmax():
    img = SeededRng(16).uniform(0, 1, size=(1, 3, 16, 16))
    assert np.allclose(multi_scale_infer(toy_model, img, [1.0]), softmax_channels(toy_model(Tensor(img))).data,
                       rtol=0, atol=1e-15)


def test_snap_extent_and_scale_errors():
    assert snap_extent(64, 0.75, 8) == 48
    assert snap_extent(60, 1.25, 8) == 72
    assert snap_extent(4, 0.5, 8) == 8
    img = np.zeros((1, 3, 8, 8))
    with pytest.raises(ValueError):
        multi_scale_infer(toy_model, img, [])
    with pytest.raises(ValueError):
        multi_scale_infer(toy_model, img, [1.0, -0.5])
