import itertools

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sanet.aggregator import AggregatorConfig, aggregate
from sanet.convlstm import ConvLSTMCell, run_sequence
from sanet.head import PSPModule, psp_channels, psp_forward
from sanet.ops import adaptive_avg_pool, bilinear_resize, conv2d, group_norm, softmax_channels
from sanet.tensor import SeededRng, Tensor, relu, sigmoid, tanh
from sanet.training import AugmentConfig, augment, lovasz_softmax, metrics
from sanet.verification import conv_oracle, lovasz_softmax_oracle

import lovasz_grid

SETTINGS = settings(max_examples=40, deadline=None)
wide = st.floats(-1e4, 1e4, allow_nan=False)
seeds = st.integers(0, 2**31 - 1)


def maps(c=3, h=(1, 6), w=(1, 6), elements=wide):
    return st.tuples(st.integers(*h), st.integers(*w)).flatmap(
        lambda hw: arrays(np.float64, (2, c, hw[0], hw[1]), elements=elements))


# -- finiteness on large inputs ----------------------------------------------------------

@SETTINGS
@given(maps())
def test_ops_stay_finite_on_large_inputs(x):
    t = Tensor(x)
    outs = [relu(t), sigmoid(t), tanh(t), softmax_channels(t), bilinear_resize(t, 7, 3),
            adaptive_avg_pool(t, 1, 1), group_norm(t, 3, Tensor(np.ones(3)), Tensor(np.zeros(3))),
            conv2d(t, Tensor(np.full((2, 3, 1, 1), 0.5)))]
    assert all(np.all(np.isfinite(o.data)) for o in outs)
    assert np.allclose(softmax_channels(t).data.sum(axis=1), 1.0)


# -- convolution -------------------------------------------------------------------------

@SETTINGS
@given(seeds, st.sampled_from([1, 2]), st.integers(0, 2), st.sampled_from([1, 2]), st.sampled_from([1, 2]),
       st.sampled_from([1, 3]))
def test_conv_matches_oracle_on_random_grid(seed, stride, padding, dilation, groups, k):
    rng = SeededRng(seed)
    x = rng.normal((1, 2 * groups, 7, 6))
    kernel = rng.normal((2 * groups, 2, k, k))
    got = conv2d(Tensor(x), Tensor(kernel), None, stride, padding, dilation, groups).data
    assert np.max(np.abs(got - conv_oracle(x, kernel, None, stride, padding, dilation, groups))) <= 1e-12


@SETTINGS
@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linear_in_input(seed, a, b):
    rng = SeededRng(seed)
    x, y = rng.normal((1, 4, 6, 6)), rng.normal((1, 4, 6, 6))
    k = Tensor(rng.normal((2, 2, 3, 3)))
    lhs = conv2d(Tensor(a * x + b * y), k, padding=1, groups=2).data
    rhs = a * conv2d(Tensor(x), k, padding=1, groups=2).data + b * conv2d(Tensor(y), k, padding=1, groups=2).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


@SETTINGS
@given(st.floats(-100, 100), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9))
def test_resize_round_trip_keeps_constants(v, h, w, h2, w2):
    x = np.full((1, 1, h, w), v)
    back = bilinear_resize(bilinear_resize(Tensor(x), h2, w2), h, w).data
    assert np.max(np.abs(back - v)) <= 1e-9


# -- recurrent aggregation -----------------------------------------------------------------

@SETTINGS
@given(seeds, st.floats(0.1, 1e3))
def test_lstm_hidden_state_bounded(seed, amplitude):
    rng = SeededRng(seed)
    cell = ConvLSTMCell.create(2, 3, rng)
    states = run_sequence(cell, [Tensor(rng.normal((1, 2, 4, 4), amplitude)) for _ in range(3)], return_states=True)
    for s in states:
        assert np.all(np.abs(s.h.data) <= 1.0) and np.all(np.isfinite(s.c.data))


@SETTINGS
@given(seeds, st.integers(1, 5), st.integers(2, 6), st.integers(2, 6))
def test_aggregate_shape_and_range(seed, m, h, w):
    rng = SeededRng(seed)
    names = ["s0", "s1", "s2", "s3", "s4"][:m]
    channels = {n: 2 + i for i, n in enumerate(names)}
    cfg = AggregatorConfig.create(channels, (3, h, w), rng)
    taps = [Tensor(rng.normal((1, channels[n], 2 + 2 * i, 3 + i))) for i, n in enumerate(names)]
    y = aggregate(taps, cfg).data
    assert y.shape == (1, 3, h, w)
    assert np.all(np.abs(y) < 1)


@SETTINGS
@given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6)), min_size=1, max_size=5), st.integers(1, 4))
def test_psp_channel_formula_for_any_bins(bins, reduce):
    rng = SeededRng(0)
    psp = PSPModule.create(8, bins, reduce, rng)
    out = psp_forward(Tensor(rng.normal((1, 8, 6, 5))), psp)
    assert out.shape == (1, psp_channels(8, len(bins), reduce), 6, 5)


# -- losses and metrics ----------------------------------------------------------------------

def flat_probs(p):
    return Tensor(np.asarray(p, dtype=float).T[None, :, None, :])


label_lists = st.lists(st.integers(0, 2), min_size=1, max_size=12)


@SETTINGS
@given(seeds, label_lists)
def test_lovasz_invariant_to_pixel_order(seed, labels):
    rng = SeededRng(seed)
    labels = np.array(labels)
    p = softmax_channels(Tensor(rng.normal((1, 3, 1, len(labels))))).data[0, :, 0].T
    perm = rng.permutation(len(labels))
    a = lovasz_softmax(flat_probs(p), labels[None, None]).item()
    b = lovasz_softmax(flat_probs(p[perm]), labels[perm][None, None]).item()
    assert abs(a - b) <= 1e-12


@SETTINGS
@given(seeds, label_lists, st.permutations([0, 1, 2]))
def test_lovasz_invariant_to_class_relabeling(seed, labels, perm):
    rng = SeededRng(seed)
    labels = np.array(labels)
    p = softmax_channels(Tensor(rng.normal((1, 3, 1, len(labels))))).data[0, :, 0].T
    q = np.empty_like(p)
    q[:, perm] = p
    a = lovasz_softmax(flat_probs(p), labels[None, None]).item()
    b = lovasz_softmax(flat_probs(q), np.array(perm)[labels][None, None]).item()
    assert abs(a - b) <= 1e-12


@SETTINGS
@given(st.lists(st.integers(0, 2), min_size=1, max_size=16))
def test_lovasz_single_class_hard_is_one_minus_iou(pred):
    pred = np.array(pred)
    labels = np.zeros(len(pred), dtype=int)
    p = np.eye(3)[pred]
    expected = 1.0 - (pred == 0).sum() / len(pred)
    got = lovasz_softmax(flat_probs(p), labels[None, None]).item()
    assert abs(got - expected) <= 1e-12


@SETTINGS
@given(st.lists(st.booleans(), min_size=1, max_size=16), st.lists(st.booleans(), min_size=16, max_size=16))
def test_lovasz_binary_hard_is_mean_one_minus_iou(gt, pred):
    gt = np.array(gt)
    pred = np.array(pred[:len(gt)])
    labels = np.where(gt, 0, 1)
    p = np.stack([pred, ~pred, np.zeros_like(pred)], axis=1).astype(float)
    losses = []
    for g, q in ((gt, pred), (~gt, ~pred)):
        if g.any():
            losses.append(1.0 - (g & q).sum() / (g | q).sum())
    got = lovasz_softmax(flat_probs(p), labels[None, None]).item()
    assert abs(got - np.mean(losses)) <= 1e-12
    assert abs(got - lovasz_softmax_oracle(p, labels)) <= 1e-12


@SETTINGS
@given(seeds, st.permutations([0, 1, 2, 3]))
def test_mean_iou_equivariant_under_relabeling(seed, perm):
    rng = SeededRng(seed)
    labels, pred = rng.integers(0, 4, size=30), rng.integers(0, 4, size=30)
    perm = np.array(perm)
    a = metrics(pred, labels, 4)
    b = metrics(perm[pred], perm[labels], 4)
    assert abs(a.mean_iou - b.mean_iou) <= 1e-15  # summation order only
    assert np.array_equal(b.per_class_iou[perm], a.per_class_iou)
    assert 0.0 <= a.mean_iou <= 1.0 and 0.0 <= a.pixel_accuracy <= 1.0
    assert a.pixel_accuracy == np.trace(a.confusion) / a.confusion.sum()


@SETTINGS
@given(seeds)
def test_augmentation_keeps_label_multiset_up_to_padding(seed):
    rng = SeededRng(seed)
    img, lab = rng.random((3, 16, 16)), rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
    flip_only = AugmentConfig(flip_prob=1.0, scale_prob=0.0, contrast_prob=1.0)
    _, out = augment(img, lab, flip_only, rng.child(1))
    assert np.array_equal(np.bincount(out.ravel(), minlength=4), np.bincount(lab.ravel(), minlength=4))
    _, scaled = augment(img, lab, AugmentConfig(scale_prob=1.0), rng.child(2))
    assert set(np.unique(scaled)) <= set(np.unique(lab)) | {255}


# -- exhaustive enumeration helper ----------------------------------------------------------

def test_grid_orbits_cover_every_multiset_once():
    table = lovasz_grid._perm_table()
    for size in (1, 2, 3):
        rows = np.array(list(itertools.combinations_with_replacement(range(lovasz_grid.N_STATES), size)))
        orbit_min = np.min([lovasz_grid._codes(table[k][rows]) for k in range(len(lovasz_grid.PERMS))], axis=0)
        canon = np.concatenate([lovasz_grid._codes(r) for r in lovasz_grid.canonical_multisets(size)])
        assert len(canon) == len(set(canon.tolist()))
        assert set(canon.tolist()) == set(orbit_min.tolist())


def test_grid_states_are_distributions():
    assert lovasz_grid.N_STATES == 45
    assert np.allclose(lovasz_grid.GRID.sum(axis=1), 1.0)
    assert set(np.unique(lovasz_grid.GRID)) == {0.0, 0.25, 0.5, 0.75, 1.0}
