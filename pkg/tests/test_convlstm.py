import numpy as np
import pytest

from sanet.convlstm import GATES, CellState, ConvLSTMCell, run_sequence, step, zero_cell
from sanet.tensor import SeededRng, ShapeError, Tape, Tensor, sum_all
from sanet.verification import fclstm_reference


def random_input(rng, shape):
    return Tensor(rng.normal(shape))


def test_zero_cell_gives_half_gates_and_zero_state():
    cell = zero_cell(3, 4, kernel_size=3, dilation=2)
    x = random_input(SeededRng(0), (2, 3, 5, 5))
    state = step(cell, x, CellState.zeros((2, 4, 5, 5)))
    assert np.array_equal(state.c.data, np.zeros((2, 4, 5, 5)))
    assert np.array_equal(state.h.data, np.zeros((2, 4, 5, 5)))


def test_saturated_forget_gate_carries_cell_state():
    cell = zero_cell(2, 3)
    cell.b_f.data[:] = 20.0
    rng = SeededRng(1)
    c_prev = rng.normal((1, 3, 2, 2))
    prev = CellState(Tensor(rng.normal((1, 3, 2, 2))), Tensor(c_prev))
    state = step(cell, random_input(rng, (1, 2, 2, 2)), prev)
    f = 1.0 / (1.0 + np.exp(-20.0))
    assert np.allclose(state.c.data, f * c_prev, rtol=0, atol=1e-15)
    assert np.allclose(state.c.data, c_prev, rtol=1e-8)
    assert np.allclose(state.h.data, 0.5 * np.tanh(state.c.data), rtol=0, atol=1e-15)


def test_unit_kernel_cell_matches_fc_lstm():
    rng = SeededRng(2)
    cell = ConvLSTMCell.create(3, 4, rng, kernel_size=1, dilation=1)
    for g in GATES:
        getattr(cell, f"b_{g}").data[:] = rng.normal((4,))
    xs = [rng.normal((2, 3)) for _ in range(10)]
    hs = run_sequence(cell, [Tensor(x[:, :, None, None]) for x in xs])
    weights = {k: v.data[:, :, 0, 0] if v.data.ndim == 4 else v.data for k, v in cell.parameters().items()}
    ref = fclstm_reference(weights, xs)
    worst = max(np.max(np.abs(h.data[:, :, 0, 0] - r)) for h, r in zip(hs, ref))
    assert worst <= 1e-12


def test_sequence_equals_manual_steps_from_zero_state():
    rng = SeededRng(3)
    cell = ConvLSTMCell.create(2, 3, rng)
    xs = [random_input(rng, (1, 2, 6, 6)) for _ in range(3)]
    states = run_sequence(cell, xs, return_states=True)
    state = CellState.zeros((1, 3, 6, 6))
    for x, expected in zip(xs, states):
        state = step(cell, x, state)
        assert np.array_equal(state.h.data, expected.h.data)
        assert np.array_equal(state.c.data, expected.c.data)


def test_single_element_sequence_is_one_step():
    rng = SeededRng(4)
    cell = ConvLSTMCell.create(2, 2, rng)
    x = random_input(rng, (1, 2, 4, 4))
    (h,) = run_sequence(cell, [x])
    assert np.array_equal(h.data, step(cell, x, CellState.zeros((1, 2, 4, 4))).h.data)


def test_zero_inputs_zero_biases_keep_hidden_zero():
    cell = ConvLSTMCell.create(2, 3, SeededRng(5))
    hs = run_sequence(cell, [Tensor(np.zeros((1, 2, 4, 4))) for _ in range(4)])
    assert all(np.array_equal(h.data, np.zeros((1, 3, 4, 4))) for h in hs)


@pytest.mark.parametrize("k,d", [(1, 1), (3, 1), (3, 2), (5, 3)])
def test_spatial_extents_preserved(k, d):
    cell = ConvLSTMCell.create(2, 3, SeededRng(6), kernel_size=k, dilation=d)
    hs = run_sequence(cell, [random_input(SeededRng(7), (2, 2, 7, 5)) for _ in range(2)])
    assert all(h.shape == (2, 3, 7, 5) for h in hs)


def test_gate_and_hidden_ranges():
    rng = SeededRng(8)
    cell = ConvLSTMCell.create(2, 3, rng)
    states = run_sequence(cell, [Tensor(rng.normal((1, 2, 5, 5), 10.0)) for _ in range(5)], return_states=True)
    for s in states:
        assert np.all(np.abs(s.h.data) < 1.0)


def test_shape_and_argument_errors():
    cell = ConvLSTMCell.create(2, 3, SeededRng(9))
    with pytest.raises(ValueError):
        run_sequence(cell, [])
    with pytest.raises(ShapeError):
        run_sequence(cell, [Tensor(np.zeros((1, 4, 3, 3)))])
    with pytest.raises(ShapeError):
        step(cell, Tensor(np.zeros((1, 2, 3, 3))), CellState.zeros((1, 3, 4, 4)))
    with pytest.raises(ValueError):
        ConvLSTMCell.create(2, 3, SeededRng(0), kernel_size=2)


def test_gradient_reaches_every_kernel_and_bias():
    rng = SeededRng(10)
    cell = ConvLSTMCell.create(2, 3, rng)
    xs = [random_input(rng, (1, 2, 5, 5)) for _ in range(4)]
    with Tape() as tape:
        loss = sum_all(run_sequence(cell, xs)[-1])
    tape.backward(loss)
    for name, p in cell.parameters().items():
        assert p.grad is not None and np.any(p.grad != 0), name


def test_order_permutation_keeps_shapes_and_ranges():
    rng = SeededRng(11)
    cell = ConvLSTMCell.create(2, 3, rng)
    xs = [random_input(rng, (1, 2, 4, 4)) for _ in range(3)]
    fwd = run_sequence(cell, xs)
    rev = run_sequence(cell, xs[::-1])
    for a, b in zip(fwd, rev):
        assert a.shape == b.shape
        assert np.all(np.abs(b.data) < 1)
