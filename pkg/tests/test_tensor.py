import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from igvlab import tensor as T
from igvlab.blocks import LSTM
from igvlab.errors import ContractError, NumericError
from igvlab.optim import AdamState, PlateauHalving, adam_step
from igvlab.tensor import Tape, Tensor

from gradcheck import ALL_CASES, TOLERANCE, check, run_case

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("name", sorted(ALL_CASES))
def test_gradients_match_finite_differences(name):
    assert run_case(name) < TOLERANCE


def test_checker_catches_a_wrong_gradient():
    def bad_square(a):
        a = T.as_tensor(a)
        return T._emit("multiply", (a,), a.data ** 2, lambda g: (g * a.data,))  # missing 2x

    rng = np.random.default_rng(0)
    assert check([rng.standard_normal(4)], bad_square, rng) > 0.1


def test_trivial_forward_values():
    assert_allclose(T.softmax([0.0, 0.0]).data, [0.5, 0.5])
    assert_array_equal(T.matmul(np.eye(2), [[3.0, 4.0], [5.0, 6.0]]).data, [[3, 4], [5, 6]])
    assert T.sigmoid(0.0).item() == 0.5
    assert T.tanh(0.0).item() == 0.0


def test_trivial_backward_values():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum(x))
    assert_array_equal(x.grad, [1, 1, 1])
    y = Tensor(0.0, requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sigmoid(y))
    assert y.grad == 0.25


def test_backward_contract_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = T.scale(x, 2.0)
        with pytest.raises(ContractError):
            tape.backward(out)
        with pytest.raises(ContractError, match="detached"):
            tape.backward(Tensor(1.0))


def test_shape_mismatch_names_the_kind():
    with pytest.raises(ContractError, match="matmul"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ContractError, match="concat"):
        T.concat([np.ones((2, 3)), np.ones((2, 4))], axis=0)


def test_non_finite_values_raise():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError) as err, np.errstate(over="ignore"):
        T.scale(np.array([1e308]), 10.0)
    assert err.value.kind == "scale"


def test_straight_through_forwards_hard_and_passes_gradient():
    soft = Tensor([[0.3, 0.7]], requires_grad=True)
    upstream = np.array([[2.0, -1.0]])
    with Tape() as tape:
        out = T.straight_through(soft, [[0.0, 1.0]])
        tape.backward(T.sum(T.multiply(out, upstream)))
    assert_array_equal(out.data, [[0, 1]])
    assert_array_equal(soft.grad, upstream)


def test_gradient_linearity():
    rng = np.random.default_rng(3)
    x0, w = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))

    def grad_of(build):
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            tape.backward(build(x))
        return x.grad

    f = lambda x: T.sum(T.tanh(T.matmul(x, w)))
    g = lambda x: T.mean(T.softmax(x))
    assert_allclose(grad_of(lambda x: T.add(f(x), g(x))), grad_of(f) + grad_of(g), atol=1e-14)


def test_tape_is_cleared_and_records_in_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = T.tanh(T.scale(x, 3.0))
        assert [kind for kind, *_ in tape.entries] == ["scale", "tanh"]
        tape.backward(T.sum(y))
    assert len(tape) == 0


def test_forward_determinism():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((3, 5)), rng.standard_normal((5, 5))
    a = T.log_softmax(T.matmul(x, w)).data
    b = T.log_softmax(T.matmul(x, w)).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_are_distributions(x):
    s = T.softmax(x).data
    assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
    if s.shape[-1] > 1:
        assert ((s > 0) & (s < 1)).all()


def test_cross_entropy_values():
    assert_allclose(T.cross_entropy([0.0, 0.0], 0).item(), math.log(2))
    assert T.cross_entropy([30.0, -30.0], 0).item() < 1e-12
    rng = np.random.default_rng(7)
    for _ in range(50):
        z = rng.standard_normal(5) * 3
        label = int(rng.integers(5))
        p = np.exp(z) / np.exp(z).sum()
        assert_allclose(T.cross_entropy(z, label).item(), -np.log(p[label]), atol=1e-6)
    with pytest.raises(ContractError):
        T.cross_entropy([0.0, 1.0], 2)


def test_kl_divergence_values():
    assert T.kl_divergence([0.0, 0.0], [0.5, 0.5]).item() == 0.0
    kl = T.kl_divergence(np.log([0.8, 0.2]), [0.5, 0.5]).item()
    assert_allclose(kl, 0.19274, atol=5e-6)
    assert_allclose(kl, 0.8 * math.log(1.6) + 0.2 * math.log(0.4), atol=1e-12)
    rng = np.random.default_rng(11)
    z = rng.standard_normal((1000, 4)) * 3
    q = rng.dirichlet(np.ones(4), size=1000)
    assert (T.kl_divergence(z, q).data >= -1e-12).all()
    # zero target entries are floored, never infinite
    assert np.isfinite(T.kl_divergence([0.0, 0.0], [1.0, 0.0]).item())
    with pytest.raises(ContractError):
        T.kl_divergence([0.0, 0.0], [0.7, 0.7])


def test_fused_lstm_matches_stepwise_composition():
    rng = np.random.default_rng(2)
    cell = LSTM(3, 5, rng)
    x = rng.standard_normal((4, 6, 3))
    mask = rng.random((4, 6)) < 0.6
    fused_g, fused_l = cell.encode(x, mask)
    step_g, step_l = cell.encode_stepwise(x, mask)
    assert_allclose(fused_l.data, step_l.data, atol=1e-14)
    assert_allclose(fused_g.data, step_g.data, atol=1e-14)

    grads = []
    for encode in (cell.encode, cell.encode_stepwise):
        with Tape() as tape:
            _, local = encode(x, mask)
            g = tape.backward(T.sum(T.multiply(local, np.cos(local.data))))
        grads.append([g[p.node] for p in (cell.w_input, cell.w_hidden, cell.bias)])
    for a, b in zip(*grads):
        assert_allclose(a, b, atol=1e-12)


def test_adam_three_constant_steps_follow_the_recurrence():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState()
    expected, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        adam_step({"p": p}, {"p": np.array([1.0])}, state, 0.1)
        m = 0.9 * m + 0.1
        v = 0.999 * v + 0.001
        expected -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(p.data[0] - expected) < 1e-10
    assert state.step == 3


def test_adam_edge_cases():
    p = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    adam_step({"p": p}, {"p": np.array([5.0, -3.0])}, AdamState(), 0.01)
    assert_allclose(p.data, [2.0 - 0.01, -1.0 + 0.01], atol=1e-8)
    q = Tensor(np.array([2.0]), requires_grad=True)
    adam_step({"q": q}, {"q": np.zeros(1)}, AdamState(), 0.1)
    assert q.data[0] == 2.0
    with pytest.raises(ContractError):
        adam_step({"q": q}, {"q": np.zeros(3)}, AdamState(), 0.1)


def test_plateau_halving_waits_for_patience():
    rule = PlateauHalving(1e-3, patience=5)
    rule.update(0.5)
    for _ in range(4):
        assert not rule.update(0.4)
    assert rule.update(0.5)
    assert rule.lr == 5e-4
    rule.update(0.9)
    assert rule.lr == 5e-4
