import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from igvlab import tensor as T
from igvlab.errors import ContractError
from igvlab.objective import (
    VARIANTS, loss_causal, loss_complement, loss_intervened, total_loss,
)
from igvlab.tensor import Tape, Tensor


def entropy(z):
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    return -(p * np.log(p)).sum(axis=-1)


def test_causal_loss_values():
    assert loss_causal(np.array([30.0, -30.0, -30.0, -30.0]), 0).item() < 1e-12
    assert_allclose(loss_causal(np.zeros(4), 2).item(), math.log(4))
    rng = np.random.default_rng(0)
    z, y = rng.standard_normal((5, 4)), rng.integers(4, size=5)
    assert loss_causal(z, y).data.tobytes() == T.cross_entropy(z, y).data.tobytes()


def test_complement_loss_is_entropy_gap():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((1000, 4)) * 3
    assert_allclose(loss_complement(Tensor(z)).data, math.log(4) - entropy(z), atol=1e-10)
    assert abs(loss_complement(Tensor(np.zeros(4))).item()) < 1e-15
    assert_allclose(loss_complement(Tensor([60.0, 0, 0, 0])).item(), math.log(4), atol=1e-12)


def test_intervened_loss_delegates_and_detaches():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal(4), rng.standard_normal(4)
    e = np.exp(b - b.max())
    p = e / e.sum()
    assert loss_intervened(Tensor(a), Tensor(b)).item() == T.kl_divergence(a, p).item()
    assert abs(loss_intervened(Tensor(a), Tensor(a)).item()) < 1e-15

    va = Tensor(a, requires_grad=True)
    vb = Tensor(b, requires_grad=True)
    with Tape() as tape:
        grads = tape.backward(loss_intervened(va, vb))
    assert vb.node not in grads
    assert np.abs(grads[va.node]).max() > 0


def test_total_loss_arithmetic_and_variants():
    lc, lt, lv = Tensor(1.0, True), Tensor(0.5, True), Tensor(0.25, True)
    with Tape():
        assert_allclose(total_loss(lc, lt, lv, 0.8, 0.8, "c+t").total.item(), 1.4)
        full = total_loss(lc, lt, lv, 0.0, 0.0, "full")
        assert full.total.item() == 1.0
        assert full.loss_t == 0.5 and full.loss_v == 0.25
        c_only = total_loss(lc, lt, lv, 1.0, 1.0, "c-only")
        assert c_only.loss_t is None and c_only.loss_v is None
        assert total_loss(lc, lt, lv, 1.0, 1.0, "c+v").loss_t is None
    with pytest.raises(ContractError):
        total_loss(lc, lt, lv, 1.0, 1.0, "bogus")
    with pytest.raises(ContractError):
        total_loss(lc, lt, lv, -1.0, 1.0, "full")
    assert set(VARIANTS) == {"erm-baseline", "c-only", "c+t", "c+v", "full"}


def test_total_loss_is_linear_in_the_weights():
    rng = np.random.default_rng(3)
    for _ in range(100):
        lc, lt, lv = (Tensor(float(x)) for x in rng.random(3) * 3)
        l1, l2, h = rng.random(2).tolist() + [0.37]
        base = total_loss(lc, lt, lv, l1, l2, "full").total.item()
        d1 = total_loss(lc, lt, lv, l1 + h, l2, "full").total.item() - base
        d2 = total_loss(lc, lt, lv, l1, l2 + h, "full").total.item() - base
        assert_allclose(d1 / h, lt.item(), atol=1e-12)
        assert_allclose(d2 / h, lv.item(), atol=1e-12)
