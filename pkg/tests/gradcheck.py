"""Central finite-difference checker and the case table for every differentiable op.

Each case builder takes an rng and returns ``(arrays, fn)``: the arrays are the
differentiated inputs and ``fn`` maps the matching tensors to an output tensor.
The scalar under test is ``sum(fn(...) * R)`` for a fixed random R, so every
output entry contributes.
"""

import numpy as np

from igvlab import tensor as T
from igvlab.blocks import LSTM, MLP, BilinearFusion, attention_pool, gcn_layer
from igvlab.grounding import GroundingHead, log_clip_scores
from igvlab.objective import loss_causal, loss_complement, loss_intervened
from igvlab.tensor import Tape, Tensor

EPS = 1e-5
TOLERANCE = 1e-4
INSTANCES = 20


def relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def check(arrays, fn, rng, eps=EPS):
    """Max relative error between tape gradients and central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe_shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(probe_shape)

    def scalar(values):
        return float((fn(*[Tensor(v) for v in values]).data * weights).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        tape.backward(T.sum(T.multiply(out, weights)))
    worst = 0.0
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            up = [v.copy() for v in arrays]
            down = [v.copy() for v in arrays]
            up[i][idx] += eps
            down[i][idx] -= eps
            numeric[idx] = (scalar(up) - scalar(down)) / (2 * eps)
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.2, x)


def _primitives():
    def matmul(rng):
        if rng.random() < 0.5:
            return [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], T.matmul
        return [rng.standard_normal((2, 3, 4)), rng.standard_normal((4,))], T.matmul

    def binary(op):
        def build(rng):
            shape_b = (4,) if rng.random() < 0.5 else (3, 4)
            return [rng.standard_normal((3, 4)), rng.standard_normal(shape_b)], op
        return build

    def unary(op, sampler=None):
        def build(rng):
            x = (sampler or (lambda r, s: r.standard_normal(s)))(rng, (3, 4))
            return [x], op
        return build

    def scale(rng):
        c = float(rng.standard_normal())
        return [rng.standard_normal((3, 4))], lambda a: T.scale(a, c)

    def concat(rng):
        axis = int(rng.integers(2))
        shape_b = (2, 4) if axis == 0 else (3, 2)
        return [rng.standard_normal((3, 4)), rng.standard_normal(shape_b)], \
            lambda a, b: T.concat([a, b], axis=axis)

    def reduction(op):
        def build(rng):
            axis = [None, 0, 1][int(rng.integers(3))]
            keep = bool(rng.integers(2))
            return [rng.standard_normal((3, 4))], lambda a: op(a, axis=axis, keepdims=keep)
        return build

    def softmax_like(op):
        def build(rng):
            axis = int(rng.integers(2)) - 2
            return [2 * rng.standard_normal((3, 4))], lambda a: op(a, axis=axis)
        return build

    def select_rows(rng):
        mask = rng.random(5) < 0.6
        mask[int(rng.integers(5))] = True
        return [rng.standard_normal((5, 3))], lambda a: T.select_rows(a, mask)

    def slice_(rng):
        if rng.random() < 0.5:
            return [rng.standard_normal((4, 5))], lambda a: a[1:3, ::2]
        index = rng.integers(4, size=6)
        return [rng.standard_normal((4, 5))], lambda a: a[index]

    def reshape(rng):
        return [rng.standard_normal((3, 4))], lambda a: T.reshape(a, (2, 6))

    def stack(rng):
        axis = int(rng.integers(3))
        return [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], \
            lambda a, b: T.stack([a, b], axis=axis)

    def lstm(rng):
        b, length, n_in, d = 2, 3, 3, 2
        mask = rng.random((b, length)) < 0.7
        return [rng.standard_normal((b, length, n_in)), 0.7 * rng.standard_normal((n_in, 4 * d)),
                0.7 * rng.standard_normal((d, 4 * d)), 0.3 * rng.standard_normal(4 * d)], \
            lambda x, wi, wh, bias: T.lstm_sequence(x, wi, wh, bias, mask)

    def cross_entropy(rng):
        label = rng.integers(4, size=3)
        return [2 * rng.standard_normal((3, 4))], lambda a: T.cross_entropy(a, label)

    def kl(rng):
        q = rng.dirichlet(np.ones(4), size=3)
        return [2 * rng.standard_normal((3, 4))], lambda a: T.kl_divergence(a, q)

    return {
        "matmul": matmul, "add": binary(T.add), "subtract": binary(T.subtract),
        "multiply": binary(T.multiply), "scale": scale, "concat": concat,
        "transpose": unary(T.transpose), "softmax": softmax_like(T.softmax),
        "log_softmax": softmax_like(T.log_softmax), "sigmoid": unary(T.sigmoid),
        "tanh": unary(T.tanh), "relu": unary(T.relu, _away_from_zero),
        "sum": reduction(T.sum), "mean": reduction(T.mean), "select_rows": select_rows,
        "slice": slice_, "reshape": reshape, "stack": stack, "lstm": lstm,
        "cross_entropy": cross_entropy, "kl_divergence": kl,
    }


def _composites():
    def lstm_step(rng):
        cell = LSTM(3, 4, rng)
        length = 1 if rng.random() < 0.5 else 3
        return [rng.standard_normal((length, 3)), cell.w_input.data, cell.w_hidden.data], \
            lambda x, wi, wh: _with(cell, w_input=wi, w_hidden=wh).encode_stepwise(x)[1]

    def gcn(rng):
        return [_away_from_zero(rng, (3, 4)), rng.standard_normal((3, 3)),
                rng.standard_normal((4, 4))], gcn_layer

    def pool(rng):
        return [rng.standard_normal((4, 3)), rng.standard_normal(3)], attention_pool

    def fusion(rng):
        block = BilinearFusion(4, 3, 5, 2, 3, rng)
        return [rng.standard_normal(4), rng.standard_normal(3), block.proj_a.data,
                block.out.data], \
            lambda a, b, pa, out: _with(block, proj_a=pa, out=out)(a, b)

    def scoring(rng):
        head = GroundingHead(4, 3, rng)
        first = head.causal_clip.layers[0]
        return [rng.standard_normal((5, 4)), rng.standard_normal(4), first.weight.data], \
            lambda v, q, w: T.concat(log_clip_scores(v, q, _with_layer(head, first, w)), axis=0)

    def mlp(rng):
        net = MLP([3, 4, 2], rng, ["tanh", None])
        return [rng.standard_normal((2, 3))], net

    def l_causal(rng):
        answer = rng.integers(4, size=3)
        return [2 * rng.standard_normal((3, 4))], lambda z: loss_causal(z, answer)

    def l_complement(rng):
        return [2 * rng.standard_normal((3, 4))], loss_complement

    def l_intervened(rng):
        target = rng.standard_normal((3, 4))
        return [2 * rng.standard_normal((3, 4))], lambda z: loss_intervened(z, target)

    return {
        "lstm_step": lstm_step, "gcn_layer": gcn, "attention_pool": pool,
        "bilinear_fusion": fusion, "clip_scoring": scoring, "mlp": mlp,
        "loss_causal": l_causal, "loss_complement": l_complement,
        "loss_intervened": l_intervened,
    }


def _with(module, **tensors):
    """Shallow copy of ``module`` with some parameters replaced by the given tensors."""
    clone = object.__new__(type(module))
    clone.__dict__.update(module.__dict__)
    clone.__dict__.update(tensors)
    return clone


def _with_layer(head, layer, weight):
    clip = _with(head.causal_clip, layers=[_with(layer, weight=weight)]
                 + head.causal_clip.layers[1:])
    return _with(head, causal_clip=clip)


PRIMITIVE_CASES = _primitives()
COMPOSITE_CASES = _composites()
ALL_CASES = {**PRIMITIVE_CASES, **COMPOSITE_CASES}


def run_case(name, seed=0, instances=INSTANCES):
    """Worst relative error of case ``name`` over ``instances`` random draws."""
    rng = np.random.default_rng([seed, sorted(ALL_CASES).index(name)])
    worst = 0.0
    for _ in range(instances):
        arrays, fn = ALL_CASES[name](rng)
        worst = max(worst, check(arrays, fn, rng))
    return worst
