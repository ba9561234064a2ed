"""Parameterized building blocks: LSTM, MLP, Gumbel-Softmax, GCN, pooling, fusion."""

import math

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

MASK_BIAS = -1e9


class Module:
    """Container whose Tensor attributes with ``requires_grad`` are parameters.

    Sub-modules may be shared between owners; :meth:`named_parameters` yields
    each underlying tensor once, under the first name it is reached by.
    """

    def named_parameters(self, prefix="", _seen=None):
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            full = prefix + name
            if isinstance(value, Tensor):
                if value.requires_grad and value.node not in seen:
                    seen.add(value.node)
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.", seen)
                    elif isinstance(item, Tensor) and item.requires_grad and item.node not in seen:
                        seen.add(item.node)
                        yield f"{full}.{i}", item

    def parameters(self):
        return dict(self.named_parameters())


def uniform_weight(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zero_bias(n):
    return Tensor(np.zeros(n), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        self.weight = uniform_weight(rng, in_dim, (in_dim, out_dim))
        self.bias = zero_bias(out_dim) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class MLP(Module):
    """Stack of affine layers; ``activations[i]`` names the nonlinearity after layer i."""

    _ACTS = {"relu": T.relu, "tanh": T.tanh, "sigmoid": T.sigmoid, None: None}

    def __init__(self, dims, rng, activations=None):
        if len(dims) < 2:
            raise ContractError(f"MLP needs at least input and output dims, got {dims}")
        n = len(dims) - 1
        activations = list(activations) if activations is not None else ["relu"] * (n - 1) + [None]
        if len(activations) != n or any(a not in self._ACTS for a in activations):
            raise ContractError(f"MLP activations {activations} do not fit {n} layers")
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(n)]
        self.activations = activations

    def __call__(self, x):
        for layer, act in zip(self.layers, self.activations):
            x = layer(x)
            if act is not None:
                x = self._ACTS[act](x)
        return x


class LSTM(Module):
    """Unidirectional LSTM; gate blocks are ordered input, forget, cell, output."""

    def __init__(self, input_dim, hidden, rng):
        self.hidden = hidden
        self.w_input = uniform_weight(rng, input_dim, (input_dim, 4 * hidden))
        self.w_hidden = uniform_weight(rng, hidden, (hidden, 4 * hidden))
        self.bias = zero_bias(4 * hidden)

    def encode(self, sequence, mask=None):
        """Run over ``sequence`` (L x in, or B x L x in for a batch).

        Returns ``(global, locals)``: the final hidden state and the hidden
        state after every step. Steps where the boolean ``mask`` is false leave
        the state untouched, which makes a masked run over the full sequence
        equal to an unmasked run over just the kept steps.
        """
        seq, mask, single = self._batched(sequence, mask)
        local = T.lstm_sequence(seq, self.w_input, self.w_hidden, self.bias, mask)
        h = local[:, -1]
        if single:
            return h[0], local[0]
        return h, local

    def encode_stepwise(self, sequence, mask=None):
        """Same as :meth:`encode`, built step by step from elementwise primitives."""
        seq, mask, single = self._batched(sequence, mask)
        batch, length, _ = seq.shape
        d = self.hidden
        proj = T.add(T.matmul(seq, self.w_input), self.bias)
        h = c = Tensor(np.zeros((batch, d)))
        states = []
        for t in range(length):
            z = T.add(proj[:, t], T.matmul(h, self.w_hidden))
            gates = T.sigmoid(z)
            i, f, o = gates[:, :d], gates[:, d:2 * d], gates[:, 3 * d:]
            g = T.tanh(z[:, 2 * d:3 * d])
            c_new = T.add(T.multiply(f, c), T.multiply(i, g))
            h_new = T.multiply(o, T.tanh(c_new))
            if mask is None or mask[:, t].all():
                c, h = c_new, h_new
            else:
                keep = mask[:, t:t + 1].astype(np.float64)
                c = T.add(T.multiply(c_new, keep), T.multiply(c, 1.0 - keep))
                h = T.add(T.multiply(h_new, keep), T.multiply(h, 1.0 - keep))
            states.append(h)
        local = T.stack(states, axis=1)
        if single:
            return h[0], local[0]
        return h, local

    def _batched(self, sequence, mask):
        seq = T.as_tensor(sequence)
        single = seq.ndim == 2
        if single:
            seq = T.reshape(seq, (1,) + seq.shape)
            if mask is not None:
                mask = np.asarray(mask, dtype=bool)[None]
        if seq.ndim != 3 or seq.shape[1] == 0:
            raise ContractError(f"lstm_encode: need a nonempty sequence, got shape {seq.shape}")
        if seq.shape[2] != self.w_input.shape[0]:
            raise ContractError(
                f"lstm_encode: input width {seq.shape[2]} != {self.w_input.shape[0]}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
        return seq, mask, single


def sample_gumbel(shape, rng):
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def one_hot_argmax(values):
    values = np.asarray(values)
    return np.eye(values.shape[-1])[values.argmax(axis=-1)]


def gumbel_softmax(logits, temperature=1.0, hard=True, rng=None, noise=None):
    """Relaxed categorical sample per row of ``logits`` (categories on the last axis).

    In hard mode the forward value is the one-hot argmax of the relaxed
    sample and the backward pass uses the relaxed sample's gradient.
    """
    if temperature <= 0:
        raise ContractError(f"gumbel_softmax: temperature must be positive, got {temperature}")
    logits = T.as_tensor(logits)
    if noise is None:
        if rng is None:
            raise ContractError("gumbel_softmax: need an rng or explicit noise")
        noise = sample_gumbel(logits.shape, rng)
    soft = T.softmax(T.scale(T.add(logits, noise), 1.0 / temperature), axis=-1)
    if not hard:
        return soft
    return T.straight_through(soft, one_hot_argmax(soft.data))


def normalize_adjacency(adjacency, node_mask=None):
    """Row-softmax of the adjacency, with masked-out nodes removed as columns."""
    adjacency = T.as_tensor(adjacency)
    if adjacency.ndim < 2 or adjacency.shape[-1] != adjacency.shape[-2]:
        raise ContractError(f"gcn: adjacency must be square, got shape {adjacency.shape}")
    if node_mask is not None:
        bias = np.where(np.asarray(node_mask, dtype=bool), 0.0, MASK_BIAS)
        adjacency = T.add(adjacency, np.expand_dims(bias, -2))
    return T.softmax(adjacency, axis=-1)


def propagate(a_hat, x, weight):
    return T.add(T.relu(T.matmul(T.matmul(a_hat, x), weight)), x)


def gcn_layer(x, adjacency, weight, node_mask=None):
    """One graph convolution with residual: relu(Â X W) + X."""
    x = T.as_tensor(x)
    if adjacency.shape[-1] != x.shape[-2]:
        raise ContractError(
            f"gcn: adjacency shape {adjacency.shape} does not match node features {x.shape}")
    if weight.shape != (x.shape[-1], x.shape[-1]):
        raise ContractError(f"gcn: weight shape {weight.shape} for features {x.shape}")
    return propagate(normalize_adjacency(adjacency, node_mask), x, weight)


def attention_pool(z, query, node_mask=None):
    """Softmax(z . query)-weighted average of the rows of ``z``."""
    z = T.as_tensor(z)
    if z.ndim < 2 or z.shape[-2] == 0:
        raise ContractError(f"attention_pool: need at least one row, got shape {z.shape}")
    if query.shape != (z.shape[-1],):
        raise ContractError(f"attention_pool: query shape {query.shape} for rows {z.shape}")
    scores = T.matmul(z, query)
    if node_mask is not None:
        scores = T.add(scores, np.where(np.asarray(node_mask, dtype=bool), 0.0, MASK_BIAS))
    weights = T.softmax(scores, axis=-1)
    return T.sum(T.multiply(T.reshape(weights, weights.shape + (1,)), z), axis=-2)


class BilinearFusion(Module):
    """Low-rank bilinear fusion.

    Both inputs are projected to ``rank`` chunks of ``width`` features, multiplied
    elementwise, the chunks are summed, and a tanh output layer maps the
    ``width`` features to ``out_dim``.
    """

    def __init__(self, dim_a, dim_b, out_dim, rank, width, rng):
        self.rank = rank
        self.width = width
        self.proj_a = uniform_weight(rng, dim_a, (dim_a, rank * width))
        self.proj_b = uniform_weight(rng, dim_b, (dim_b, rank * width))
        self.out = uniform_weight(rng, width, (width, out_dim))

    def merged(self, a, b):
        a, b = T.as_tensor(a), T.as_tensor(b)
        if a.shape[-1] != self.proj_a.shape[0] or b.shape[-1] != self.proj_b.shape[0]:
            raise ContractError(
                f"bilinear_fusion: inputs {a.shape}, {b.shape} vs projections "
                f"{self.proj_a.shape}, {self.proj_b.shape}")
        prod = T.multiply(T.matmul(a, self.proj_a), T.matmul(b, self.proj_b))
        prod = T.reshape(prod, prod.shape[:-1] + (self.rank, self.width))
        return T.sum(prod, axis=-2)

    def __call__(self, a, b):
        return T.tanh(T.matmul(self.merged(a, b), self.out))
