"""Question-conditioned split of a video into causal and complement clips."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .blocks import MLP, Module, gumbel_softmax, one_hot_argmax
from .errors import ContractError
from .tensor import Tensor


class Scene(NamedTuple):
    """A subset of a video's clips together with their original positions."""

    features: Tensor
    positions: np.ndarray


@dataclass
class GroundingIndicator:
    """One-hot clip assignment; column 0 is causal, column 1 complement.

    ``assignment`` forwards exact one-hot rows and carries the relaxed
    sample's gradient. Works for one video (K x 2) or a batch (B x K x 2).
    """

    assignment: Tensor
    causal: np.ndarray
    complement: np.ndarray


class GroundingHead(Module):
    """The four scoring MLPs: clip and question projections for each side."""

    def __init__(self, d, d_prime, rng):
        self.causal_clip = MLP([d, d_prime, d_prime], rng)
        self.causal_question = MLP([d, d_prime, d_prime], rng)
        self.complement_clip = MLP([d, d_prime, d_prime], rng)
        self.complement_question = MLP([d, d_prime, d_prime], rng)

    def log_scores(self, v_l, q_g):
        return log_clip_scores(v_l, q_g, self)


def _clip_logits(clip_mlp, question_mlp, v_l, q_g):
    keys = clip_mlp(v_l)
    query = question_mlp(q_g)
    if query.ndim == 1:
        return T.matmul(keys, query)
    scores = T.matmul(keys, T.reshape(query, query.shape + (1,)))
    return T.reshape(scores, scores.shape[:-1])


def log_clip_scores(v_l, q_g, head):
    """Log of the causal and complement clip distributions (softmax over K)."""
    if v_l.shape[-2] < 2:
        raise ContractError(f"score_clips: need at least 2 clips to split, got shape {v_l.shape}")
    causal = _clip_logits(head.causal_clip, head.causal_question, v_l, q_g)
    complement = _clip_logits(head.complement_clip, head.complement_question, v_l, q_g)
    return T.log_softmax(causal, axis=-1), T.log_softmax(complement, axis=-1)


def score_clips(v_l, q_g, head):
    """Probability of each clip belonging to the causal and to the complement scene."""
    log_c, log_t = log_clip_scores(v_l, q_g, head)
    return T.softmax(log_c, axis=-1), T.softmax(log_t, axis=-1)


def _ensure_causal(hard, causal_logits):
    """Promote the most causal-looking clip wherever a row selected none."""
    hard = hard.copy()
    flat = hard.reshape(-1, *hard.shape[-2:])
    logits = np.asarray(causal_logits).reshape(-1, hard.shape[-2])
    for row, scores in zip(flat, logits):
        if not row[:, 0].any():
            k = int(scores.argmax())
            row[k] = (1.0, 0.0)
    return flat.reshape(hard.shape)


def _finish(soft_or_logits, hard, causal_logits):
    hard = _ensure_causal(hard, causal_logits)
    assignment = T.straight_through(soft_or_logits, hard)
    causal = hard[..., 0] == 1.0
    return GroundingIndicator(assignment, causal, ~causal)


def indicate(causal_logits, complement_logits, temperature, rng, noise=None):
    """Sample a hard clip assignment by row-wise Gumbel-Softmax.

    The two inputs are per-clip logits for the causal and complement side
    (``log_clip_scores`` output). A draw with no causal clip falls back to the
    clip with the highest causal score.
    """
    logits = T.stack([causal_logits, complement_logits], axis=-1)
    soft = gumbel_softmax(logits, temperature, hard=False, rng=rng, noise=noise)
    return _finish(soft, one_hot_argmax(soft.data), causal_logits.data)


def indicate_greedy(causal_logits, complement_logits):
    """Deterministic assignment used at inference: per-clip argmax."""
    logits = T.stack([causal_logits, complement_logits], axis=-1)
    return _finish(logits, one_hot_argmax(logits.data), causal_logits.data)


def split_scene(video, indicator):
    """Gather the causal and complement clips of one video, in original order.

    Clip features are scaled by their indicator entry so gradients reach the
    grounding scores; the forward values are the untouched clips.
    """
    video = T.as_tensor(video)
    if video.ndim != 2 or indicator.causal.shape != (video.shape[0],):
        raise ContractError(
            f"split_scene: video {video.shape} vs indicator {indicator.causal.shape}")
    positions = np.arange(video.shape[0])
    scaled_c = T.multiply(video, indicator.assignment[:, 0:1])
    scaled_t = T.multiply(video, indicator.assignment[:, 1:2])
    c_hat = Scene(T.select_rows(scaled_c, indicator.causal), positions[indicator.causal])
    t_hat = Scene(T.select_rows(scaled_t, indicator.complement), positions[indicator.complement])
    return c_hat, t_hat


def masked_scenes(video, indicator):
    """Batched counterpart of :func:`split_scene` that keeps all K slots.

    Returns the indicator-scaled videos for each side; which slots count is
    given by ``indicator.causal`` / ``indicator.complement``.
    """
    causal = T.multiply(video, indicator.assignment[..., 0:1])
    complement = T.multiply(video, indicator.assignment[..., 1:2])
    return causal, complement
