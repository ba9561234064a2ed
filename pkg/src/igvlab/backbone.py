"""Graph-reasoning answer predictor shared by the causal, complement and intervened branches."""

import numpy as np

from . import tensor as T
from .blocks import (
    MLP, BilinearFusion, Linear, LSTM, Module, attention_pool, normalize_adjacency,
    propagate, uniform_weight,
)
from .errors import ContractError
from .grounding import GroundingHead


class Backbone(Module):
    """Scene encoder + question/clip graph + two fusions + answer classifier.

    ``video_lstm`` is passed in rather than created so that the grounding
    indicator and the backbone read and update the same encoder weights.
    """

    def __init__(self, video_lstm, d, n_answers, rng, fusion_rank=4, fusion_width=None,
                 gcn_layers=2):
        fusion_width = fusion_width or d // 2
        self.video_lstm = video_lstm
        self.node_key = MLP([d, d], rng, ["relu"])
        self.node_query = MLP([d, d], rng, ["relu"])
        self.gcn = [uniform_weight(rng, d, (d, d)) for _ in range(gcn_layers)]
        self.pool_query = uniform_weight(rng, d, (d,))
        self.global_fusion = BilinearFusion(d, d, d, fusion_rank, fusion_width, rng)
        self.final_fusion = BilinearFusion(d, d, d, fusion_rank, fusion_width, rng)
        self.classifier = Linear(d, n_answers, rng)

    def __call__(self, video, clip_mask, q_g, q_l):
        """Answer logits for a batch.

        ``video`` is B x K x d_v with ``clip_mask`` (B x K booleans) marking
        which slots belong to the scene; ``q_g`` is B x d and ``q_l`` B x L x d.
        """
        clip_mask = np.asarray(clip_mask, dtype=bool)
        v_g, v_l = self.video_lstm.encode(video, clip_mask)
        x = T.concat([v_l, q_l], axis=1)
        node_mask = np.concatenate([clip_mask, np.ones(q_l.shape[:2], dtype=bool)], axis=1)
        adjacency = T.matmul(self.node_key(x), T.transpose(self.node_query(x)))
        a_hat = normalize_adjacency(adjacency, node_mask)
        z = x
        for weight in self.gcn:
            z = propagate(a_hat, z, weight)
        s_local = attention_pool(z, self.pool_query, node_mask)
        s_global = self.global_fusion(v_g, q_g)
        return self.classifier(self.final_fusion(s_global, s_local))


def predict(backbone, scene, question):
    """Answer logits (length C) for one scene of N clips and an encoded question.

    ``scene`` is N x d_v; ``question`` is the pair ``(q_g, q_l)`` with q_g of
    length d and q_l of shape L x d.
    """
    scene = T.as_tensor(scene)
    q_g, q_l = question
    if scene.ndim != 2 or scene.shape[0] == 0:
        raise ContractError(f"predict: scene must hold at least one clip, got shape {scene.shape}")
    if q_l.ndim != 2 or q_l.shape[0] == 0:
        raise ContractError(f"predict: question needs at least one token, got shape {q_l.shape}")
    logits = backbone(
        T.reshape(scene, (1,) + scene.shape), np.ones((1, scene.shape[0]), dtype=bool),
        T.reshape(q_g, (1,) + q_g.shape), T.reshape(q_l, (1,) + q_l.shape))
    return logits[0]


class IGVModel(Module):
    """All trainable parts: encoders, grounding head and backbone."""

    def __init__(self, clip_dim, vocab_size, n_answers, rng, d=64, d_prime=None,
                 fusion_rank=4, fusion_width=None, gcn_layers=2):
        d_prime = d_prime or d // 2
        self.vocab_size = vocab_size
        self.video_lstm = LSTM(clip_dim, d, rng)
        self.question_lstm = LSTM(vocab_size, d, rng)
        self.grounding = GroundingHead(d, d_prime, rng)
        self.backbone = Backbone(self.video_lstm, d, n_answers, rng, fusion_rank,
                                 fusion_width, gcn_layers)

    def encode_question(self, tokens):
        """(q_g, q_l) for token ids of shape L or B x L."""
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ContractError(f"token ids outside [0, {self.vocab_size})")
        return self.question_lstm.encode(np.eye(self.vocab_size)[tokens])

    def encode_video(self, clips):
        return self.video_lstm.encode(clips)
