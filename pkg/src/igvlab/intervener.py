"""Memory bank of complement scenes and composition of intervened videos."""

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, InterventionUnavailable

DEFAULT_CAPACITY = 2048


@dataclass(frozen=True)
class ComplementRecord:
    features: np.ndarray
    positions: np.ndarray
    source: object


class MemoryBank:
    """Bounded FIFO pool of complement scenes gathered from training videos."""

    def __init__(self, capacity=DEFAULT_CAPACITY):
        if capacity < 1:
            raise ContractError(f"memory bank capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._slots = []
        self._oldest = 0
        self._per_source = Counter()

    def __len__(self):
        return len(self._slots)

    def records(self):
        """Records from oldest to newest."""
        return self._slots[self._oldest:] + self._slots[:self._oldest]

    def deposit(self, features, positions, source):
        """Store one complement scene. An empty scene is ignored."""
        features = np.array(features, dtype=np.float64)
        if features.shape[0] == 0:
            return self
        record = ComplementRecord(features, np.array(positions), source)
        if len(self._slots) < self.capacity:
            self._slots.append(record)
        else:
            evicted = self._slots[self._oldest]
            self._per_source[evicted.source] -= 1
            self._slots[self._oldest] = record
            self._oldest = (self._oldest + 1) % self.capacity
        self._per_source[source] += 1
        return self

    def sample_substitute(self, exclude, rng):
        """Uniformly random record whose source differs from ``exclude``."""
        if len(self._slots) - self._per_source[exclude] <= 0:
            raise InterventionUnavailable(f"no substitute from a source other than {exclude!r}")
        while True:
            record = self._slots[int(rng.integers(len(self._slots)))]
            if record.source != exclude:
                return record


def fill_slots(causal_mask, substitute):
    """Clip array with ``substitute`` rows in the non-causal slots, zero elsewhere.

    Free slots are filled left to right with the substitute's clips in their
    stored order, cycling when the substitute is shorter than the gap.
    """
    causal_mask = np.asarray(causal_mask, dtype=bool)
    substitute = np.asarray(substitute, dtype=np.float64)
    fill = np.zeros((causal_mask.shape[0], substitute.shape[1]))
    free = np.flatnonzero(~causal_mask)
    if free.size and substitute.shape[0] == 0:
        raise ContractError("fill_slots: substitute has no clips")
    if free.size:
        fill[free] = substitute[np.arange(free.size) % substitute.shape[0]]
    return fill


def compose_intervened(c_hat, t_star, num_clips):
    """Build v* with the causal clips in place and ``t_star`` in every other slot.

    ``c_hat`` is a :class:`~igvlab.grounding.Scene`; ``t_star`` is an array of
    substitute clips (or None when the causal scene already covers the video).
    """
    positions = np.asarray(c_hat.positions)
    if positions.size == 0:
        raise ContractError("compose_intervened: causal scene is empty")
    if positions.max() >= num_clips:
        raise ContractError(f"compose_intervened: position {positions.max()} >= {num_clips}")
    mask = np.zeros(num_clips, dtype=bool)
    mask[positions] = True
    placement = np.zeros((num_clips, positions.size))
    placement[positions, np.arange(positions.size)] = 1.0
    placed = T.matmul(placement, c_hat.features)
    if mask.all() or t_star is None or len(t_star) == 0:
        return placed
    return T.add(placed, fill_slots(mask, t_star))
