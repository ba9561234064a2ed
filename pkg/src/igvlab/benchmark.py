"""Synthetic VideoQA data with planted causal clips and tunable spurious context.

Each video has K clips split into equal temporal segments. The question's
template token names one segment and one family of answer prototypes; a few
clips in that segment carry the answer's prototype from that family and form
the ground-truth causal scene. Every other clip carries the prototype of a
spurious concept that agrees with the answer with probability rho. Other
segments may also hold distractor events (random answers drawn from their own
segment's family), so the answer can only be read off with the question.

Scenarios change how the context relates to the causal clips:

``independent``  concept chosen from the answer by the rho rule only.
``c-causes-t``   complement clips also echo a rotated copy of the answer
                 prototype, a genuine causal leak from causal to context.
``common-cause`` a latent environment picks the concept, the answer is tied
                 to it by the rho rule, and the environment faintly tints the
                 causal clips too.
"""

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from itertools import product

import numpy as np

from .errors import ContractError

SCENARIOS = ("independent", "c-causes-t", "common-cause")
SPLITS = ("train", "val", "test_iid", "test_ood")
ECHO_AMPLITUDE = 0.3
TINT_AMPLITUDE = 0.2


@dataclass(frozen=True)
class SyntheticSpec:
    num_clips: int = 16
    clip_dim: int = 32
    question_len: int = 4
    vocab_size: int = 12
    num_answers: int = 4
    num_templates: int = 4
    causal_min: int = 2
    causal_max: int = 4
    scenario: str = "independent"
    rho_train: float = 0.9
    rho_test: float = 0.25
    noise: float = 0.3
    signal: float = 1.0
    context: float = 1.0
    distractor_rate: float = 1.0
    seed: int = 0

    def validate(self):
        c = self.num_answers
        if c < 2:
            raise ContractError(f"num_answers must be >= 2, got {c}")
        if self.num_templates < 1 or self.num_clips % self.num_templates:
            raise ContractError(
                f"num_clips ({self.num_clips}) must split evenly into "
                f"num_templates ({self.num_templates}) segments")
        segment = self.num_clips // self.num_templates
        if not 1 <= self.causal_min <= self.causal_max < self.num_clips:
            raise ContractError(
                f"causal clip range [{self.causal_min}, {self.causal_max}] invalid for "
                f"{self.num_clips} clips")
        if self.causal_max > segment:
            raise ContractError(f"causal_max {self.causal_max} exceeds segment length {segment}")
        for name in ("rho_train", "rho_test"):
            rho = getattr(self, name)
            if not 1.0 / c - 1e-12 <= rho <= 1.0:
                raise ContractError(f"{name}={rho} outside [1/C, 1] for C={c}")
        if self.scenario not in SCENARIOS:
            raise ContractError(f"scenario {self.scenario!r} not in {SCENARIOS}")
        if self.clip_dim < (self.num_templates + 1) * c:
            raise ContractError(
                f"clip_dim must be >= (num_templates + 1) * num_answers, got {self.clip_dim}")
        if self.vocab_size <= self.num_templates:
            raise ContractError("vocab_size must exceed num_templates (filler tokens needed)")
        if self.question_len < 1:
            raise ContractError("question_len must be >= 1")
        if self.noise < 0 or self.signal <= 0 or self.context < 0:
            raise ContractError("noise >= 0, signal > 0 and context >= 0 required")
        if not 0 <= self.distractor_rate <= 1:
            raise ContractError("distractor_rate must lie in [0, 1]")
        return self


@dataclass
class QAInstance:
    id: str
    clips: np.ndarray
    tokens: np.ndarray
    answer: int
    causal_mask: np.ndarray
    concept: int
    scenario: str


@dataclass
class Prototypes:
    """Orthonormal feature directions: ``answers[template, answer]`` and ``concepts[concept]``."""

    answers: np.ndarray
    concepts: np.ndarray
    echo: np.ndarray

    @classmethod
    def from_spec(cls, spec):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(99,)))
        c, m = spec.num_answers, spec.num_templates
        q, _ = np.linalg.qr(rng.standard_normal((spec.clip_dim, (m + 1) * c)))
        rotation, _ = np.linalg.qr(rng.standard_normal((spec.clip_dim, spec.clip_dim)))
        q = q.T
        return cls(answers=q[:m * c].reshape(m, c, spec.clip_dim).copy(),
                   concepts=q[m * c:].copy(), echo=rotation)


@dataclass
class Dataset:
    spec: SyntheticSpec
    split: str
    rho: float
    prototypes: Prototypes
    instances: list = field(default_factory=list)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def arrays(self):
        """Stacked (clips, tokens, answers, causal_masks, concepts)."""
        cached = getattr(self, "_arrays", None)
        if cached is None or len(cached[2]) != len(self.instances):
            inst = self.instances
            cached = (
                np.stack([x.clips for x in inst]), np.stack([x.tokens for x in inst]),
                np.array([x.answer for x in inst]), np.stack([x.causal_mask for x in inst]),
                np.array([x.concept for x in inst]))
            self._arrays = cached
        return cached


def _agree(rng, value, rho, n):
    """``value`` with probability rho, otherwise a uniformly chosen other class."""
    if rng.random() < rho:
        return value
    other = int(rng.integers(n - 1))
    return other + (other >= value)


def _instance(spec, protos, rho, seed_seq, ident):
    rng = np.random.default_rng(seed_seq)
    k, c = spec.num_clips, spec.num_answers
    segment = k // spec.num_templates
    template = int(rng.integers(spec.num_templates))
    tokens = spec.num_templates + rng.integers(spec.vocab_size - spec.num_templates,
                                               size=spec.question_len)
    tokens[rng.integers(spec.question_len)] = template

    if spec.scenario == "common-cause":
        environment = int(rng.integers(c))
        answer = _agree(rng, environment, rho, c)
        concept = environment
    else:
        answer = int(rng.integers(c))
        concept = _agree(rng, answer, rho, c)

    n_causal = int(rng.integers(spec.causal_min, spec.causal_max + 1))
    start = template * segment
    causal_pos = start + np.sort(rng.choice(segment, size=n_causal, replace=False))
    causal_mask = np.zeros(k, dtype=bool)
    causal_mask[causal_pos] = True

    clips = spec.noise * rng.standard_normal((k, spec.clip_dim))
    event = protos.answers[template, answer]
    clips[causal_mask] += spec.signal * event
    clips[~causal_mask] += spec.context * protos.concepts[concept]
    if spec.scenario == "c-causes-t":
        clips[~causal_mask] += ECHO_AMPLITUDE * spec.signal * (protos.echo @ event)
    elif spec.scenario == "common-cause":
        clips[causal_mask] += TINT_AMPLITUDE * spec.signal * protos.concepts[concept]

    for seg in range(spec.num_templates):
        if seg == template or rng.random() >= spec.distractor_rate:
            continue
        decoy = int(rng.integers(c))
        n_decoy = int(rng.integers(spec.causal_min, spec.causal_max + 1))
        pos = seg * segment + rng.choice(segment, size=n_decoy, replace=False)
        clips[pos] += spec.signal * protos.answers[seg, decoy]

    return QAInstance(ident, clips, tokens.astype(np.int64), answer, causal_mask, concept,
                      spec.scenario)


def instance_seed(spec, split, index):
    """Seed sequence for one instance; distinct for every (split, index) pair."""
    return np.random.SeedSequence(spec.seed, spawn_key=(SPLITS.index(split), index))


def generate_dataset(spec, n, rho=None, split="train"):
    spec.validate()
    if n < 1:
        raise ContractError(f"dataset size must be >= 1, got {n}")
    if split not in SPLITS:
        raise ContractError(f"unknown split {split!r}")
    rho = spec.rho_train if rho is None else rho
    protos = Prototypes.from_spec(spec)
    data = Dataset(spec, split, rho, protos)
    data.instances = [
        _instance(spec, protos, rho, instance_seed(spec, split, i), f"{split}-{i:06d}")
        for i in range(n)]
    return data


def split_ood(spec, n_train, n_val, n_test):
    """Train/val/IID-test at rho_train plus an OOD test at rho_test."""
    if min(n_train, n_val, n_test) < 1:
        raise ContractError("split sizes must be >= 1")
    sizes = {"train": n_train, "val": n_val, "test_iid": n_test, "test_ood": n_test}
    return {name: generate_dataset(spec, sizes[name],
                                   spec.rho_test if name == "test_ood" else spec.rho_train, name)
            for name in SPLITS}


# -- diagnostics ----------------------------------------------------------------

def compute_lmi(dataset, concept_of=lambda x: x.concept, answer_of=lambda x: x.answer):
    """Local mutual information p(x,y) * ln(p(x,y) / (p(x) p(y))) per observed pair."""
    pairs = [(concept_of(x), answer_of(x)) for x in dataset]
    if not pairs:
        raise ContractError("compute_lmi: empty dataset")
    n = len(pairs)
    joint = Counter(pairs)
    px = Counter(a for a, _ in pairs)
    py = Counter(b for _, b in pairs)
    rows = []
    for (x, y), count in joint.items():
        pxy = count / n
        rows.append((x, y, pxy * math.log(count * n / (px[x] * py[y]))))
    return sorted(rows, key=lambda r: (str(r[0]), str(r[1])))


def grounding_iou(predicted, truth):
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise ContractError(f"grounding_iou: mask shapes {predicted.shape} and {truth.shape}")
    union = np.logical_or(predicted, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(predicted, truth).sum() / union)


def question_templates(tokens, num_templates):
    """Template id of each question: its one token below ``num_templates``."""
    tokens = np.asarray(tokens)
    return np.where(tokens < num_templates, tokens, num_templates).min(axis=-1)


def causal_cheat_predictions(dataset):
    """Answers read from the true causal clips by nearest prototype of the queried family."""
    clips, tokens, _, masks, _ = dataset.arrays()
    means = (clips * masks[..., None]).sum(1) / masks.sum(1, keepdims=True)
    family = dataset.prototypes.answers[question_templates(tokens, dataset.spec.num_templates)]
    return np.einsum("nd,ncd->nc", means, family).argmax(1)


def complement_cheat_predictions(dataset):
    """Answers guessed from the context alone: the answer tied to its dominant concept."""
    clips, _, _, masks, _ = dataset.arrays()
    rest = ~masks
    means = (clips * rest[..., None]).sum(1) / rest.sum(1, keepdims=True)
    return (means @ dataset.prototypes.concepts.T).argmax(1)


def accuracy(predictions, dataset):
    return float(np.mean(np.asarray(predictions) == dataset.arrays()[2]))


def random_mask_iou(num_clips, causal_min, causal_max, p=0.5):
    """Expected IoU of a mask marking each clip causal with probability p.

    Exact enumeration over hits inside the true scene and false alarms outside
    it, averaged over a uniform causal count; an empty draw falls back to a
    single uniformly placed clip.
    """
    total = 0.0
    counts = range(causal_min, causal_max + 1)
    for n in counts:
        expected = 0.0
        for hits, extra in product(range(n + 1), range(num_clips - n + 1)):
            prob = (math.comb(n, hits) * math.comb(num_clips - n, extra)
                    * p ** (hits + extra) * (1 - p) ** (num_clips - hits - extra))
            if hits + extra == 0:
                expected += prob * (n / num_clips) * (1.0 / n)
            else:
                expected += prob * hits / (n + extra)
        total += expected
    return total / len(counts)


def sized_random_iou(num_clips, truth_count, mask_size):
    """Expected IoU of a uniformly placed mask of ``mask_size`` clips vs a truth of ``truth_count``.

    Hits follow the hypergeometric law; the union is truth + mask - hits.
    """
    n, s = truth_count, mask_size
    if not (0 <= n <= num_clips and 0 <= s <= num_clips):
        raise ContractError(f"sized_random_iou: counts {n}, {s} outside [0, {num_clips}]")
    if n + s == 0:
        return 1.0
    total = 0.0
    for hits in range(max(0, n + s - num_clips), min(n, s) + 1):
        prob = math.comb(n, hits) * math.comb(num_clips - n, s - hits) / math.comb(num_clips, s)
        total += prob * hits / (n + s - hits)
    return total


def matched_random_iou(truth_masks, predicted_masks):
    """Mean expected IoU of random masks sized like each prediction, per instance."""
    truth = np.asarray(truth_masks, dtype=bool)
    pred = np.asarray(predicted_masks, dtype=bool)
    if truth.shape != pred.shape or truth.ndim != 2:
        raise ContractError(f"matched_random_iou: shapes {truth.shape} and {pred.shape}")
    k = truth.shape[1]
    cache = {}
    values = []
    for n, s in zip(truth.sum(axis=1).tolist(), pred.sum(axis=1).tolist()):
        if (n, s) not in cache:
            cache[n, s] = sized_random_iou(k, n, s)
        values.append(cache[n, s])
    return float(np.mean(values))


# -- file format ----------------------------------------------------------------

def _header(dataset):
    return {
        "spec": asdict(dataset.spec), "split": dataset.split, "rho": dataset.rho,
        "answer_prototypes": dataset.prototypes.answers.tolist(),
        "concept_prototypes": dataset.prototypes.concepts.tolist(),
        "echo_rotation": dataset.prototypes.echo.tolist(),
    }


def _record(x):
    return {"id": x.id, "clips": x.clips.tolist(), "tokens": x.tokens.tolist(),
            "answer": int(x.answer), "causal_mask": [bool(b) for b in x.causal_mask],
            "concept": int(x.concept), "scenario": x.scenario}


def save_dataset(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header(dataset)) + "\n")
        for x in dataset:
            fh.write(json.dumps(_record(x)) + "\n")


def spec_from_dict(values):
    known = {f.name for f in fields(SyntheticSpec)}
    unknown = set(values) - known
    if unknown:
        raise ContractError(f"unknown synthetic spec fields: {sorted(unknown)}")
    return SyntheticSpec(**values).validate()


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ContractError(f"{path}: empty dataset file")
    try:
        head = json.loads(lines[0])
        spec = spec_from_dict(head["spec"])
        protos = Prototypes(np.array(head["answer_prototypes"]),
                            np.array(head["concept_prototypes"]),
                            np.array(head["echo_rotation"]))
        data = Dataset(spec, head["split"], float(head["rho"]), protos)
        for line in lines[1:]:
            r = json.loads(line)
            data.instances.append(QAInstance(
                r["id"], np.array(r["clips"], dtype=np.float64),
                np.array(r["tokens"], dtype=np.int64), int(r["answer"]),
                np.array(r["causal_mask"], dtype=bool), int(r["concept"]), r["scenario"]))
    except (KeyError, TypeError, ValueError) as err:
        raise ContractError(f"{path}: malformed dataset record ({err})") from None
    return data
