"""Joint training of grounding indicator and backbone, evaluation, checkpoints."""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import IGVModel
from .errors import InterventionUnavailable, NumericError, ShapeMismatchError
from .grounding import indicate, indicate_greedy, masked_scenes
from .intervener import MemoryBank, fill_slots
from .objective import (
    check_variant, loss_causal, loss_complement, loss_intervened, masked_mean, total_loss,
    uses_complement, uses_intervention,
)
from .optim import AdamState, PlateauHalving, adam_step
from .tensor import Tape, Tensor

CSV_COLUMNS = ("epoch", "loss_c", "loss_t", "loss_v", "val_acc", "test_acc_iid",
               "test_acc_ood", "grounding_iou")
EVAL_CHUNK = 250


def build_model(config, seed):
    spec, m = config.data, config.model
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[0])
    return IGVModel(spec.clip_dim, spec.vocab_size, spec.num_answers, rng, d=m.d,
                    d_prime=m.d_prime, fusion_rank=m.fusion_rank, fusion_width=m.fusion_width,
                    gcn_layers=m.gcn_layers)


@dataclass
class Batch:
    clips: np.ndarray
    tokens: np.ndarray
    answers: np.ndarray
    sources: np.ndarray

    @classmethod
    def take(cls, dataset, index):
        clips, tokens, answers, _, _ = dataset.arrays()
        return cls(clips[index], tokens[index], answers[index], np.asarray(index))


def forward_losses(model, batch, variant, igv, bank=None, rng=None):
    """Run one batch through the variant's branches and return its LossBreakdown.

    The causal, complement and intervened scenes are stacked along the batch
    axis and share a single backbone call. Complements are deposited into
    ``bank`` after substitutes have been drawn for the batch.
    """
    check_variant(variant)
    clips, answers = batch.clips, batch.answers
    n, k, _ = clips.shape
    q_g, q_l = model.encode_question(batch.tokens)
    video = Tensor(clips)
    if variant == "erm-baseline":
        logits = model.backbone(video, np.ones((n, k), dtype=bool), q_g, q_l)
        return total_loss(T.mean(loss_causal(logits, answers)), None, None,
                          igv.lambda1, igv.lambda2, variant)

    _, v_l = model.encode_video(video)
    log_c, log_t = model.grounding.log_scores(v_l, q_g)
    grounding = indicate(log_c, log_t, igv.temperature, rng)
    causal_video, complement_video = masked_scenes(video, grounding)
    scenes, masks = [causal_video], [grounding.causal]
    if uses_complement(variant):
        scenes.append(complement_video)
        masks.append(grounding.complement)
    available = []
    if uses_intervention(variant):
        for _ in range(igv.interventions):
            fill = np.zeros_like(clips)
            ok = np.zeros(n)
            for i in range(n):
                if grounding.causal[i].all():
                    ok[i] = 1.0
                    continue
                try:
                    record = bank.sample_substitute(int(batch.sources[i]), rng)
                except InterventionUnavailable:
                    continue
                fill[i] = fill_slots(grounding.causal[i], record.features)
                ok[i] = 1.0
            scenes.append(T.add(causal_video, fill))
            masks.append(np.ones((n, k), dtype=bool))
            available.append(ok)

    branches = len(scenes)
    logits = model.backbone(
        T.concat(scenes, axis=0), np.concatenate(masks, axis=0),
        T.concat([q_g] * branches, axis=0), T.concat([q_l] * branches, axis=0))
    logits_c = logits[:n]
    loss_c = T.mean(loss_causal(logits_c, answers))
    loss_t = loss_v = None
    offset = n
    if uses_complement(variant):
        loss_t = masked_mean(loss_complement(logits[n:2 * n]), grounding.complement.any(axis=1))
        offset = 2 * n
    if available:
        kl = [loss_intervened(logits[offset + j * n:offset + (j + 1) * n], logits_c)
              for j in range(len(available))]
        loss_v = masked_mean(T.concat(kl, axis=0), np.concatenate(available))
        for i in range(n):
            bank.deposit(clips[i][grounding.complement[i]],
                         np.flatnonzero(grounding.complement[i]), int(batch.sources[i]))
    return total_loss(loss_c, loss_t, loss_v, igv.lambda1, igv.lambda2, variant)


def predict_scenes(model, clips, tokens, variant):
    """Inference: (answer logits from the causal branch, predicted causal mask or None)."""
    q_g, q_l = model.encode_question(tokens)
    video = Tensor(clips)
    n, k, _ = clips.shape
    if variant == "erm-baseline":
        return model.backbone(video, np.ones((n, k), dtype=bool), q_g, q_l), None, None
    _, v_l = model.encode_video(video)
    log_c, log_t = model.grounding.log_scores(v_l, q_g)
    grounding = indicate_greedy(log_c, log_t)
    causal_video, _ = masked_scenes(video, grounding)
    return model.backbone(causal_video, grounding.causal, q_g, q_l), grounding, (video, q_g, q_l)


def evaluate(model, dataset, variant, with_losses=False):
    """Accuracy of the causal prediction, mean grounding IoU, optional per-term losses.

    Per-term losses use the deterministic grounding; the intervened term pairs
    each video with the complement of the next video in its evaluation chunk.
    """
    check_variant(variant)
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    clips, tokens, answers, truth, _ = dataset.arrays()
    n = len(answers)
    correct, ious = 0, []
    sums = {"loss_c": 0.0, "loss_t": 0.0, "loss_v": 0.0}
    counts = {"loss_c": 0, "loss_t": 0, "loss_v": 0}
    for start in range(0, n, EVAL_CHUNK):
        sl = slice(start, min(start + EVAL_CHUNK, n))
        logits, grounding, enc = predict_scenes(model, clips[sl], tokens[sl], variant)
        correct += int((logits.data.argmax(axis=1) == answers[sl]).sum())
        if grounding is not None:
            inter = np.logical_and(grounding.causal, truth[sl]).sum(axis=1)
            union = np.logical_or(grounding.causal, truth[sl]).sum(axis=1)
            ious.extend(np.where(union == 0, 1.0, inter / np.maximum(union, 1)).tolist())
        if with_losses:
            lc = loss_causal(logits, answers[sl]).data
            sums["loss_c"] += lc.sum()
            counts["loss_c"] += lc.size
            if grounding is not None:
                _add_branch_losses(model, grounding, enc, logits, sums, counts)
    result = {"accuracy": correct / n,
              "grounding_iou": float(np.mean(ious)) if ious else math.nan}
    if with_losses:
        for key in sums:
            result[key] = sums[key] / counts[key] if counts[key] else math.nan
    return result


def _add_branch_losses(model, grounding, enc, logits_c, sums, counts):
    video, q_g, q_l = enc
    n, k, _ = video.shape
    causal_video, complement_video = masked_scenes(video, grounding)
    has_t = grounding.complement.any(axis=1)
    if has_t.any():
        lt = loss_complement(model.backbone(complement_video, grounding.complement, q_g, q_l)).data
        sums["loss_t"] += lt[has_t].sum()
        counts["loss_t"] += int(has_t.sum())
    fill = np.zeros_like(video.data)
    ok = grounding.causal.all(axis=1)
    for row in range(n):
        donor = (row + 1) % n
        if ok[row] or donor == row or not has_t[donor]:
            continue
        fill[row] = fill_slots(grounding.causal[row], video.data[donor][grounding.complement[donor]])
        ok[row] = True
    if ok.any():
        logits_v = model.backbone(T.add(causal_video, fill), np.ones((n, k), dtype=bool), q_g, q_l)
        lv = loss_intervened(logits_v, logits_c).data
        sums["loss_v"] += lv[ok].sum()
        counts["loss_v"] += int(ok.sum())


@dataclass
class EpochMetrics:
    epoch: int
    loss_c: float
    loss_t: float
    loss_v: float
    val_acc: float
    test_acc_iid: float
    test_acc_ood: float
    grounding_iou: float

    def row(self):
        return [self.epoch] + [repr(float(getattr(self, c))) for c in CSV_COLUMNS[1:]]


@dataclass
class TrainState:
    epoch: int
    best_val_acc: float
    epochs_since_improvement: int
    lr: float
    seed: int


@dataclass
class FitResult:
    model: IGVModel
    history: list = field(default_factory=list)
    state: TrainState = None
    best_epoch: int = 0
    variant: str = "full"


def _mean_or_nan(values):
    return float(np.mean(values)) if values else math.nan


def fit(config, splits, seed, variant=None, log=None):
    """Train from scratch; return the model restored to its best-validation epoch.

    Deterministic given ``seed``: it fixes parameter init, batch order,
    Gumbel noise and memory-bank sampling.
    """
    variant = check_variant(variant or config.igv.variant)
    igv, optim = config.igv, config.optim
    model = build_model(config, seed)
    params = model.parameters()
    _, order_ss, noise_ss = np.random.SeedSequence(seed).spawn(4)[:3]
    order_rng = np.random.default_rng(order_ss)
    noise_rng = np.random.default_rng(noise_ss)
    bank = MemoryBank(igv.bank_capacity)
    adam = AdamState()
    schedule = PlateauHalving(optim.lr, optim.patience)
    state = TrainState(0, -math.inf, 0, optim.lr, seed)
    result = FitResult(model, [], state, 0, variant)
    best = {name: p.data.copy() for name, p in params.items()}
    train = splits["train"]
    n = len(train)

    for epoch in range(1, optim.epochs + 1):
        order = order_rng.permutation(n)
        terms = {"loss_c": [], "loss_t": [], "loss_v": []}
        for b, start in enumerate(range(0, n, optim.batch_size)):
            batch = Batch.take(train, order[start:start + optim.batch_size])
            try:
                with Tape() as tape:
                    breakdown = forward_losses(model, batch, variant, igv, bank, noise_rng)
                    grads = tape.backward(breakdown.total)
                adam_step(params, {name: grads[p.node] for name, p in params.items()
                                   if p.node in grads}, adam, schedule.lr)
            except NumericError as err:
                raise NumericError(f"epoch {epoch} batch {b}: {err}", kind=err.kind) from err
            for key in terms:
                value = getattr(breakdown, key)
                if value is not None:
                    terms[key].append(value)

        val = evaluate(model, splits["val"], variant)
        iid = evaluate(model, splits["test_iid"], variant)
        ood = evaluate(model, splits["test_ood"], variant)
        metrics = EpochMetrics(epoch, _mean_or_nan(terms["loss_c"]), _mean_or_nan(terms["loss_t"]),
                               _mean_or_nan(terms["loss_v"]), val["accuracy"], iid["accuracy"],
                               ood["accuracy"], ood["grounding_iou"])
        result.history.append(metrics)
        if val["accuracy"] > state.best_val_acc:
            state.best_val_acc = val["accuracy"]
            result.best_epoch = epoch
            best = {name: p.data.copy() for name, p in params.items()}
        schedule.update(val["accuracy"])
        state.epoch = epoch
        state.epochs_since_improvement = schedule.since_improvement
        state.lr = schedule.lr
        if log is not None:
            log(metrics)

    for name, p in params.items():
        p.data[...] = best[name]
    return result


def write_metrics(history, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for m in history:
            writer.writerow(m.row())


def read_metrics(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# -- checkpoints ------------------------------------------------------------------

CHECKPOINT_FORMAT = "igvlab-checkpoint/1"


def save_checkpoint(path, model, config, seed, variant, best_val_acc=None, best_epoch=None):
    payload = {
        "format": CHECKPOINT_FORMAT, "seed": seed, "variant": variant,
        "best_val_acc": best_val_acc, "best_epoch": best_epoch, "config": config.to_dict(),
        "parameters": [{"name": name, "shape": list(p.shape), "values": p.data.ravel().tolist()}
                       for name, p in model.named_parameters()],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    """(model, metadata) from a checkpoint written by :func:`save_checkpoint`."""
    from .config import config_from_dict

    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ShapeMismatchError(f"{path}: not an igvlab checkpoint")
    config = config_from_dict(payload["config"])
    model = build_model(config, payload["seed"])
    params = model.parameters()
    stored = {entry["name"]: entry for entry in payload["parameters"]}
    if set(stored) != set(params):
        raise ShapeMismatchError(f"{path}: parameter names do not match the configured model")
    for name, p in params.items():
        entry = stored[name]
        if tuple(entry["shape"]) != p.shape or len(entry["values"]) != p.size:
            raise ShapeMismatchError(
                f"{path}: parameter {name} has shape {entry['shape']}, model expects {list(p.shape)}")
        p.data[...] = np.array(entry["values"], dtype=np.float64).reshape(p.shape)
    meta = {k: payload[k] for k in ("seed", "variant", "best_val_acc", "best_epoch")}
    meta["config"] = config
    return model, meta
