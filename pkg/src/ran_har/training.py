"""Loss assembly, Adam, and the epoch loop."""

from __future__ import annotations

import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .datasets import WeakSample, encode_label_sequence
from .decoder import LabelVocabulary
from .encoder import BaselineConfig, BaselineParams, baseline_logits
from .model import RANModel
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.00025
    batch_size: int = 50
    epochs: int = 100
    tau: float = 1.0
    reg_weight: float = 1.0
    seed: int = 0
    T: int = 10
    clip_norm: float = 5.0
    eval_every: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class LossOutput:
    loss: Tensor  # differentiable total, averaged over the batch
    total: float
    nll: float
    attention_penalty: float
    clamped: int = 0  # target probabilities that hit the log floor


PROB_FLOOR = 1e-12


def sequence_loss(probabilities, targets, attention, config: TrainConfig, mask=None) -> LossOutput:
    """Masked negative log-likelihood plus the attention-coverage penalty.

    ``probabilities`` is ``[..., S, V]``, ``targets`` the token expected at
    each of the ``S`` steps, ``attention`` the weights ``[..., S, L]``. Steps
    with ``mask == 0`` (default: PAD targets) are left out of both terms. The
    penalty is ``sum_i (tau - sum_t alpha[t, i])**2`` per sample; all
    quantities are averaged over leading batch axes.
    """
    probs = probabilities if isinstance(probabilities, Tensor) else Tensor(probabilities)
    alpha = attention if isinstance(attention, Tensor) else Tensor(attention)
    targets = np.asarray(targets, dtype=np.int64)
    if mask is None:
        mask = (targets != LabelVocabulary.pad).astype(np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    row_sums = alpha.data.sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0)[mask > 0] > 1e-6):
        raise ValueError("attention rows must each sum to 1")

    picked = T.pick(probs, targets)
    clamped = int(np.sum((picked.data <= PROB_FLOOR) & (mask > 0)))
    if clamped:
        log.debug("%d target probabilities clamped at %g", clamped, PROB_FLOOR)
    nll = T.scale(T.sum(T.mul(T.log(picked, floor=PROB_FLOOR), mask)), -1.0)

    coverage = T.sum(T.mul(alpha, mask[..., None]), axis=-2)  # [..., L]
    penalty = T.sum(T.square(T.sub(config.tau, coverage)))

    batch = int(np.prod(targets.shape[:-1])) if targets.ndim > 1 else 1
    total = T.scale(T.add(nll, T.scale(penalty, config.reg_weight)), 1.0 / batch)
    return LossOutput(
        loss=total,
        total=total.item(),
        nll=nll.item() / batch,
        attention_penalty=penalty.item() / batch,
        clamped=clamped,
    )


class Adam:
    """Adam with bias-corrected moments (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if params[name].shape != g.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = params[name]
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


# metrics -------------------------------------------------------------------


@dataclass
class Metrics:
    sequence_accuracy: float
    token_accuracy: float
    multiset_accuracy: float
    reversed_accuracy: float  # a prediction also counts when it equals the reversed target
    count: int
    confusion: dict = field(default_factory=dict)
    per_kind: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = {f"{a}->{b}": n for (a, b), n in self.confusion.items()}
        return d


def sequence_metrics(predictions: Sequence[Sequence[str]], targets: Sequence[Sequence[str]]) -> Metrics:
    if len(predictions) != len(targets):
        raise ValueError("predictions and targets differ in length")
    n = len(targets)
    exact = multiset = reverse = 0
    tok_right = tok_total = 0
    confusion: Counter = Counter()
    kinds: dict[str, list[int]] = {}
    for pred, tgt in zip(predictions, targets):
        pred, tgt = list(pred), list(tgt)
        ok = pred == tgt
        exact += ok
        multiset += Counter(pred) == Counter(tgt)
        reverse += ok or pred == tgt[::-1]
        for i, t in enumerate(tgt):
            p = pred[i] if i < len(pred) else "<none>"
            confusion[(t, p)] += 1
            tok_right += p == t
            tok_total += 1
        stats = kinds.setdefault("-".join(tgt), [0, 0])
        stats[0] += ok
        stats[1] += 1
    return Metrics(
        sequence_accuracy=exact / n if n else 0.0,
        token_accuracy=tok_right / tok_total if tok_total else 0.0,
        multiset_accuracy=multiset / n if n else 0.0,
        reversed_accuracy=reverse / n if n else 0.0,
        count=n,
        confusion=dict(confusion),
        per_kind={k: v[0] / v[1] for k, v in sorted(kinds.items())},
    )


def evaluate(model: RANModel, samples: Sequence[WeakSample], batch_size: int = 64) -> Metrics:
    """Greedy-decode every sample and score against its weak label."""
    if not samples:
        return sequence_metrics([], [])
    results = model.decode(np.stack([s.window for s in samples]), batch_size)
    return sequence_metrics([r.labels for r in results], [s.weak_label for s in samples])


# training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    log: list[dict]
    model: RANModel


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, size):
        yield order[lo : lo + size]


def train_step(model: RANModel, windows: np.ndarray, targets: np.ndarray, config: TrainConfig, optimizer: Adam):
    params = model.parameters()
    names = list(params)
    with GradTape() as tape:
        out = model.teacher_forced(windows, targets)
        loss = sequence_loss(out.probabilities, out.targets, out.attention, config, out.mask)
    grads = dict(zip(names, tape.gradient(loss.loss, [params[k] for k in names])))
    clip_by_global_norm(grads, config.clip_norm)
    optimizer.step(params, grads)
    pred = np.argmax(out.probabilities.data, axis=-1)
    correct = np.all((pred == out.targets) | (out.mask == 0), axis=-1)
    return loss, correct


def train(
    model: RANModel,
    dataset: Sequence[WeakSample],
    config: TrainConfig,
    test_set: Sequence[WeakSample] | None = None,
    log_path=None,
    on_epoch: Callable[[dict], bool | None] | None = None,
) -> TrainResult:
    """Mini-batch Adam over ``dataset`` for ``config.epochs`` epochs.

    Each log record carries the epoch's mean loss terms, the training
    accuracy of teacher-forced argmax predictions, and the greedy test
    accuracy (every ``eval_every`` epochs, else ``None``). Training stops
    early when ``on_epoch`` returns a truthy value.
    """
    if not dataset:
        raise ValueError("empty training set")
    if config.T != model.config.max_steps:
        raise ValueError(f"TrainConfig.T={config.T} but the model decodes {model.config.max_steps}")
    windows = np.stack([s.window for s in dataset])
    targets = np.stack([encode_label_sequence(s.weak_label, model.vocab, config.T) for s in dataset])
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(config.learning_rate)
    records: list[dict] = []
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if sink:
            sink.write(json.dumps({"config": asdict(config), "model": model.config.to_dict()}) + "\n")
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            totals = np.zeros(3)
            right = 0
            for idx in _batches(len(dataset), config.batch_size, rng):
                loss, correct = train_step(model, windows[idx], targets[idx], config, optimizer)
                totals += np.array([loss.total, loss.nll, loss.attention_penalty]) * len(idx)
                right += int(correct.sum())
            totals /= len(dataset)
            rec = {
                "epoch": epoch,
                "train_loss": float(totals[0]),
                "train_nll": float(totals[1]),
                "train_penalty": float(totals[2]),
                "train_acc": right / len(dataset),
                "test_acc": None,
            }
            if test_set and (epoch % config.eval_every == 0 or epoch == config.epochs):
                rec["test_acc"] = evaluate(model, test_set).sequence_accuracy
            rec["seconds"] = round(time.perf_counter() - t0, 3)
            records.append(rec)
            log.info("epoch %d loss %.4f train_acc %.3f test_acc %s", epoch, rec["train_loss"], rec["train_acc"], rec["test_acc"])
            if sink:
                sink.write(json.dumps({k: v for k, v in rec.items() if k != "seconds"}) + "\n")
            if on_epoch and on_epoch(rec):
                break
    finally:
        if sink:
            sink.close()
    return TrainResult(records, model)


# baseline ------------------------------------------------------------------


def train_baseline(
    params: BaselineParams,
    config: BaselineConfig,
    windows: np.ndarray,
    labels: np.ndarray,
    train_config: TrainConfig,
) -> list[dict]:
    """Softmax cross-entropy training of the baseline classifier on integer ``labels``."""
    named = params.named()
    names = list(named)
    rng = np.random.default_rng(train_config.seed)
    optimizer = Adam(train_config.learning_rate)
    records = []
    for epoch in range(1, train_config.epochs + 1):
        total = 0.0
        for idx in _batches(len(windows), train_config.batch_size, rng):
            with GradTape() as tape:
                logits = baseline_logits(windows[idx], params, config)
                loss = T.scale(T.softmax_cross_entropy(logits, labels[idx]), 1.0 / len(idx))
            grads = dict(zip(names, tape.gradient(loss, [named[k] for k in names])))
            clip_by_global_norm(grads, train_config.clip_norm)
            optimizer.step(named, grads)
            total += loss.item() * len(idx)
        records.append({"epoch": epoch, "train_loss": total / len(windows)})
    return records


def baseline_predict(params: BaselineParams, config: BaselineConfig, windows: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, len(windows), batch_size):
        out.append(np.argmax(baseline_logits(windows[lo : lo + batch_size], params, config).data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
