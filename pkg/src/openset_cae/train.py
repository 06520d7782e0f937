"""Two-stage training: closed-set classifier, then the label-conditioned decoder."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import LabeledDataset
from .nets import OpenSetModel, l1_errors
from .tensor_core import (
    Adam,
    Tensor,
    backward,
    l1_reconstruction_loss,
    no_grad,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 0.9
    lr: float = 3e-4
    batch_size: int = 64
    epochs_stage1: int = 100
    epochs_stage2: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("lr, batch_size must be positive and epochs non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ErrorSets:
    s_match: np.ndarray
    s_nonmatch: np.ndarray


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def train_stage1(model: OpenSetModel, dataset: LabeledDataset, config: TrainConfig) -> list[float]:
    """Cross-entropy training of the encoder and classifier. Returns mean loss per epoch."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.labels.max() >= model.k:
        raise ValueError(f"dataset labels exceed model class count {model.k}")
    rng = np.random.default_rng([config.seed, 1])
    params = model.encoder.parameters() + model.classifier.parameters()
    opt = Adam(params, lr=config.lr)
    trace = []
    for epoch in range(config.epochs_stage1):
        total = 0.0
        for idx in _batches(len(dataset), config.batch_size, rng):
            logits = model.classifier(model.encoder(Tensor(dataset.features[idx])))
            loss = softmax_cross_entropy(logits, dataset.labels[idx])
            backward(loss)
            opt.step()
            total += loss.item() * idx.size
        trace.append(total / len(dataset))
        log.debug("stage1 epoch %d loss %.6f", epoch, trace[-1])
    return trace


def nonmatch_labels(labels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """A label drawn uniformly from the other k-1 classes, per entry."""
    if k < 2:
        raise ValueError("non-match conditioning needs at least two classes")
    labels = np.asarray(labels, dtype=np.int64)
    return (labels + rng.integers(1, k, size=labels.shape)) % k


def sample_nonmatch(batch_labels, dataset: LabeledDataset, rng: np.random.Generator):
    """Draw non-match condition labels and a batch of targets from other classes.

    Each target is drawn uniformly from the training samples whose class
    differs from the corresponding batch label. The target's class is not
    tied to the drawn condition label.
    """
    k = dataset.class_count
    batch_labels = np.asarray(batch_labels, dtype=np.int64)
    nm = nonmatch_labels(batch_labels, k, rng)
    pools = {c: np.flatnonzero(dataset.labels != c) for c in np.unique(batch_labels)}
    picks = np.empty(batch_labels.size, dtype=np.int64)
    for i, c in enumerate(batch_labels):
        pool = pools[c]
        if pool.size == 0:
            raise ValueError(f"no training samples outside class {c}")
        picks[i] = pool[rng.integers(pool.size)]
    return nm, dataset.features[picks]


def train_stage2(model: OpenSetModel, dataset: LabeledDataset, config: TrainConfig):
    """Train decoder and FiLM nets on the weighted match / non-match L1 objective.

    The encoder and classifier stay frozen. Returns per-epoch mean match and
    non-match losses.
    """
    if model.k < 2:
        raise ValueError("stage 2 needs at least two known classes")
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng([config.seed, 2])
    params = model.decoder.parameters() + model.h_gamma.parameters() + model.h_beta.parameters()
    opt = Adam(params, lr=config.lr)
    a = config.alpha
    trace_m, trace_nm = [], []
    for epoch in range(config.epochs_stage2):
        tot_m = tot_nm = 0.0
        for idx in _batches(len(dataset), config.batch_size, rng):
            X = dataset.features[idx]
            y = dataset.labels[idx]
            y_nm, X_nm = sample_nonmatch(y, dataset, rng)
            with no_grad():
                z = model.encode(X)
            loss_m = l1_reconstruction_loss(Tensor(X), model.decode_conditioned(z, y))
            loss_nm = l1_reconstruction_loss(Tensor(X_nm), model.decode_conditioned(z, y_nm))
            backward(a * loss_m + (1.0 - a) * loss_nm)
            opt.step()
            tot_m += loss_m.item() * idx.size
            tot_nm += loss_nm.item() * idx.size
        trace_m.append(tot_m / len(dataset))
        trace_nm.append(tot_nm / len(dataset))
        log.debug("stage2 epoch %d match %.6f nonmatch %.6f", epoch, trace_m[-1], trace_nm[-1])
    return trace_m, trace_nm


def conditioned_errors(model: OpenSetModel, X: np.ndarray, labels: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Per-sample L1 error of each input against its own conditioned reconstruction."""
    out = np.empty(len(X))
    with no_grad():
        for s in range(0, len(X), chunk):
            xb = X[s:s + chunk]
            z = model.encode(xb)
            out[s:s + chunk] = l1_errors(xb, model.decode_conditioned(z, labels[s:s + chunk]).data)
    return out


def collect_error_sets(model: OpenSetModel, dataset: LabeledDataset, rng: np.random.Generator) -> ErrorSets:
    """Match and non-match reconstruction errors of every training sample against itself."""
    s_m = conditioned_errors(model, dataset.features, dataset.labels)
    nm = nonmatch_labels(dataset.labels, model.k, rng)
    s_nm = conditioned_errors(model, dataset.features, nm)
    return ErrorSets(s_match=s_m, s_nonmatch=s_nm)


def train_model(dataset: LabeledDataset, netdef, config: TrainConfig, alpha: float | None = None):
    """Build a model from ``netdef`` and run both stages. Returns (model, traces)."""
    model = OpenSetModel(netdef, seed=config.seed)
    cfg = config if alpha is None else TrainConfig(**{**config.to_dict(), "alpha": alpha})
    t1 = train_stage1(model, dataset, cfg)
    t2 = train_stage2(model, dataset, cfg)
    return model, {"stage1": t1, "stage2_match": t2[0], "stage2_nonmatch": t2[1]}
