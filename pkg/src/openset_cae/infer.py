"""Open-set prediction by decoding under every condition vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import OpenSetModel, forward_closed, l1_errors
from .tensor_core import Tensor, no_grad


class ThresholdMissingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OpenSetPrediction:
    known: bool
    y_pred: int
    rec_errors: tuple[float, ...]
    min_error: float
    tau: float

    @property
    def label(self) -> int | None:
        return self.y_pred if self.known else None

    def to_dict(self) -> dict:
        return {
            "decision": "known" if self.known else "unknown",
            "label": self.label,
            "rec_errors": list(self.rec_errors),
            "tau": self.tau,
        }


def decide(rec_errors, y_pred: int, tau: float) -> OpenSetPrediction:
    """Known (with the classifier's label) iff the smallest error is strictly below tau."""
    errs = tuple(float(e) for e in rec_errors)
    m = min(errs)
    return OpenSetPrediction(known=m < tau, y_pred=int(y_pred), rec_errors=errs, min_error=m, tau=float(tau))


def _tau(model: OpenSetModel, tau: float | None) -> float:
    if tau is not None:
        return float(tau)
    if model.threshold is None:
        raise ThresholdMissingError("threshold not fitted")
    return float(model.threshold.tau_star)


def reconstruction_errors(model: OpenSetModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Closed-set labels and the (N, k) matrix of per-condition L1 errors."""
    X = model._check_input(X)
    z, _, y_pred = forward_closed(model, X)
    errs = np.empty((X.shape[0], model.k))
    with no_grad():
        zt = Tensor(z)
        for i in range(model.k):
            x_hat = model.decode_conditioned(zt, np.full(X.shape[0], i))
            errs[:, i] = l1_errors(X, x_hat.data)
    return y_pred, errs


def _predict_one(model: OpenSetModel, x: np.ndarray, tau: float) -> OpenSetPrediction:
    # one sample per call: BLAS rounding then never depends on batch composition
    z, _, y_pred = forward_closed(model, x[None, :])
    with no_grad():
        zk = Tensor(np.repeat(z, model.k, axis=0))
        x_hat = model.decode_conditioned(zk, np.arange(model.k)).data
    return decide(l1_errors(np.repeat(x[None, :], model.k, axis=0), x_hat), y_pred[0], tau)


def k_inference(model: OpenSetModel, x, tau: float | None = None) -> OpenSetPrediction:
    """Classify one sample as one of the k known classes or unknown."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"k_inference takes a single sample, got shape {x.shape}")
    t = _tau(model, tau)
    model._check_input(x)
    return _predict_one(model, x, t)


def batch_inference(model: OpenSetModel, X, tau: float | None = None) -> list[OpenSetPrediction]:
    """``k_inference`` over the rows of ``X``; each row gives the identical result."""
    t = _tau(model, tau)
    X = model._check_input(X)
    return [_predict_one(model, x, t) for x in X]
