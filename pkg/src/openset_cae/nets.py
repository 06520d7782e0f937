"""Encoder, classifier, conditioned decoder and FiLM conditioning nets."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor_core import (
    ACTIVATIONS,
    DimensionError,
    Tensor,
    activation,
    add,
    affine,
    mul,
    no_grad,
    softmax,
)


@dataclass(frozen=True)
class LabelConditionVector:
    values: np.ndarray
    class_index: int


def condition_vector(j: int, k: int) -> LabelConditionVector:
    """+1 at position ``j`` and -1 everywhere else."""
    if k < 1:
        raise ValueError(f"class count must be positive, got {k}")
    if not 0 <= j < k:
        raise IndexError(f"class index {j} out of range for k={k}")
    v = -np.ones(k)
    v[j] = 1.0
    return LabelConditionVector(values=v, class_index=int(j))


def condition_matrix(labels, k: int) -> np.ndarray:
    """Stack condition vectors for a batch of labels into an (N, k) array."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k})")
    out = -np.ones((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class NetworkDef:
    """Layer widths for every sub-network.

    ``encoder_widths[-1]`` is the latent size. The classifier and decoder
    widths list hidden layers only; their output sizes are ``k`` and
    ``input_dim``.
    """

    input_dim: int
    k: int
    encoder_widths: list[int] = field(default_factory=lambda: [2, 5])
    classifier_widths: list[int] = field(default_factory=lambda: [5])
    decoder_widths: list[int] = field(default_factory=lambda: [5])
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.input_dim < 1 or self.k < 1 or not self.encoder_widths:
            raise ValueError("input_dim, k must be positive and the encoder needs a latent layer")
        if any(w < 1 for w in [*self.encoder_widths, *self.classifier_widths, *self.decoder_widths]):
            raise ValueError("all layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.encoder_widths = [int(w) for w in self.encoder_widths]
        self.classifier_widths = [int(w) for w in self.classifier_widths]
        self.decoder_widths = [int(w) for w in self.decoder_widths]

    @property
    def latent_dim(self) -> int:
        return self.encoder_widths[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetworkDef:
        return cls(**d)


class MLP:
    """Stack of affine layers with a per-layer activation."""

    def __init__(self, widths: list[int], activations: list[str], rng: np.random.Generator):
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        self.activations = list(activations)
        self.layers: list[tuple[Tensor, Tensor]] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            W = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
            b = Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True)
            self.layers.append((W, b))

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def __call__(self, x: Tensor) -> Tensor:
        for (W, b), kind in zip(self.layers, self.activations):
            x = activation(affine(x, W, b), kind)
        return x


def film_modulate(z: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Feature-wise scale and shift: ``gamma * z + beta``."""
    if gamma.shape != z.shape or beta.shape != z.shape:
        raise DimensionError(f"FiLM: z {z.shape}, gamma {gamma.shape}, beta {beta.shape} must match")
    return add(mul(gamma, z), beta)


class OpenSetModel:
    """Parameter bundle for F, C, G, H_gamma and H_beta plus an optional threshold."""

    def __init__(self, netdef: NetworkDef, seed: int = 0):
        self.netdef = netdef
        rng = np.random.default_rng([seed, 0x1417])
        act = netdef.activation
        enc = [netdef.input_dim, *netdef.encoder_widths]
        cls = [netdef.latent_dim, *netdef.classifier_widths, netdef.k]
        dec = [netdef.latent_dim, *netdef.decoder_widths, netdef.input_dim]
        self.encoder = MLP(enc, [act] * (len(enc) - 1), rng)
        self.classifier = MLP(cls, [act] * (len(cls) - 2) + ["identity"], rng)
        self.decoder = MLP(dec, [act] * (len(dec) - 2) + ["tanh"], rng)
        self.h_gamma = MLP([netdef.k, netdef.latent_dim], ["identity"], rng)
        self.h_beta = MLP([netdef.k, netdef.latent_dim], ["identity"], rng)
        self.threshold = None  # evt.ThresholdModel once fitted
        self.meta: dict = {}

    @property
    def k(self) -> int:
        return self.netdef.k

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, net in self.subnets():
            for i, (W, b) in enumerate(net.layers):
                out.append((f"{name}.{i}.weight", W))
                out.append((f"{name}.{i}.bias", b))
        return out

    def subnets(self) -> list[tuple[str, MLP]]:
        return [
            ("encoder", self.encoder),
            ("classifier", self.classifier),
            ("decoder", self.decoder),
            ("h_gamma", self.h_gamma),
            ("h_beta", self.h_beta),
        ]

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.netdef.input_dim:
            raise DimensionError(f"expected inputs of width {self.netdef.input_dim}, got shape {X.shape}")
        return X

    def encode(self, X) -> Tensor:
        return self.encoder(Tensor(self._check_input(X)))

    def film(self, labels) -> tuple[Tensor, Tensor]:
        L = Tensor(condition_matrix(labels, self.k))
        return self.h_gamma(L), self.h_beta(L)

    def decode_conditioned(self, z: Tensor, labels) -> Tensor:
        gamma, beta = self.film(labels)
        return self.decoder(film_modulate(z, gamma, beta))


def forward_closed(model: OpenSetModel, X):
    """Return latents, class probabilities and argmax labels for a batch."""
    with no_grad():
        z = model.encode(X)
        logits = model.classifier(z).data
    p = softmax(logits)
    # np.argmax returns the first maximum: ties go to the lowest class index
    y_pred = np.argmax(logits, axis=1)
    return z.data, p, y_pred


def reconstruct_conditioned(model: OpenSetModel, X, labels) -> np.ndarray:
    """Decode each row of ``X`` under the condition vector of its label."""
    X = model._check_input(X)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (X.shape[0],):
        raise DimensionError(f"need one label per row, got {labels.shape} for {X.shape[0]} rows")
    with no_grad():
        z = model.encode(X)
        return model.decode_conditioned(z, labels).data


def l1_errors(X: np.ndarray, X_hat: np.ndarray) -> np.ndarray:
    """Per-sample L1 norm of the residual."""
    return np.abs(X - X_hat).sum(axis=1)
