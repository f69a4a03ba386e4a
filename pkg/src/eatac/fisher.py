"""Diagonal Fisher importance from pseudo-labelled in-distribution samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import Model, adaptable_parameters, predict


@dataclass(frozen=True)
class FisherMap:
    """Per-scalar importance and anchor values, laid out like ``adaptable_parameters``."""

    omega: tuple[np.ndarray, ...]
    anchor: tuple[np.ndarray, ...]
    num_samples: int

    def __post_init__(self):
        for arr in (*self.omega, *self.anchor):
            arr.setflags(write=False)

    @classmethod
    def zeros_like(cls, model: Model) -> "FisherMap":
        params = adaptable_parameters(model)
        return cls(tuple(np.zeros_like(p.data) for p in params),
                   tuple(p.data.copy() for p in params), 0)

    def scaled(self, c: float) -> "FisherMap":
        return FisherMap(tuple(w * c for w in self.omega), self.anchor, self.num_samples)


def pseudo_labels(model: Model, x: np.ndarray) -> np.ndarray:
    """Hard labels of the source model (running statistics); ties go to the lowest index."""
    logits = predict(model, x, stats="running").data
    return np.argmax(logits, axis=1)


def estimate_fisher(model: Model, id_samples: np.ndarray) -> FisherMap:
    """Mean squared per-sample cross-entropy gradient w.r.t. the adaptable parameters.

    Each sample gets its own tape; squaring the gradient of a batch-mean loss
    would give a different (and wrong) quantity.
    """
    id_samples = np.asarray(id_samples, dtype=np.float64)
    if id_samples.size == 0:
        raise ValueError("Fisher estimation needs at least one sample")
    id_samples = np.atleast_2d(id_samples)
    q = len(id_samples)
    params = adaptable_parameters(model)
    labels = pseudo_labels(model, id_samples)
    omega = [np.zeros_like(p.data) for p in params]
    with model.trainable("adaptable"):
        for i in range(q):
            logits = predict(model, id_samples[i:i + 1], stats="running")
            loss = ad.sum(ad.cross_entropy(logits, labels[i:i + 1]))
            for acc, g in zip(omega, ad.grad(loss, params)):
                acc += g * g
    return FisherMap(tuple(w / q for w in omega), tuple(p.data.copy() for p in params), q)


def regularizer(current: list[Tensor], fisher: FisherMap) -> Tensor:
    """Importance-weighted squared distance to the anchor, differentiable in ``current``."""
    if len(current) != len(fisher.omega):
        raise ValueError("parameter list does not match the Fisher layout")
    total = ad.Tensor(0.0)
    for p, w, anchor in zip(current, fisher.omega, fisher.anchor):
        if p.shape != w.shape:
            raise ValueError(f"layout mismatch: {p.shape} vs {w.shape}")
        diff = ad.add(p, ad.Tensor(-anchor))
        total = ad.add(total, ad.sum(ad.mul(ad.mul(diff, diff), ad.Tensor(w))))
    return total
