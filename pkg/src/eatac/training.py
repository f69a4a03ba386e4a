"""Source-model training with stochastic depth."""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .engine import SGD
from .network import Architecture, Model, finalize_running_stats, predict, sample_subnetwork

log = logging.getLogger(__name__)


def train_source(dataset: Dataset, arch: Architecture | None = None, epochs: int = 10,
                 seed: int = 0, lr: float = 0.05, momentum: float = 0.9,
                 batch_size: int = 64, p_drop: float = 0.2) -> Model:
    """Cross-entropy training of every parameter; running statistics are finalized at the end."""
    spec = dataset.spec
    arch = arch or Architecture(input_dim=spec.input_dim, num_classes=spec.num_classes)
    model = Model(arch, seed=seed)
    if epochs == 0:
        return model
    rng = np.random.default_rng([seed, 1])
    x, y = dataset.train.x, dataset.train.y
    params = [p for _, p in model.named_parameters()]
    opt = SGD(params, lr, momentum)
    total_steps = epochs * int(np.ceil(len(x) / batch_size))
    step = 0
    with model.trainable("all"):
        for epoch in range(epochs):
            order = rng.permutation(len(x))
            running = 0.0
            for start in range(0, len(x), batch_size):
                idx = order[start:start + batch_size]
                if len(idx) < 2:
                    continue
                mask = sample_subnetwork(model, p_drop, rng)
                logits = predict(model, x[idx], mask=mask, stats="train")
                loss = ad.mean(ad.cross_entropy(logits, y[idx]))
                if not np.isfinite(loss.item()):
                    raise ad.NonFiniteError(f"training diverged at epoch {epoch}")
                # cosine decay
                opt.lr = lr * 0.5 * (1 + np.cos(np.pi * step / total_steps))
                opt.step(ad.grad(loss, params))
                running += loss.item() * len(idx)
                step += 1
            log.debug("epoch %d loss %.4f", epoch, running / len(x))
    finalize_running_stats(model, x)
    model.set_trainable("adaptable")
    return model
