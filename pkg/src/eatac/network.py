"""Residual MLP classifier with normalization layers and stochastic depth."""

from __future__ import annotations

from contextlib import contextmanager
import dataclasses
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NormMode = Literal["batch-norm", "layer-norm"]
# "running": normalize with stored statistics (deployment / source evaluation)
# "batch":   normalize with current-batch statistics, statistics left untouched
# "train":   current-batch statistics and running statistics are updated
StatsMode = Literal["running", "batch", "train"]


class NormLayer:
    def __init__(self, width: int, mode: NormMode = "batch-norm", eps: float = 1e-5,
                 momentum: float = 0.1):
        if mode not in ("batch-norm", "layer-norm"):
            raise ValueError(f"unknown norm mode {mode!r}")
        self.mode = mode
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.capture: list[np.ndarray] | None = None

    def __call__(self, x: Tensor, stats: StatsMode) -> Tensor:
        if self.capture is not None:
            self.capture.append(x.data.copy())
        if self.mode == "layer-norm":
            xhat = ad.normalize(x, axis=1, eps=self.eps)
        elif stats == "running":
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = ad.mul(ad.add(x, Tensor(-self.running_mean)), Tensor(inv))
        else:
            xhat = ad.normalize(x, axis=0, eps=self.eps)
            if stats == "train":
                n = x.shape[0]
                var = x.data.var(axis=0) * (n / max(n - 1, 1))
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * x.data.mean(axis=0)
                self.running_var = (1 - m) * self.running_var + m * var
        return ad.add(ad.mul(xhat, self.gamma), self.beta)


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)))
        self.bias = Tensor(np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class ResidualBlock:
    """``h + fc2(relu(norm(fc1(h))))``; a dropped block is the identity."""

    def __init__(self, width: int, mode: NormMode, rng: np.random.Generator):
        self.fc1 = Linear(width, width, rng)
        self.norm = NormLayer(width, mode)
        self.fc2 = Linear(width, width, rng)
        self.fc2.weight.data *= 0.5  # keep the residual stream from blowing up at init

    def __call__(self, h: Tensor, stats: StatsMode) -> Tensor:
        branch = self.fc2(ad.relu(self.norm(self.fc1(h), stats)))
        return ad.add(h, branch)


@dataclass(frozen=True)
class Architecture:
    input_dim: int = 32
    num_classes: int = 10
    width: int = 64
    num_blocks: int = 8
    norm: NormMode = "batch-norm"
    input_norm: bool = True

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SubNetworkMask:
    keep: tuple[bool, ...]
    p_drop: float = 0.0

    @classmethod
    def all_keep(cls, num_blocks: int) -> "SubNetworkMask":
        return cls(tuple([True] * num_blocks), 0.0)

    @property
    def kept_fraction(self) -> float:
        return float(np.mean(self.keep)) if self.keep else 1.0


class Model:
    """Stem ([norm], linear, norm, relu) -> residual blocks -> head (norm, linear).

    Every parameter is registered under a stable dotted name; only the
    normalization scales and shifts are adaptable.
    """

    def __init__(self, arch: Architecture = Architecture(), seed: int = 0):
        self.arch = arch
        self.seed = seed
        rng = np.random.default_rng(seed)
        w = arch.width
        self.input_norm = NormLayer(arch.input_dim, arch.norm) if arch.input_norm else None
        self.stem = Linear(arch.input_dim, w, rng)
        self.stem_norm = NormLayer(w, arch.norm)
        self.blocks = [ResidualBlock(w, arch.norm, rng) for _ in range(arch.num_blocks)]
        self.head_norm = NormLayer(w, arch.norm)
        self.head = Linear(w, arch.num_classes, rng)
        self.stats: StatsMode = "running"

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def norm_layers(self) -> list[tuple[str, NormLayer]]:
        layers = [("input_norm", self.input_norm)] if self.input_norm else []
        layers.append(("stem_norm", self.stem_norm))
        layers += [(f"blocks.{i}.norm", b.norm) for i, b in enumerate(self.blocks)]
        layers.append(("head_norm", self.head_norm))
        return layers

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = []
        if self.input_norm:
            params += [("input_norm.gamma", self.input_norm.gamma), ("input_norm.beta", self.input_norm.beta)]
        params += [("stem.weight", self.stem.weight), ("stem.bias", self.stem.bias)]
        params += [("stem_norm.gamma", self.stem_norm.gamma), ("stem_norm.beta", self.stem_norm.beta)]
        for i, b in enumerate(self.blocks):
            params += [
                (f"blocks.{i}.fc1.weight", b.fc1.weight), (f"blocks.{i}.fc1.bias", b.fc1.bias),
                (f"blocks.{i}.norm.gamma", b.norm.gamma), (f"blocks.{i}.norm.beta", b.norm.beta),
                (f"blocks.{i}.fc2.weight", b.fc2.weight), (f"blocks.{i}.fc2.bias", b.fc2.bias),
            ]
        params += [("head_norm.gamma", self.head_norm.gamma), ("head_norm.beta", self.head_norm.beta)]
        params += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return params

    def adaptable_names(self) -> list[str]:
        names = []
        for name, _ in self.norm_layers():
            names += [f"{name}.gamma", f"{name}.beta"]
        return names

    def set_trainable(self, which: Literal["all", "adaptable", "none"]) -> None:
        adaptable = set(self.adaptable_names())
        for name, p in self.named_parameters():
            p.requires_grad = which == "all" or (which == "adaptable" and name in adaptable)

    @contextmanager
    def trainable(self, which: Literal["all", "adaptable", "none"]):
        saved = [p.requires_grad for _, p in self.named_parameters()]
        self.set_trainable(which)
        try:
            yield self
        finally:
            for (_, p), flag in zip(self.named_parameters(), saved):
                p.requires_grad = flag

    # -- state -------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, layer in self.norm_layers():
            if layer.mode == "batch-norm":
                state[f"{name}.running_mean"] = layer.running_mean.copy()
                state[f"{name}.running_var"] = layer.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, layer in self.norm_layers():
            if layer.mode == "batch-norm":
                layer.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
                layer.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)

    def copy(self) -> "Model":
        clone = Model(self.arch, self.seed)
        clone.load_state_dict(self.state_dict())
        clone.stats = self.stats
        return clone

    # -- forward -----------------------------------------------------------

    def __call__(self, x, mask: SubNetworkMask | None = None,
                 stats: StatsMode | None = None) -> Tensor:
        return predict(self, x, mask, stats)


def predict(model: Model, batch, mask: SubNetworkMask | None = None,
            stats: StatsMode | None = None) -> Tensor:
    """Logits ``[B, C]``; blocks switched off in ``mask`` are skipped entirely."""
    x = ad.as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise ad.ShapeError(f"expected input [B, {model.arch.input_dim}], got {x.shape}")
    stats = stats or model.stats
    if mask is not None and len(mask.keep) != len(model.blocks):
        raise ValueError("mask length does not match the number of blocks")
    if model.input_norm is not None:
        x = model.input_norm(x, stats)
    h = ad.relu(model.stem_norm(model.stem(x), stats))
    for i, block in enumerate(model.blocks):
        if mask is None or mask.keep[i]:
            h = block(h, stats)
    return model.head(model.head_norm(h, stats))


def sample_subnetwork(model: Model, p_drop: float, rng) -> SubNetworkMask:
    """Drop each residual block independently with probability ``p_drop``.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"p_drop must lie in [0, 1), got {p_drop}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    draws = rng.random(len(model.blocks))
    return SubNetworkMask(tuple(bool(u >= p_drop) for u in draws), p_drop)


def adaptable_parameters(model: Model) -> list[Tensor]:
    params = dict(model.named_parameters())
    return [params[name] for name in model.adaptable_names()]


def finalize_running_stats(model: Model, x: np.ndarray, batch_size: int = 256) -> None:
    """Replace running statistics with exact full-network statistics over ``x``.

    Layers are finalized front to back so each sees inputs normalized by the
    already-finalized statistics of the layers before it.
    """
    if model.arch.norm != "batch-norm":
        return
    for _, layer in model.norm_layers():
        layer.capture = []
        try:
            for start in range(0, len(x), batch_size):
                predict(model, x[start:start + batch_size], stats="running")
            acts = np.concatenate(layer.capture)
        finally:
            layer.capture = None
        layer.running_mean = acts.mean(axis=0)
        layer.running_var = acts.var(axis=0)
