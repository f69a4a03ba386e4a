"""Active sample selection: reliability weights, diversity filter, output tracker."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import PROB_FLOOR, check_distribution


@dataclass(frozen=True)
class SelectionConfig:
    e0: float
    epsilon: float = 0.05
    alpha_ma: float = 0.1

    def __post_init__(self):
        if not self.e0 > 0:
            raise ValueError("e0 must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if not 0.0 <= self.alpha_ma <= 1.0:
            raise ValueError("alpha_ma must lie in [0, 1]")

    @classmethod
    def for_classes(cls, num_classes: int, e0_factor: float = 0.4, **kwargs) -> "SelectionConfig":
        return cls(e0=e0_factor * math.log(num_classes), **kwargs)

    def to_dict(self) -> dict:
        return {"e0": self.e0, "epsilon": self.epsilon, "alpha_ma": self.alpha_ma}


@dataclass
class SelectionState:
    """Moving average of the predictions used for adaptation so far."""

    m: np.ndarray | None = None
    t: int = 0

    @property
    def empty(self) -> bool:
        return self.m is None

    def copy(self) -> "SelectionState":
        return SelectionState(None if self.m is None else self.m.copy(), self.t)


def prediction_entropy(probs: np.ndarray) -> np.ndarray:
    """Row-wise entropy (numpy, no tape). Matches :func:`autodiff.entropy`."""
    probs = np.asarray(probs, dtype=np.float64)
    return -(probs * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=-1)


def entropy_weight(probs: np.ndarray, cfg: SelectionConfig) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    check_distribution(probs)
    e = float(prediction_entropy(probs))
    return float(np.exp(cfg.e0 - e)) if e < cfg.e0 else 0.0


def cosine_to_tracker(probs: np.ndarray, m: np.ndarray) -> np.ndarray:
    # elementwise products and row sums only, so one row and a whole batch
    # round identically
    probs = np.asarray(probs, dtype=np.float64)
    norms = np.sqrt((probs * probs).sum(axis=-1)) * np.sqrt((m * m).sum())
    assert np.all(norms > 0), "zero-norm prediction vector"
    return (probs * m).sum(axis=-1) / norms


def diversity_weight(probs: np.ndarray, state: SelectionState, cfg: SelectionConfig) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    check_distribution(probs)
    if state.empty:
        return 1
    return int(cosine_to_tracker(probs, state.m) < cfg.epsilon)


def combined_score_eata(probs, state: SelectionState, cfg: SelectionConfig) -> float:
    return entropy_weight(probs, cfg) * diversity_weight(probs, state, cfg)


def combined_score_eatac(probs, state: SelectionState, cfg: SelectionConfig) -> int:
    e = float(prediction_entropy(probs))
    return int(e < cfg.e0) * diversity_weight(probs, state, cfg)


def score_batch(probs: np.ndarray, state: SelectionState, cfg: SelectionConfig,
                kind: str = "eata") -> np.ndarray:
    """Vectorized selection scores for a ``[B, C]`` batch against a frozen tracker.

    ``kind`` is ``"eata"`` (exponential reliability weights) or ``"eatac"``
    (binary indicator).
    """
    probs = np.asarray(probs, dtype=np.float64)
    check_distribution(probs)
    e = prediction_entropy(probs)
    reliable = e < cfg.e0
    if state.empty:
        diverse = np.ones(len(probs), dtype=bool)
    else:
        diverse = cosine_to_tracker(probs, state.m) < cfg.epsilon
    if kind == "eatac":
        return (reliable & diverse).astype(np.float64)
    if kind != "eata":
        raise ValueError(f"unknown score kind {kind!r}")
    weights = np.where(reliable, np.exp(cfg.e0 - np.where(reliable, e, cfg.e0)), 0.0)
    return weights * diverse


def update_moving_average(state: SelectionState, selected_probs: np.ndarray,
                          cfg: SelectionConfig) -> SelectionState:
    """Fold the mean of ``selected_probs`` into the tracker; in place, returns ``state``.

    An empty selection leaves the tracker and counter untouched.
    """
    selected_probs = np.asarray(selected_probs, dtype=np.float64)
    if selected_probs.size == 0:
        return state
    selected_probs = np.atleast_2d(selected_probs)
    check_distribution(selected_probs)
    ybar = selected_probs.mean(axis=0)
    if state.m is None:
        state.m = ybar
    else:
        state.m = cfg.alpha_ma * ybar + (1.0 - cfg.alpha_ma) * state.m
    state.t += 1
    return state
