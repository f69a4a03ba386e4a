"""Accuracy, expected calibration error, forgetting probes and disagreement audits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import Model, predict


class EceAccumulator:
    """Equal-width confidence bins over (0, 1]; confidence 0 falls in the first bin."""

    def __init__(self, bins: int = 15):
        if bins < 1:
            raise ValueError("need at least one bin")
        self.bins = bins
        self.conf_sum = np.zeros(bins)
        self.correct_sum = np.zeros(bins)
        self.count = np.zeros(bins, dtype=np.int64)

    def bin_index(self, confidence: np.ndarray) -> np.ndarray:
        confidence = np.asarray(confidence, dtype=np.float64)
        idx = np.ceil(confidence * self.bins).astype(np.int64) - 1
        return np.clip(idx, 0, self.bins - 1)

    def update(self, confidence, correct) -> "EceAccumulator":
        confidence = np.atleast_1d(np.asarray(confidence, dtype=np.float64))
        correct = np.atleast_1d(np.asarray(correct, dtype=np.float64))
        if confidence.shape != correct.shape:
            raise ValueError("confidence and correctness must align")
        if np.any((confidence < 0) | (confidence > 1)):
            raise ValueError("confidences must lie in [0, 1]")
        idx = self.bin_index(confidence)
        # sequential accumulation keeps one-at-a-time and batched feeding identical
        for b, c, k in zip(idx, confidence, correct):
            self.conf_sum[b] += c
            self.correct_sum[b] += k
            self.count[b] += 1
        return self

    def merge(self, other: "EceAccumulator") -> "EceAccumulator":
        if other.bins != self.bins:
            raise ValueError("bin counts differ")
        out = EceAccumulator(self.bins)
        out.conf_sum = self.conf_sum + other.conf_sum
        out.correct_sum = self.correct_sum + other.correct_sum
        out.count = self.count + other.count
        return out

    @property
    def total(self) -> int:
        return int(self.count.sum())

    def value(self) -> float:
        n = self.total
        if n == 0:
            raise ValueError("ECE of an empty prediction list")
        return float(np.abs(self.correct_sum - self.conf_sum).sum() / n)

    def rows(self) -> list[dict]:
        """Reliability-diagram data, one row per bin."""
        out = []
        for b in range(self.bins):
            n = int(self.count[b])
            out.append({
                "bin": b,
                "lower": b / self.bins,
                "upper": (b + 1) / self.bins,
                "count": n,
                "mean_confidence": self.conf_sum[b] / n if n else "",
                "accuracy": self.correct_sum[b] / n if n else "",
            })
        return out


def ece(predictions, bins: int = 15) -> float:
    """ECE of ``(confidence, correct)`` pairs."""
    predictions = list(predictions)
    if not predictions:
        raise ValueError("ECE of an empty prediction list")
    conf, correct = zip(*predictions)
    return EceAccumulator(bins).update(conf, correct).value()


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(pred == labels))


def forgetting_probe(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Clean accuracy with frozen parameters and running statistics; the model is not touched."""
    if len(x) == 0:
        raise ValueError("empty probe set")
    preds = []
    for start in range(0, len(x), batch_size):
        logits = predict(model, x[start:start + batch_size], stats="running").data
        preds.append(np.argmax(logits, axis=1))
    return accuracy(np.concatenate(preds), y)


def disagreement_audit(full_argmax, sub_argmax, sub_correct) -> tuple[int, float | None]:
    """``(#uncertain, indicator accuracy)``.

    Uncertain samples are those where the full network and the sub-network
    disagree; indicator accuracy is the share of them the sub-network gets
    wrong (``None`` when nothing disagrees).
    """
    full_argmax, sub_argmax = np.asarray(full_argmax), np.asarray(sub_argmax)
    sub_correct = np.asarray(sub_correct, dtype=bool)
    if not (full_argmax.shape == sub_argmax.shape == sub_correct.shape):
        raise ValueError("audit inputs must have the same length")
    mismatch = full_argmax != sub_argmax
    n = int(mismatch.sum())
    if n == 0:
        return 0, None
    return n, float(np.mean(~sub_correct[mismatch]))


@dataclass
class BatchRecord:
    index: int
    domain: str
    size: int
    correct: int
    mean_confidence: float
    selected: int
    forwards: int
    backwards: int
    losses: dict = field(default_factory=dict)
    uncertain: int | None = None
    sub_wrong_on_uncertain: int | None = None

    @property
    def accuracy(self) -> float:
        return self.correct / self.size


@dataclass
class RunReport:
    config: dict
    seed: int
    batches: list[BatchRecord] = field(default_factory=list)
    ece_bins: EceAccumulator = field(default_factory=EceAccumulator)
    domain_ece: dict = field(default_factory=dict)
    probes: list[dict] = field(default_factory=list)
    lineage: dict = field(default_factory=dict)

    def add(self, record: BatchRecord, confidence: np.ndarray, correct: np.ndarray) -> None:
        self.batches.append(record)
        self.ece_bins.update(confidence, correct)
        acc = self.domain_ece.setdefault(record.domain, EceAccumulator(self.ece_bins.bins))
        acc.update(confidence, correct)

    @property
    def total(self) -> int:
        return sum(b.size for b in self.batches)

    @property
    def accuracy(self) -> float:
        return sum(b.correct for b in self.batches) / self.total

    @property
    def ece(self) -> float:
        return self.ece_bins.value()

    @property
    def forwards(self) -> int:
        return sum(b.forwards for b in self.batches)

    @property
    def backwards(self) -> int:
        return sum(b.backwards for b in self.batches)

    def domains(self) -> list[str]:
        seen: list[str] = []
        for b in self.batches:
            if b.domain not in seen:
                seen.append(b.domain)
        return seen

    def per_domain(self) -> list[dict]:
        rows = []
        for name in self.domains():
            recs = [b for b in self.batches if b.domain == name]
            n = sum(b.size for b in recs)
            rows.append({
                "domain": name,
                "samples": n,
                "accuracy": sum(b.correct for b in recs) / n,
                "ece": self.domain_ece[name].value(),
                "forwards": sum(b.forwards for b in recs),
                "backwards": sum(b.backwards for b in recs),
            })
        return rows

    def summary(self) -> dict:
        return {
            "method": self.config.get("adapt", {}).get("method"),
            "scenario": self.config.get("adapt", {}).get("scenario"),
            "seed": self.seed,
            "samples": self.total,
            "accuracy": self.accuracy,
            "ece": self.ece,
            "forwards": self.forwards,
            "backwards": self.backwards,
            "domains": self.per_domain(),
            "probes": self.probes,
            "config": self.config,
            "lineage": self.lineage,
        }


def audit_windows(report: RunReport, fraction: float = 0.1) -> dict:
    """Disagreement audit over the first and last ``fraction`` of the stream's samples."""
    recs = [b for b in report.batches if b.uncertain is not None]
    total = sum(b.size for b in recs)
    cut = max(1, int(math.ceil(fraction * total)))

    def window(records):
        seen = uncertain = wrong = 0
        for b in records:
            if seen >= cut:
                break
            seen += b.size
            uncertain += b.uncertain
            wrong += b.sub_wrong_on_uncertain
        return {"samples": seen, "uncertain": uncertain,
                "indicator_accuracy": wrong / uncertain if uncertain else None}

    return {"first": window(recs), "last": window(list(reversed(recs)))}
