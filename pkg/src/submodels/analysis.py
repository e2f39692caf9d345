"""Speaker-embedding export and a linear separability probe over etiologies."""

from __future__ import annotations

import itertools
import json
import os
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import SpeakerProfile
from .model import EmbeddingBundle

PROBE_STEPS = 500
PROBE_LR = 0.1


@dataclass(frozen=True)
class EmbeddingRecord:
    speaker_id: int
    etiology: int | None
    severity: float | None
    vector: tuple[float, ...]

    def to_json(self) -> str:
        return json.dumps({"speaker_id": self.speaker_id, "etiology": self.etiology,
                           "severity": self.severity, "vector": list(self.vector)}, sort_keys=True)


def embedding_vectors(eb: EmbeddingBundle, profiles: Mapping[int, SpeakerProfile] | None = None) -> list[EmbeddingRecord]:
    """One flattened (L*M) vector per speaker: the per-layer M-rows concatenated in layer order."""
    if eb is None or eb.embedding.value.size == 0:
        raise ValueError("export_embeddings: embedding bundle is missing or empty")
    profiles = profiles or {}
    out = []
    for sid in eb.speaker_ids:
        prof = profiles.get(sid)
        vec = eb.row(sid).reshape(-1)
        out.append(EmbeddingRecord(sid, prof.etiology if prof else None,
                                   prof.severity if prof else None,
                                   tuple(float(v) for v in vec)))
    return out


def export_embeddings(eb: EmbeddingBundle, out: str | os.PathLike,
                      profiles: Mapping[int, SpeakerProfile] | None = None) -> list[EmbeddingRecord]:
    records = embedding_vectors(eb, profiles)
    Path(out).write_text("".join(r.to_json() + "\n" for r in records))
    return records


def read_embeddings(path: str | os.PathLike) -> list[EmbeddingRecord]:
    recs = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            recs.append(EmbeddingRecord(d["speaker_id"], d.get("etiology"), d.get("severity"),
                                        tuple(d["vector"])))
    return recs


def _fit_logistic(x: np.ndarray, y: np.ndarray, steps: int, lr: float) -> tuple[np.ndarray, float]:
    w = np.zeros(x.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(steps):
        z = np.clip(x @ w + b, -30.0, 30.0)
        p = 1.0 / (1.0 + np.exp(-z))
        err = p - y
        w -= lr * (x.T @ err) / n
        b -= lr * err.mean()
    return w, b


def loo_accuracy(x: np.ndarray, y: np.ndarray, steps: int = PROBE_STEPS, lr: float = PROBE_LR) -> float:
    """Leave-one-out accuracy of a gradient-trained binary logistic regression.

    Features are z-scored with the training fold's statistics.
    """
    correct = 0
    for i in range(len(y)):
        keep = np.arange(len(y)) != i
        mu = x[keep].mean(axis=0)
        sd = x[keep].std(axis=0)
        sd[sd == 0] = 1.0
        w, b = _fit_logistic((x[keep] - mu) / sd, y[keep], steps, lr)
        pred = float(((x[i] - mu) / sd) @ w + b) > 0
        correct += pred == bool(y[i])
    return correct / len(y)


@dataclass
class ProbeResult:
    pairs: dict[tuple[int, int], float]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.pairs.values())

    def to_text(self) -> str:
        lines = ["etiology_a\tetiology_b\tloo_accuracy"]
        lines += [f"{a}\t{b}\t{acc:.4f}" for (a, b), acc in sorted(self.pairs.items())]
        lines.append(f"mean\t\t{self.mean:.4f}")
        return "\n".join(lines) + "\n"


def probe_separability(vectors: Sequence[Sequence[float]], labels: Sequence[int],
                       steps: int = PROBE_STEPS, lr: float = PROBE_LR,
                       min_per_class: int = 2) -> ProbeResult:
    """Pairwise leave-one-out logistic-regression accuracy between etiology classes."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ValueError("probe_separability: need at least two etiologies")
    for c in classes:
        if np.sum(labels == c) < min_per_class:
            raise ValueError(f"probe_separability: etiology {c} has fewer than {min_per_class} speakers")
    pairs = {}
    for a, b in itertools.combinations(classes, 2):
        sel = (labels == a) | (labels == b)
        pairs[(a, b)] = loo_accuracy(x[sel], (labels[sel] == b).astype(np.float64), steps, lr)
    return ProbeResult(pairs)
