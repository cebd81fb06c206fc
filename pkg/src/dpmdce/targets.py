"""Counterfactual target-class choice.

Two automatic strategies: pick the class whose last-layer activation
distributions sit closest to the source class in summed Wasserstein distance,
or pick the class whose local prototype (mean of the nearest topK embeddings)
is closest to the instance's own embedding. Ties break to the smallest class
index, and the source class itself is never returned.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .featstat import StatsFile
from .importance import wasserstein_1d
from .nn import DenseNet, forward_batch, forward_with_trace, output_batch

DEFAULT_TOP_K = 20


@dataclass
class TargetChoice:
    source_class: int
    target_class: int
    strategy: str
    scores: dict[int, float]  # candidate class -> score (lower is better)

    def __post_init__(self):
        if self.target_class == self.source_class:
            raise ValueError("target must differ from the source class")
        if self.source_class in self.scores:
            raise ValueError("scores must cover only candidate classes")


def _argmin_class(scores: dict[int, float]) -> int:
    best = min(scores.values())
    return min(c for c, s in scores.items() if s == best)


def strategy1_distribution(source_class: int, stats: StatsFile) -> TargetChoice:
    """Closest class by summed last-layer Wasserstein distance."""
    fits = stats.last_layer_fits()
    if source_class not in fits:
        raise ValueError(f"class {source_class} has no last-layer stats")
    src = fits[source_class]
    scores: dict[int, float] = {}
    for c in stats.classes():
        if c == source_class:
            continue
        if c not in fits:
            raise ValueError(f"class {c} has no last-layer stats")
        scores[c] = float(sum(wasserstein_1d(src[j], fits[c][j]) for j in range(len(src))))
    if not scores:
        raise ValueError("no candidate classes")
    return TargetChoice(source_class, _argmin_class(scores), "strategy1", scores)


def strategy2_proto(
    x0,
    blackbox: DenseNet,
    dataset,
    top_k: int = DEFAULT_TOP_K,
    encoder: DenseNet | None = None,
) -> TargetChoice:
    """Closest class prototype, built from the topK nearest class members.

    Classes are formed by the black box's own predictions. Embeddings come
    from the black box's feature extractor unless a separate encoder (for
    instance an autoencoder's front half) is supplied.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if encoder is None:
        encoder = blackbox.feature_extractor()
    e0 = forward_with_trace(encoder, x0).logits
    source_class = int(np.argmax(forward_with_trace(blackbox, x0).logits))

    preds = np.argmax(output_batch(blackbox, dataset.images), axis=1)
    emb = forward_batch(encoder, dataset.images)[-1]

    scores: dict[int, float] = {}
    for c in range(blackbox.out_dim):
        if c == source_class:
            continue
        members = emb[preds == c]
        if members.shape[0] == 0:
            warnings.warn(f"class {c} has no predicted members; skipping", stacklevel=2)
            continue
        d2 = np.sum((members - e0) ** 2, axis=1)
        k = min(top_k, members.shape[0])
        proto = members[np.argsort(d2, kind="stable")[:k]].mean(axis=0)
        scores[c] = float(np.sum((e0 - proto) ** 2))
    if not scores:
        raise ValueError("every candidate class is empty")
    return TargetChoice(source_class, _argmin_class(scores), "strategy2", scores)


def class_prototype(x0, blackbox: DenseNet, dataset, target: int,
                    top_k: int = DEFAULT_TOP_K, encoder: DenseNet | None = None) -> np.ndarray:
    """The strategy-2 prototype of one specific class, for prototype-guided solvers."""
    x0 = np.asarray(x0, dtype=np.float64)
    if encoder is None:
        encoder = blackbox.feature_extractor()
    e0 = forward_with_trace(encoder, x0).logits
    preds = np.argmax(output_batch(blackbox, dataset.images), axis=1)
    emb = forward_batch(encoder, dataset.images)[-1]
    members = emb[preds == target]
    if members.shape[0] == 0:
        raise ValueError(f"class {target} has no predicted members")
    d2 = np.sum((members - e0) ** 2, axis=1)
    k = min(top_k, members.shape[0])
    return members[np.argsort(d2, kind="stable")[:k]].mean(axis=0)
