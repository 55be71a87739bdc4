"""Per-cell class decoder and inverse-frequency weighted cross-entropy."""
from __future__ import annotations

import numpy as np

from . import arraycore as ac
from .arraycore import Array
from .params import ModelParams, init_mlp2, mlp2

__all__ = ["init_head", "decode", "fire_probability", "class_weights", "weighted_ce"]

LOG_CLAMP = 1e-12


def init_head(p: ModelParams, D: int, K: int, binary: bool = False):
    init_mlp2(p, "head.dec", D, D, 1 if binary else K)


def decode(fine_state: Array, p: ModelParams, grid: tuple[int, int], binary: bool = False,
           return_logits: bool = False):
    """Map (..., H*W, D) node states to (..., H, W, K) class probabilities.

    ``binary=True`` uses a single sigmoid logit and returns the two-class map
    [1 - p, p].
    """
    H, W = grid
    logits = mlp2(p, "head.dec", fine_state)
    logits = ac.reshape(logits, logits.shape[:-2] + (H, W, logits.shape[-1]))
    if binary:
        pf = ac.sigmoid(logits)
        probs = ac.concat([1.0 - pf, pf], axis=-1)
    else:
        probs = ac.softmax(logits, axis=-1)
    return (probs, logits) if return_logits else probs


def fire_probability(probs) -> np.ndarray:
    """P(any fire) = 1 - P(class 0)."""
    data = probs.data if isinstance(probs, Array) else np.asarray(probs)
    return 1.0 - data[..., 0]


def class_weights(train_labels, K: int) -> np.ndarray:
    """w_k = N / (K N_k), absent classes take the rarest present class's weight, mean 1."""
    labels = np.asarray(train_labels).ravel()
    if labels.size == 0:
        raise ValueError("class_weights needs at least one label")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels outside [0, {K - 1}]")
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    present = counts > 0
    w = np.zeros(K)
    w[present] = labels.size / (K * counts[present])
    w[~present] = w[present].max()
    return w / w.mean()


def weighted_ce(probs: Array, labels, weights) -> Array:
    """-(1/cells) sum_cells w_y log p_y, with p clamped below at 1e-12."""
    labels = np.asarray(labels).astype(np.int64)
    K = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels outside [0, {K - 1}]")
    if labels.shape != probs.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    py = ac.take_last(probs, labels)
    w = np.asarray(weights, dtype=np.float64)[labels]
    return ac.mean(ac.log(ac.clip_min(py, LOG_CLAMP)) * Array(-w))
