"""Burned-area embedding and global cross-attention producing the initial ODE state."""
from __future__ import annotations

import math

import numpy as np

from . import arraycore as ac
from .arraycore import Array
from .params import ModelParams, init_mlp2, mlp2

__all__ = ["init_mixer", "encode_ba", "cross_attention", "mix"]


def init_mixer(p: ModelParams, D: int):
    p.add("mixer.ba.w", (1, D), fan_in=1)
    p.add("mixer.ba.b", (D,), fill=0.0)
    for name in ("WQ", "WK", "WV"):
        p.add(f"mixer.{name}", (D, D), fan_in=D)
    init_mlp2(p, "mixer.ffn", D, D, D)
    p.add("mixer.ln.g", (D,), fill=1.0)
    p.add("mixer.ln.b", (D,), fill=0.0)


def encode_ba(ba_classes, p: ModelParams, K: int) -> Array:
    """Rescale classes k -> k/(K-1) and project each cell to D channels."""
    ba = np.asarray(ba_classes)
    if ba.size and (ba.max() >= K or ba.min() < 0):
        raise ValueError(f"burned-area class outside [0, {K - 1}]")
    scaled = Array((ba.astype(np.float64) / (K - 1))[..., None])
    return ac.linear(scaled, p["mixer.ba.w"], p["mixer.ba.b"])


def cross_attention(Hf: Array, Bhat: Array, p: ModelParams, return_weights: bool = False):
    """softmax((H WQ)(B WK)^T / sqrt(D)) (B WV), global over all grid cells.

    Inputs are (..., H, W, D); cells are flattened to tokens.
    """
    if Hf.shape != Bhat.shape:
        raise ValueError(f"cross_attention shape mismatch {Hf.shape} vs {Bhat.shape}")
    lead, D = Hf.shape[:-3], Hf.shape[-1]
    tokens = lead + (Hf.shape[-3] * Hf.shape[-2], D)
    h = ac.reshape(Hf, tokens)
    b = ac.reshape(Bhat, tokens)
    q = ac.linear(h, p["mixer.WQ"])
    k = ac.linear(b, p["mixer.WK"])
    v = ac.linear(b, p["mixer.WV"])
    kt = ac.transpose(k, tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
    weights = ac.softmax(ac.matmul(q, kt) * (1.0 / math.sqrt(D)), axis=-1)
    out = ac.reshape(ac.matmul(weights, v), Hf.shape)
    return (out, weights) if return_weights else out


def mix(Hf: Array, Bhat: Array, p: ModelParams, residual: str = "ba") -> Array:
    """LayerNorm(FFN(CrossAtt(Hf, Bhat))) + Bhat (or + Hf with ``residual='drivers'``)."""
    A = cross_attention(Hf, Bhat, p)
    y = ac.layer_norm(mlp2(p, "mixer.ffn", A), p["mixer.ln.g"], p["mixer.ln.b"])
    return y + (Hf if residual == "drivers" else Bhat)
