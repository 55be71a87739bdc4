"""Climate-informed gated fusion of driver fields and global index signals."""
from __future__ import annotations

import numpy as np

from . import arraycore as ac
from .arraycore import Array
from .params import ModelParams, init_mlp2, mlp2

__all__ = ["init_fusion", "encode_drivers", "climate_attention", "gated_fuse", "fuse"]


def init_fusion(p: ModelParams, C_x: int, C_z: int, D: int, modes: int):
    init_mlp2(p, "fusion.enc", C_x, D, D)
    for w in (1, 2, 3):
        init_mlp2(p, f"fusion.att{w}", C_z, max(1, D // 2), D)
    p.add("fusion.k1.w", (D, D), fan_in=D)
    p.add("fusion.k1.b", (D,), fill=0.0)
    p.add("fusion.k2.w", (3, 3, D), fan_in=9)
    p.add("fusion.k3.w", (modes, modes, D, 2), fan_in=D)


def encode_drivers(drivers, p: ModelParams) -> Array:
    """Per-cell MLP from C_x driver channels to the D-dim latent field."""
    drivers = ac.as_array(drivers)
    c_in = p["fusion.enc.W1"].shape[0]
    if drivers.shape[-1] != c_in:
        raise ValueError(f"encode_drivers: {drivers.shape[-1]} channels, expected {c_in}")
    return mlp2(p, "fusion.enc", drivers)


def climate_attention(indices, p: ModelParams, squash: bool = False) -> list[Array]:
    """Three channel-weight vectors, one per operator branch.

    Outputs are unbounded unless ``squash`` applies a sigmoid.
    """
    indices = ac.as_array(indices)
    c_in = p["fusion.att1.W1"].shape[0]
    if indices.shape[-1] != c_in:
        raise ValueError(f"climate_attention: {indices.shape[-1]} indices, expected {c_in}")
    out = [mlp2(p, f"fusion.att{w}", indices) for w in (1, 2, 3)]
    return [ac.sigmoid(a) for a in out] if squash else out


def gated_fuse(Z: Array, a: list[Array], p: ModelParams) -> Array:
    """Z + sum_w a_w * kappa_w(Z) with a_w broadcast over the grid.

    ``Z`` is (..., H, W, D); each ``a_w`` is (..., D).
    """
    branches = [
        ac.conv_1x1(Z, p["fusion.k1.w"], p["fusion.k1.b"]),
        ac.depthwise_conv3x3(Z, p["fusion.k2.w"]),
        ac.spectral_conv2d(Z, p["fusion.k3.w"]),
    ]
    out = Z
    for a_w, U in zip(a, branches):
        a_w = ac.as_array(a_w)
        gate = ac.reshape(a_w, a_w.shape[:-1] + (1, 1, a_w.shape[-1]))
        out = out + gate * U
    return out


def fuse(drivers, indices, p: ModelParams, squash: bool = False) -> Array:
    Z = encode_drivers(drivers, p)
    return gated_fuse(Z, climate_attention(indices, p, squash=squash), p)


def default_modes(H: int, W: int, modes: int = 8) -> int:
    return int(np.clip(modes, 1, min(H, W)))
