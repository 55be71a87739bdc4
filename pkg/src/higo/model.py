"""The assembled forecaster: fusion -> mixer -> hierarchical graph ODE -> decoder."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import arraycore as ac
from .arraycore import Array
from .dynamics import evolve, init_dynamics
from .fusion import default_modes, fuse, init_fusion
from .head import decode, init_head
from .hiergraph import build_hierarchy
from .mixer import encode_ba, init_mixer, mix
from .odeint import SolverConfig
from .params import ModelParams

__all__ = ["ModelConfig", "HiGO", "ForecastResult"]


@dataclass
class ModelConfig:
    H: int = 16
    W: int = 32
    C_x: int = 6
    C_z: int = 4
    K: int = 7
    D: int = 32
    L: int = 3
    modes: int = 8
    mp_mode: str = "adaptive"
    squash_attention: bool = False
    residual: str = "ba"
    time_input: bool = False
    binary_head: bool = False
    wrap: bool = False

    def validate(self):
        if self.mp_mode not in ("adaptive", "mean"):
            raise ValueError(f"mp_mode must be 'adaptive' or 'mean', got {self.mp_mode!r}")
        if self.residual not in ("ba", "drivers"):
            raise ValueError(f"residual must be 'ba' or 'drivers', got {self.residual!r}")
        if self.binary_head and self.K != 2:
            raise ValueError("the sigmoid head requires K=2")
        if self.D < 1 or self.L < 1:
            raise ValueError("D and L must be >= 1")


@dataclass
class ForecastResult:
    probs: np.ndarray          # (H, W, K) or (B, H, W, K)
    horizon: float             # in 8-day steps
    solver_trace: list

    @property
    def fire_prob(self) -> np.ndarray:
        return 1.0 - self.probs[..., 0]


class HiGO:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.modes = default_modes(cfg.H, cfg.W, cfg.modes)
        self.hier = build_hierarchy(cfg.H, cfg.W, cfg.L, wrap=cfg.wrap)
        self.params = ModelParams(np.random.default_rng(seed))
        init_fusion(self.params, cfg.C_x, cfg.C_z, cfg.D, self.modes)
        init_mixer(self.params, cfg.D)
        init_dynamics(self.params, cfg.D, cfg.L, cfg.time_input)
        init_head(self.params, cfg.D, cfg.K, cfg.binary_head)

    def initial_state(self, drivers, indices, ba) -> Array:
        """Fused, mixed node state X_t as (B, H*W, D)."""
        cfg = self.cfg
        drivers = np.asarray(drivers, dtype=np.float64)
        if drivers.shape[-3:-1] != (cfg.H, cfg.W):
            raise ValueError(f"driver grid {drivers.shape[-3:-1]} != model grid {(cfg.H, cfg.W)}")
        Hf = fuse(drivers, indices, self.params, squash=cfg.squash_attention)
        Bhat = encode_ba(ba, self.params, cfg.K)
        X = mix(Hf, Bhat, self.params, residual=cfg.residual)
        return ac.reshape(X, X.shape[:-3] + (cfg.H * cfg.W, cfg.D))

    def forward(self, drivers, indices, ba, horizon: float, solver: SolverConfig,
                t_eval=(), trace: list | None = None):
        """Class probabilities at ``horizon`` (and at each ``t_eval``), inputs batched on axis 0."""
        X = self.initial_state(drivers, indices, ba)
        end, mids = evolve(X, self.hier, self.params, (0.0, float(horizon)), solver,
                           t_eval=t_eval, mode=self.cfg.mp_mode,
                           time_input=self.cfg.time_input, trace=trace)
        grid = (self.cfg.H, self.cfg.W)
        dec = lambda s: decode(s, self.params, grid, binary=self.cfg.binary_head)  # noqa: E731
        return dec(end), [dec(m) for m in mids]

    def predict(self, drivers, indices, ba, horizons, solver: SolverConfig) -> list[ForecastResult]:
        """Inference for one sample at several horizons (in 8-day steps) with one solve.

        The solve runs to max(horizons); shorter horizons come from the
        solver's dense output.
        """
        hs = [float(h) for h in horizons]
        t_end = max(hs)
        interior = sorted({h for h in hs if h < t_end})
        trace: list = []
        with ac.no_grad():
            end, mids = self.forward(drivers[None], indices[None], ba[None], t_end, solver,
                                     t_eval=interior, trace=trace)
        by_time = {t_end: end.data[0]}
        by_time.update({t: m.data[0] for t, m in zip(interior, mids)})
        return [ForecastResult(by_time[h], h, trace) for h in hs]

    def config_dict(self) -> dict:
        return asdict(self.cfg)
