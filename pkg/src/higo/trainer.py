"""Training loop (AdamW + cosine schedule), evaluation over horizons, masking and checkpoints."""
from __future__ import annotations

import csv
import json
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import arraycore as ac
from .datagen import (CHANNEL_GROUPS, DRIVER_ORDER, GROUP_NAMES, Cube, CubeSample, NormStats,
                      QuantizerSpec)
from .head import class_weights, weighted_ce
from .metrics import auprc, f1_fire, macro_f1, threshold_predictions, to_binary
from .model import HiGO, ModelConfig
from .odeint import SolverConfig, SolverError

__all__ = ["TrainConfig", "TrainingError", "CheckpointError", "TrainState", "EvalResult",
           "adamw_step", "cosine_lr", "make_pairs", "split_train_val", "mask_drivers",
           "build_model", "best_model", "train", "evaluate", "save_checkpoint", "load_checkpoint",
           "write_history_csv"]

CKPT_MAGIC = b"HGK1"
CKPT_VERSION = 1
DAYS_PER_STEP = 8


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or a solver failure."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 100
    batch: int = 4
    horizon_steps: int = 1
    L: int = 3
    D: int = 32
    K: int | None = None          # taken from the cube when None
    solver: SolverConfig = field(default_factory=SolverConfig)
    eval_solver: SolverConfig = field(default_factory=lambda: SolverConfig(method="dopri5"))
    seed: int = 0
    driver_mask: tuple = ()
    mp_mode: str = "adaptive"
    val_fraction: float = 0.15
    lr_min: float = 0.0
    modes: int = 8

    def __post_init__(self):
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)
        if isinstance(self.eval_solver, dict):
            self.eval_solver = SolverConfig(**self.eval_solver)
        self.driver_mask = tuple(self.driver_mask)

    def validate(self):
        if not self.lr > 0 or not self.weight_decay > 0:
            raise ValueError("lr and weight_decay must be > 0")
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.mp_mode not in ("adaptive", "mean"):
            raise ValueError(f"unknown mp_mode {self.mp_mode!r}")
        unknown = set(self.driver_mask) - set(GROUP_NAMES)
        if unknown:
            raise ValueError(f"unknown driver groups {sorted(unknown)}")

    def to_dict(self):
        d = asdict(self)
        d["driver_mask"] = list(self.driver_mask)
        return d


# ---------------------------------------------------------------- optimiser

def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(params: dict, grads: dict, moments: dict, lr_t: float, betas=(0.9, 0.999),
               eps: float = 1e-8, wd: float = 0.0) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay.

    ``params``/``grads`` map names to arrays; ``moments`` holds ``m``, ``v`` (dicts
    keyed like ``params``) and the step counter ``t``.
    """
    b1, b2 = betas
    moments["t"] = t = moments.get("t", 0) + 1
    m, v = moments.setdefault("m", {}), moments.setdefault("v", {})
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        mi = m.setdefault(name, np.zeros_like(p))
        vi = v.setdefault(name, np.zeros_like(p))
        mi *= b1
        mi += (1 - b1) * g
        vi *= b2
        vi += (1 - b2) * g * g
        m_hat = mi / (1 - b1 ** t)
        v_hat = vi / (1 - b2 ** t)
        p -= lr_t * (m_hat / (np.sqrt(v_hat) + eps) + wd * p)


# ---------------------------------------------------------------- data plumbing

def make_pairs(samples: list[CubeSample], steps: int) -> list[tuple[int, int]]:
    """(source, target) positions in ``samples`` with target time = source time + steps."""
    pos = {s.time_index: i for i, s in enumerate(samples)}
    return [(i, pos[s.time_index + steps]) for i, s in enumerate(samples)
            if s.time_index + steps in pos]


def split_train_val(cube: Cube, val_fraction: float = 0.15):
    """Chronological train / validation / test split of a cube's samples."""
    frac = float(cube.meta.get("train_fraction", 0.8))
    n = len(cube.samples)
    n_train = int(math.floor(n * frac + 1e-9))
    n_val = int(math.floor(n_train * val_fraction + 1e-9))
    if n_train - n_val < 1:
        raise ValueError("training split is empty")
    s = cube.samples
    return s[: n_train - n_val], s[n_train - n_val: n_train], s[n_train:]


def mask_drivers(sample: CubeSample, groups, channel_names=None) -> CubeSample:
    """Zero the named channel groups (``indices`` zeroes the climate-index vector)."""
    groups = set(groups)
    unknown = groups - set(GROUP_NAMES)
    if unknown:
        raise ValueError(f"unknown driver groups {sorted(unknown)}; valid: {list(GROUP_NAMES)}")
    if not groups:
        return sample
    names = list(channel_names) if channel_names is not None else DRIVER_ORDER[: sample.drivers.shape[-1]]
    drivers = sample.drivers.copy()
    indices = sample.indices.copy()
    for g in groups:
        if g == "indices":
            indices[:] = 0.0
            continue
        for c, name in enumerate(names):
            if CHANNEL_GROUPS.get(name) == g:
                drivers[..., c] = 0.0
    return CubeSample(drivers, indices, sample.ba, sample.time_index)


def build_model(cube: Cube, cfg: TrainConfig, **model_kw) -> HiGO:
    H, W = cube.shape
    mc = ModelConfig(H=H, W=W, C_x=len(cube.channel_names),
                     C_z=cube.samples[0].indices.shape[0], K=cfg.K or cube.K, D=cfg.D,
                     L=cfg.L, modes=cfg.modes, mp_mode=cfg.mp_mode, **model_kw)
    return HiGO(mc, seed=cfg.seed)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    rows: list                      # (horizon_days, metric, value)
    f1_fire: dict                   # horizon_days -> fire-class F1
    maps: dict                      # horizon_days -> (n_sources, H, W) fire probability
    source_times: list

    def value(self, horizon, metric):
        for h, m, v in self.rows:
            if h == horizon and m == metric:
                return v
        raise KeyError((horizon, metric))


def _labelled_metrics(scores: np.ndarray, labels: np.ndarray):
    pred = threshold_predictions(scores, 0.5)
    return macro_f1(pred, labels), f1_fire(pred, labels), auprc(scores, labels)


def evaluate(model: HiGO, samples: list[CubeSample], horizons, solver: SolverConfig | None = None,
             mask=(), channel_names=None, valid_mask=None, baselines=()) -> EvalResult:
    """M-F1 and AUPRC of fire forecasts at each horizon (in days).

    Every sample whose target at the longest integer horizon is present acts
    as a source; one solve per source covers all horizons. Fractional-step
    horizons produce probability maps but no labelled metrics.
    ``baselines`` may contain ``persistence`` (score = current fire indicator)
    and ``interp`` (linear blend between the current indicator and the model's
    forecast at the longest horizon).
    """
    solver = solver or SolverConfig(method="dopri5")
    hs_days = [float(h) for h in horizons]
    if not hs_days or min(hs_days) <= 0:
        raise ValueError("horizons must be positive")
    steps = [h / DAYS_PER_STEP for h in hs_days]
    int_steps = [int(round(s)) for s in steps if abs(s - round(s)) < 1e-9]
    reach = max(int_steps) if int_steps else 0
    pos = {s.time_index: i for i, s in enumerate(samples)}
    sources = [i for i, s in enumerate(samples) if s.time_index + reach in pos]
    if not sources:
        raise ValueError("no source samples have targets at the requested horizons")
    t_max = max(steps)
    cells = np.ones(samples[0].ba.shape, bool) if valid_mask is None else np.asarray(valid_mask, bool)

    maps = {h: [] for h in hs_days}
    for i in sources:
        s = mask_drivers(samples[i], mask, channel_names)
        res = model.predict(s.drivers, s.indices, s.ba, steps, solver)
        for h, r in zip(hs_days, res):
            maps[h].append(r.fire_prob)
    maps = {h: np.stack(v) for h, v in maps.items()}

    rows, f1f = [], {}
    current = np.stack([to_binary(samples[i].ba) for i in sources]).astype(np.float64)
    for h, st in zip(hs_days, steps):
        if abs(st - round(st)) > 1e-9:
            rows += [(h, "m_f1", None), (h, "auprc", None)]
            continue
        labels = np.stack([to_binary(samples[pos[samples[i].time_index + int(round(st))]].ba)
                           for i in sources])
        m, fire, ap = _labelled_metrics(maps[h][:, cells], labels[:, cells])
        rows += [(h, "m_f1", m), (h, "auprc", ap)]
        f1f[h] = fire
        if "persistence" in baselines:
            m, fire, ap = _labelled_metrics(current[:, cells], labels[:, cells])
            rows += [(h, "persistence_m_f1", m), (h, "persistence_auprc", ap)]
            f1f[f"persistence_{h}"] = fire
        if "interp" in baselines and st < t_max:
            w = st / t_max
            score = (1 - w) * current + w * maps[max(hs_days)]
            m, fire, ap = _labelled_metrics(score[:, cells], labels[:, cells])
            rows += [(h, "interp_m_f1", m), (h, "interp_auprc", ap)]
            f1f[f"interp_{h}"] = fire
    return EvalResult(rows, f1f, maps, [samples[i].time_index for i in sources])


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    model: HiGO
    config: TrainConfig
    epoch: int = 0
    moments: dict = field(default_factory=dict)
    history: list = field(default_factory=list)    # (epoch, loss, val_auprc)
    best_val: float | None = None
    best_epoch: int = 0
    best_params: dict | None = None
    rng: np.random.Generator | None = None
    quantizer: QuantizerSpec | None = None
    norm: NormStats | None = None
    elapsed: float = 0.0


def _batch_arrays(samples, idx_pairs, mask, names):
    src = [mask_drivers(samples[i], mask, names) for i, _ in idx_pairs]
    return (np.stack([s.drivers for s in src]), np.stack([s.indices for s in src]),
            np.stack([s.ba for s in src]), np.stack([samples[j].ba for _, j in idx_pairs]))


def train(cube: Cube, cfg: TrainConfig, state: TrainState | None = None, until_epoch: int | None = None,
          checkpoint_path=None, log=None, **model_kw) -> TrainState:
    """Train (or resume ``state``) up to ``until_epoch`` (default ``cfg.epochs``).

    The learning-rate schedule always spans ``cfg.epochs``, so stopping early
    and resuming reproduces an uninterrupted run.
    """
    cfg.validate()
    tr, va, _ = split_train_val(cube, cfg.val_fraction)
    pairs = make_pairs(tr, cfg.horizon_steps)
    if not pairs:
        raise ValueError("no training pairs at this horizon")
    K = cfg.K or cube.K
    weights = class_weights(np.stack([tr[j].ba for _, j in pairs]), K)
    names = cube.channel_names
    if state is None:
        state = TrainState(build_model(cube, cfg, **model_kw), cfg,
                           rng=np.random.default_rng(cfg.seed),
                           quantizer=cube.quantizer, norm=cube.norm)
    model, params = state.model, state.model.params
    n_batches = math.ceil(len(pairs) / cfg.batch)
    total = cfg.epochs * n_batches
    stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    horizon = float(cfg.horizon_steps)
    t_start = time.perf_counter()

    while state.epoch < stop:
        order = state.rng.permutation(len(pairs))
        losses = []
        for b in range(n_batches):
            chunk = [pairs[k] for k in order[b * cfg.batch:(b + 1) * cfg.batch]]
            X, z, ba, y = _batch_arrays(tr, chunk, cfg.driver_mask, names)
            params.zero_grad()
            try:
                with ac.tape():
                    probs, _ = model.forward(X, z, ba, horizon, cfg.solver)
                    loss = weighted_ce(probs, y, weights)
                    ac.backward(loss)
            except (ac.NonFiniteError, SolverError, FloatingPointError) as exc:
                raise TrainingError(f"epoch {state.epoch + 1} batch {b}: {exc}") from exc
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingError(f"epoch {state.epoch + 1} batch {b}: non-finite loss {lv}")
            losses.append(lv)
            step = state.epoch * n_batches + b
            adamw_step({n: p.data for n, p in params.items()},
                       {n: p.grad for n, p in params.items()}, state.moments,
                       cosine_lr(step, total, cfg.lr, cfg.lr_min), wd=cfg.weight_decay)
        state.epoch += 1
        val = None
        if va:
            try:
                val = evaluate(model, va, [cfg.horizon_steps * DAYS_PER_STEP], cfg.eval_solver,
                               mask=cfg.driver_mask, channel_names=names,
                               valid_mask=cube.valid_mask).value(
                                   float(cfg.horizon_steps * DAYS_PER_STEP), "auprc")
            except ValueError:
                val = None
        mean_loss = float(np.mean(losses))
        state.history.append((state.epoch, mean_loss, val))
        if state.best_params is None or (val is not None and
                                         (state.best_val is None or val > state.best_val)):
            state.best_val, state.best_epoch = val, state.epoch
            state.best_params = params.state()
        if log:
            log(f"epoch {state.epoch}/{cfg.epochs} loss {mean_loss:.5f} val_auprc "
                f"{'n/a' if val is None else f'{val:.4f}'}")
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state)
    state.elapsed += time.perf_counter() - t_start
    return state


def best_model(state: TrainState) -> HiGO:
    """A copy of the model carrying the best-validation parameters."""
    m = HiGO(replace(state.model.cfg), seed=state.config.seed)
    m.params.load_state(state.best_params if state.best_params is not None else state.model.params.state())
    return m


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "val_auprc"])
        for e, loss, val in history:
            w.writerow([e, repr(float(loss)), "" if val is None else repr(float(val))])


# ---------------------------------------------------------------- checkpoints

def _pack(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def save_checkpoint(path, state: TrainState) -> None:
    """HGK1: magic, u32 header length, JSON header, float64 payload, CRC32(payload)."""
    p = state.model.params
    names = list(p)
    m, v = state.moments.get("m", {}), state.moments.get("v", {})
    sections = ["params"]
    arrays = [p[n].data for n in names]
    if m:
        sections += ["m", "v"]
        arrays += [m[n] for n in names] + [v[n] for n in names]
    if state.best_params is not None:
        sections.append("best")
        arrays += [state.best_params[n] for n in names]
    header = {
        "version": CKPT_VERSION,
        "model_config": state.model.config_dict(),
        "train_config": state.config.to_dict(),
        "epoch": state.epoch,
        "adam_t": int(state.moments.get("t", 0)),
        "names": names,
        "shapes": [list(p[n].shape) for n in names],
        "sections": sections,
        "history": [list(h) for h in state.history],
        "best_val": state.best_val,
        "best_epoch": state.best_epoch,
        "rng_state": state.rng.bit_generator.state if state.rng is not None else None,
        "quantizer": asdict(state.quantizer) if state.quantizer else None,
        "norm": asdict(state.norm) if state.norm else None,
    }
    payload = _pack(arrays)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    payload = blob[8 + hlen:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    names, shapes = header["names"], [tuple(s) for s in header["shapes"]]
    sizes = [int(np.prod(s)) for s in shapes]
    need = 8 * sum(sizes) * len(header["sections"])
    if len(payload) != need:
        raise CheckpointError(f"{path}: payload {len(payload)} bytes, expected {need}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    secs, off = {}, 0
    for sec in header["sections"]:
        d = {}
        for n, s, k in zip(names, shapes, sizes):
            d[n] = flat[off:off + k].reshape(s).copy()
            off += k
        secs[sec] = d

    cfg = TrainConfig(**header["train_config"])
    model = HiGO(ModelConfig(**header["model_config"]), seed=cfg.seed)
    model.params.load_state(secs["params"])
    moments = {}
    if "m" in secs:
        moments = {"t": header["adam_t"], "m": secs["m"], "v": secs["v"]}
    rng = None
    if header["rng_state"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng_state"]
    q = header["quantizer"]
    nm = header["norm"]
    return TrainState(model=model, config=cfg, epoch=header["epoch"], moments=moments,
                      history=[tuple(h) for h in header["history"]], best_val=header["best_val"],
                      best_epoch=header["best_epoch"], best_params=secs.get("best"), rng=rng,
                      quantizer=QuantizerSpec(**q) if q else None,
                      norm=NormStats(**nm) if nm else None)
