"""Synthetic Earth-system cubes, preprocessing, chronological splits and the HGC1 file format."""
from __future__ import annotations

import json
import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .arraycore import Array

__all__ = [
    "CubeSample", "QuantizerSpec", "NormStats", "Cube", "GeneratorConfig", "RawCube",
    "CHANNEL_GROUPS", "DRIVER_ORDER", "LOG_CHANNELS", "GROUP_NAMES",
    "simulate", "generate_synthetic", "preprocess", "log1p_transform", "fit_quantizer",
    "quantize", "quantize_map", "coarsen_block_mean", "split_chronological", "fit_norm_stats",
    "write_cube", "read_cube", "CubeFormatError", "BadMagicError", "VersionMismatchError",
    "TruncatedPayloadError", "ChecksumError", "ConfigError", "class_prevalence",
]

CUBE_MAGIC = b"HGC1"
CUBE_VERSION = 1

# Driver channels in the order they are added as C_x grows; names follow the
# SeasFire variables the synthetic fields stand in for.
DRIVER_ORDER = ["t2m_mean", "swvl1", "ndvi", "sst", "mslp", "pop_dens",
                "tp", "vpd", "ssrd", "lst_day"]
CHANNEL_GROUPS = {
    "t2m_mean": "atmosphere", "mslp": "atmosphere", "tp": "atmosphere", "vpd": "atmosphere",
    "ssrd": "atmosphere", "swvl1": "land", "ndvi": "land", "lst_day": "land",
    "sst": "ocean", "pop_dens": "anthropy",
}
GROUP_NAMES = ("land", "ocean", "atmosphere", "anthropy", "indices")
LOG_CHANNELS = ("tp", "pop_dens")


class ConfigError(ValueError):
    pass


class CubeFormatError(ValueError):
    pass


class BadMagicError(CubeFormatError):
    pass


class VersionMismatchError(CubeFormatError):
    pass


class TruncatedPayloadError(CubeFormatError):
    pass


class ChecksumError(CubeFormatError):
    pass


@dataclass
class CubeSample:
    drivers: np.ndarray   # (H, W, C_x)
    indices: np.ndarray   # (C_z,)
    ba: np.ndarray        # (H, W) uint8 classes
    time_index: int

    def __eq__(self, other):
        return (isinstance(other, CubeSample) and self.time_index == other.time_index
                and np.array_equal(self.drivers, other.drivers)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.ba, other.ba))


@dataclass
class QuantizerSpec:
    K: int
    boundaries: list[float]

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if len(self.boundaries) != self.K - 2:
            raise ValueError(f"need {self.K - 2} boundaries for K={self.K}")
        if any(b <= a for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("quantizer boundaries must be strictly increasing")


@dataclass
class NormStats:
    mean: list[float]
    std: list[float]

    def apply(self, drivers: np.ndarray) -> np.ndarray:
        return (drivers - np.asarray(self.mean)) / np.asarray(self.std)


@dataclass
class Cube:
    samples: list[CubeSample]
    channel_names: list[str]
    K: int
    quantizer: QuantizerSpec | None = None
    norm: NormStats | None = None
    valid_mask: np.ndarray | None = None   # (H, W) bool; None means all cells valid
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        if self.samples:
            return self.samples[0].ba.shape
        return tuple(self.meta.get("HW", (0, 0)))

    def __len__(self):
        return len(self.samples)


# ---------------------------------------------------------------- preprocessing

def log1p_transform(field):
    """Elementwise log(1 + x) for non-negative data."""
    data = field.data if isinstance(field, Array) else np.asarray(field, dtype=np.float64)
    if np.any(data < 0):
        raise ValueError("log1p_transform requires non-negative entries")
    out = np.log1p(data)
    return Array(out) if isinstance(field, Array) else out


def coarsen_block_mean(field, factor: int):
    """Average non-overlapping factor x factor blocks over the first two axes."""
    data = field.data if isinstance(field, Array) else np.asarray(field, dtype=np.float64)
    H, W = data.shape[:2]
    if factor < 1 or H % factor or W % factor:
        raise ValueError(f"grid {H}x{W} not divisible by coarsening factor {factor}")
    out = data.reshape(H // factor, factor, W // factor, factor, *data.shape[2:]).mean(axis=(1, 3))
    return Array(out) if isinstance(field, Array) else out


def fit_quantizer(training_ba, K: int) -> QuantizerSpec:
    """Equal-frequency boundaries over the nonzero training values.

    Falls back to equal-width boundaries (with a warning) when there are too
    few distinct nonzero values for K - 1 balanced classes.
    """
    values = np.asarray(training_ba, dtype=np.float64).ravel()
    nz = values[values > 0]
    qs = np.arange(1, K - 1) / (K - 1)
    if K == 2:
        return QuantizerSpec(K, [])
    if np.unique(nz).size >= K - 1:
        bounds = np.quantile(nz, qs)
        if np.all(np.diff(bounds) > 0) and bounds[0] > 0:
            return QuantizerSpec(K, [float(b) for b in bounds])
    warnings.warn(f"only {np.unique(nz).size} distinct nonzero values for K={K}; "
                  "using equal-width boundaries", RuntimeWarning, stacklevel=2)
    lo, hi = (float(nz.min()), float(nz.max())) if nz.size else (0.0, 1.0)
    if hi <= lo:
        lo, hi = 0.0, max(hi, 1.0)
    return QuantizerSpec(K, [float(lo + (hi - lo) * q) for q in qs])


def quantize(value: float, spec: QuantizerSpec) -> int:
    if value < 0:
        raise ValueError("burned area must be non-negative")
    if value == 0:
        return 0
    return 1 + sum(1 for b in spec.boundaries if b < value)


def quantize_map(values: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Vectorised :func:`quantize`."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("burned area must be non-negative")
    cls = 1 + np.searchsorted(np.asarray(spec.boundaries, dtype=np.float64), values, side="left")
    return np.where(values == 0, 0, cls).astype(np.uint8)


def fit_norm_stats(samples_drivers: Sequence[np.ndarray]) -> NormStats:
    stack = np.stack(samples_drivers).reshape(-1, samples_drivers[0].shape[-1])
    mean = stack.mean(axis=0)
    std = stack.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return NormStats([float(m) for m in mean], [float(s) for s in std])


def split_chronological(dataset, train_fraction: float):
    """First ``floor(n * train_fraction)`` samples train, the rest test."""
    samples = dataset.samples if isinstance(dataset, Cube) else list(dataset)
    times = [s.time_index for s in samples]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("samples must be sorted by time_index")
    n_train = int(math.floor(len(samples) * train_fraction + 1e-9))
    if n_train == 0:
        raise ValueError("chronological split leaves the training set empty")
    return samples[:n_train], samples[n_train:]


def class_prevalence(samples: Sequence[CubeSample], K: int) -> list[float]:
    if not samples:
        return [0.0] * K
    counts = np.bincount(np.concatenate([s.ba.ravel() for s in samples]), minlength=K)
    return [float(c) for c in counts / counts.sum()]


# ---------------------------------------------------------------- synthetic generator

@dataclass
class GeneratorConfig:
    H: int = 16
    W: int = 32
    C_x: int = 6
    C_z: int = 4
    steps: int = 250
    seed: int = 0
    K: int = 7
    levels: int = 3
    train_fraction: float = 0.8
    fire_target: float = 0.02
    ignition_scale: float = 1.0
    coarsen: int = 2
    spinup: int = 60

    def validate(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if not 1 <= self.C_x <= len(DRIVER_ORDER):
            raise ConfigError(f"C_x must be in [1, {len(DRIVER_ORDER)}]")
        if self.C_z < 1:
            raise ConfigError("C_z must be >= 1")
        block = 2 ** (self.levels - 1)
        if self.H % block or self.W % block:
            raise ConfigError(f"H={self.H}, W={self.W} not divisible by 2^(L-1)={block} "
                              f"for L={self.levels}")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must be in (0, 1]")
        if self.coarsen < 1:
            raise ConfigError("coarsen must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class RawCube:
    drivers: np.ndarray   # (T, H, W, C_x) physical units
    indices: np.ndarray   # (T, C_z)
    ba: np.ndarray        # (T, H, W) continuous burned fraction
    channel_names: list[str]
    time_index: np.ndarray


class _FieldBank:
    """Smooth random Fourier fields on an H x W grid."""

    def __init__(self, rng, H, W, n_modes=4):
        y = (np.arange(H) + 0.5)[:, None] / H
        x = (np.arange(W) + 0.5)[None, :] / W
        self.y, self.x = y, x
        self.rng = rng
        self.n_modes = n_modes

    def field(self):
        out = np.zeros((self.y.shape[0], self.x.shape[1]))
        for ky in range(self.n_modes + 1):
            for kx in range(self.n_modes + 1):
                if kx == ky == 0:
                    continue
                amp = self.rng.normal() / (1.0 + kx * kx + ky * ky)
                phase = self.rng.uniform(0, 2 * np.pi)
                out += amp * np.cos(2 * np.pi * (kx * self.x + ky * self.y) + phase)
        return (out - out.mean()) / (out.std() + 1e-12)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _neighbour_sum(a):
    out = np.zeros_like(a)
    out[1:] += a[:-1]
    out[:-1] += a[1:]
    out[:, 1:] += a[:, :-1]
    out[:, :-1] += a[:, 1:]
    return out


def simulate(cfg: GeneratorConfig) -> RawCube:
    """Run the stochastic fire-spread model and return physical-unit fields.

    Drivers evolve smoothly (seasonal cycle, index teleconnections, AR(1)
    anomalies). Fire ignites with probability rising in temperature and falling
    in moisture, spreads to 4-neighbours, consumes fuel; fuel regrows
    logistically. The model runs at ``coarsen`` times the target resolution and
    is block-averaged down.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    f = cfg.coarsen
    H, W = cfg.H * f, cfg.W * f
    bank = _FieldBank(rng, H, W)
    lat = np.broadcast_to(np.cos(np.pi * (bank.y - 0.5)), (H, W))

    temp_base = 0.8 * lat + 0.6 * bank.field()
    moist_base = 0.7 * bank.field()
    fuel_cap = 0.35 + 0.6 * _sigmoid(1.5 * bank.field() + 0.5)
    pop = np.exp(1.0 + 1.2 * bank.field())
    sst_base = lat + 0.3 * bank.field()
    mslp_base = bank.field()
    extra_base = [bank.field() for _ in range(4)]
    temp_tele = [bank.field() for _ in range(cfg.C_z)]
    moist_tele = [bank.field() for _ in range(cfg.C_z)]
    periods = 11.0 + 17.0 * np.arange(cfg.C_z) + rng.uniform(0, 5, cfg.C_z)
    phases = rng.uniform(0, 2 * np.pi, cfg.C_z)
    tele_gain = rng.uniform(0.25, 0.5, cfg.C_z) * rng.choice([-1, 1], cfg.C_z)

    n_basis = 8
    basis = np.stack([bank.field() for _ in range(n_basis)])
    rho = 0.85
    coef_T = rng.normal(size=n_basis)
    coef_M = rng.normal(size=n_basis)
    coef_P = rng.normal(size=n_basis)

    fuel = fuel_cap.copy()
    ba_prev = np.zeros((H, W))
    base_rate = 0.01 * cfg.ignition_scale
    spread_k, cont_k, regrow = 1.6, 0.45, 0.12

    total = cfg.spinup + cfg.steps
    out_drv, out_idx, out_ba = [], [], []
    for step in range(total):
        t = step - cfg.spinup
        season = np.sin(2 * np.pi * t / 46.0)
        z = np.sin(2 * np.pi * t / periods + phases)
        coef_T = rho * coef_T + math.sqrt(1 - rho ** 2) * rng.normal(size=n_basis)
        coef_M = rho * coef_M + math.sqrt(1 - rho ** 2) * rng.normal(size=n_basis)
        coef_P = rho * coef_P + math.sqrt(1 - rho ** 2) * rng.normal(size=n_basis)
        anom_T = np.tensordot(coef_T, basis, 1) / math.sqrt(n_basis)
        anom_M = np.tensordot(coef_M, basis, 1) / math.sqrt(n_basis)
        anom_P = np.tensordot(coef_P, basis, 1) / math.sqrt(n_basis)

        tele_T = sum(g * zk * p for g, zk, p in zip(tele_gain, z, temp_tele))
        tele_M = sum(g * zk * p for g, zk, p in zip(tele_gain, z, moist_tele))
        temp = temp_base + 0.7 * season * lat + tele_T + 0.4 * anom_T
        moist = moist_base - 0.5 * season * lat - tele_M + 0.4 * anom_M - 0.3 * (anom_T > 1.0)

        dryness = _sigmoid(1.6 * temp - 1.8 * moist - 0.5)
        p_ign = base_rate * dryness ** 2 * fuel * (1.0 + 0.15 * np.log1p(pop))
        p_spread = 1.0 - np.exp(-spread_k * _neighbour_sum(ba_prev) * dryness * fuel)
        p_cont = cont_k * fuel * dryness * (ba_prev > 0)
        p_fire = 1.0 - (1.0 - p_ign) * (1.0 - p_spread) * (1.0 - p_cont)
        burning = rng.random((H, W)) < p_fire
        ba = np.where(burning, fuel * dryness * rng.uniform(0.3, 1.0, (H, W)), 0.0)
        fuel = np.clip(fuel - 0.8 * ba, 0.01, None)
        fuel = fuel + regrow * fuel * (1.0 - fuel / fuel_cap)
        ba_prev = ba

        if step < cfg.spinup:
            # calibrate the ignition rate towards the target burning fraction
            frac = float((coarsen_block_mean(burning.astype(float), f) > 0).mean())
            if base_rate > 0:
                ratio = cfg.fire_target / max(frac, 1e-4)
                base_rate *= float(np.clip(ratio, 0.7, 1.4)) ** 0.5
            continue

        ndvi = fuel + 0.02 * rng.normal(size=(H, W))
        vpd = np.clip(temp - moist, 0.0, None)
        channels = {
            "t2m_mean": 15.0 + 8.0 * temp,
            "swvl1": 0.3 + 0.08 * moist,
            "ndvi": ndvi,
            "sst": 290.0 + 3.0 * sst_base + 1.0 * season + 0.5 * z[0],
            "mslp": 1010.0 + 5.0 * mslp_base + 3.0 * anom_P,
            "pop_dens": pop,
            "tp": np.exp(1.0 + moist) * (1.0 + 0.2 * anom_P ** 2),
            "vpd": vpd,
            "ssrd": 200.0 + 50.0 * lat + 20.0 * season,
            "lst_day": 20.0 + 9.0 * temp + 0.5 * extra_base[0],
        }
        names = DRIVER_ORDER[: cfg.C_x]
        drv = np.stack([channels[n] for n in names], axis=-1)
        out_drv.append(coarsen_block_mean(drv, f))
        out_ba.append(coarsen_block_mean(ba, f))
        out_idx.append(z.copy())

    return RawCube(
        drivers=np.stack(out_drv),
        indices=np.stack(out_idx),
        ba=np.stack(out_ba),
        channel_names=list(DRIVER_ORDER[: cfg.C_x]),
        time_index=np.arange(cfg.steps),
    )


def preprocess(raw: RawCube, K: int, train_fraction: float) -> Cube:
    """Log-transform skewed channels, standardise and quantise with train-split statistics."""
    drivers = raw.drivers.copy()
    for c, name in enumerate(raw.channel_names):
        if name in LOG_CHANNELS:
            drivers[..., c] = log1p_transform(drivers[..., c])
    n_train = int(math.floor(len(drivers) * train_fraction + 1e-9))
    if n_train == 0:
        raise ValueError("chronological split leaves the training set empty")
    norm = fit_norm_stats(list(drivers[:n_train]))
    drivers = norm.apply(drivers).astype(np.float32).astype(np.float64)
    quant = fit_quantizer(raw.ba[:n_train], K)
    classes = quantize_map(raw.ba, quant)
    samples = [CubeSample(drivers[t], raw.indices[t].astype(np.float32).astype(np.float64),
                          classes[t], int(raw.time_index[t]))
               for t in range(len(drivers))]
    return Cube(samples, list(raw.channel_names), K, quant, norm,
                meta={"train_fraction": train_fraction})


def generate_synthetic(cfg: GeneratorConfig) -> Cube:
    cube = preprocess(simulate(cfg), cfg.K, cfg.train_fraction)
    cube.meta["generator"] = cfg.to_dict()
    return cube


# ---------------------------------------------------------------- HGC1 file format

def write_cube(path, cube: Cube) -> None:
    """Write a cube as: magic, u32 header length, JSON header, payload, CRC32(payload).

    Drivers and indices are stored as little-endian float32, classes as uint8.
    """
    H, W = cube.shape if cube.samples else tuple(cube.meta.get("HW", (0, 0)))
    C_x = len(cube.channel_names)
    C_z = cube.samples[0].indices.shape[0] if cube.samples else int(cube.meta.get("C_z", 0))
    header = {
        "version": CUBE_VERSION,
        "H": int(H), "W": int(W), "C_x": C_x, "C_z": int(C_z), "K": int(cube.K),
        "n_samples": len(cube.samples),
        "channel_names": list(cube.channel_names),
        "time_indices": [int(s.time_index) for s in cube.samples],
        "quantizer": asdict(cube.quantizer) if cube.quantizer else None,
        "norm": asdict(cube.norm) if cube.norm else None,
        "meta": cube.meta,
    }
    parts = []
    for s in cube.samples:
        parts.append(np.ascontiguousarray(s.drivers, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.indices, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.ba, dtype=np.uint8).tobytes())
    payload = b"".join(parts)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_cube(path) -> Cube:
    blob = Path(path).read_bytes()
    if blob[:4] != CUBE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {CUBE_MAGIC!r}")
    if len(blob) < 8:
        raise TruncatedPayloadError(f"{path}: missing header length")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise TruncatedPayloadError(f"{path}: header truncated")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CubeFormatError(f"{path}: unreadable header") from exc
    if header.get("version") != CUBE_VERSION:
        raise VersionMismatchError(f"{path}: version {header.get('version')} != {CUBE_VERSION}")
    H, W, C_x, C_z, n = (header[k] for k in ("H", "W", "C_x", "C_z", "n_samples"))
    per = H * W * C_x * 4 + C_z * 4 + H * W
    start = 8 + hlen
    end = start + n * per
    if len(blob) < end + 4:
        raise TruncatedPayloadError(f"{path}: expected {end + 4} bytes, found {len(blob)}")
    payload = blob[start:end]
    (crc,) = struct.unpack("<I", blob[end:end + 4])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    samples = []
    off = 0
    for i in range(n):
        drv = np.frombuffer(payload, "<f4", H * W * C_x, off).reshape(H, W, C_x).astype(np.float64)
        off += H * W * C_x * 4
        idx = np.frombuffer(payload, "<f4", C_z, off).astype(np.float64)
        off += C_z * 4
        ba = np.frombuffer(payload, np.uint8, H * W, off).reshape(H, W).copy()
        off += H * W
        samples.append(CubeSample(drv, idx, ba, int(header["time_indices"][i])))
    q = header.get("quantizer")
    nm = header.get("norm")
    meta = header.get("meta") or {}
    if not samples:
        meta = {**meta, "HW": [H, W], "C_z": C_z}
    return Cube(samples, list(header["channel_names"]), int(header["K"]),
                QuantizerSpec(**q) if q else None, NormStats(**nm) if nm else None, meta=meta)
