"""Parametric ground-truth simulator for power spectra along a ROADM link.

All transfers operate in the dB domain on loaded channels only:

* EDFA: target gain, linear tilt, a mean-centred seeded ripple, a loading
  dependent gain offset and soft compression of the total output power.
* Span: ``length * (alpha + tilt_coeff * (u - 0.5))`` dB of loss.
* WSS: mean attenuation plus seeded per-channel ripple, optional blocking.

Measurement (OCM) noise is added to the recorded readings, not to the
propagating signal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .core import (SENTINEL_DBM, ChannelGrid, ComponentKind, Dataset, DeviceConfig,
                   LoadingMode, MeasurementSequence, PowerSpectrum, Topology, build_topology)
from .errors import ConfigError, DataError, ShapeError


@dataclass(frozen=True)
class PhysicsConfig:
    """Desk-scale constants for the synthetic link."""

    span_tilt_db_per_km: float = 0.002
    ripple_max_db: float = 0.3
    ripple_harmonics: int = 3
    p_sat_dbm: float = 20.0
    saturation_knee_db: float = 3.0
    loading_offset_db: float = 0.5
    ocm_sigma_db: float = 0.05
    quantization_db: float = 0.0
    realization: int = 0

    def __post_init__(self):
        if self.ocm_sigma_db < 0 or self.quantization_db < 0:
            raise ConfigError("noise parameters must be nonnegative")
        if self.ripple_max_db < 0 or self.saturation_knee_db < 0 or self.ripple_harmonics < 0:
            raise ConfigError("ripple and knee parameters must be nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def with_realization(self, realization):
        return replace(self, realization=int(realization))

    @property
    def noise(self) -> "NoiseModel":
        return NoiseModel(self.ocm_sigma_db, self.quantization_db)


@dataclass(frozen=True)
class NoiseModel:
    ocm_sigma_db: float = 0.05
    quantization_db: float = 0.0

    def __post_init__(self):
        if self.ocm_sigma_db < 0 or self.quantization_db < 0:
            raise ConfigError("noise parameters must be nonnegative")

    def apply(self, powers, mask, rng):
        out = np.array(powers, dtype=np.float64)
        if self.ocm_sigma_db > 0:
            out = out + rng.normal(0.0, self.ocm_sigma_db, size=out.shape)
        if self.quantization_db > 0:
            out = np.round(out / self.quantization_db) * self.quantization_db
        return np.where(mask, out, SENTINEL_DBM)


def device_seed(realization, device_id) -> int:
    digest = hashlib.sha256(f"{int(realization)}:{device_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def ripple_curve(u, seed, max_amp_db=0.3, harmonics=3) -> np.ndarray:
    """Mean-centred ``sum_k a_k sin(2 pi k u + phi_k)`` with ``|a_k| <= max_amp_db``."""
    rng = ad.derive_rng(seed, "ripple")
    u = np.asarray(u, dtype=np.float64)
    curve = np.zeros_like(u)
    for k in range(1, harmonics + 1):
        a = rng.uniform(-max_amp_db, max_amp_db)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        curve += a * np.sin(2.0 * np.pi * k * u + phi)
    return curve - curve.mean()


def soft_compression(excess_db, knee_db):
    """Gain reduction for total output ``excess_db`` above saturation.

    Zero below ``-knee``, identity above ``+knee``, quadratic blend in between.
    """
    x = np.asarray(excess_db, dtype=np.float64)
    if knee_db == 0:
        return np.maximum(x, 0.0)
    mid = (x + knee_db) ** 2 / (4.0 * knee_db)
    return np.where(x <= -knee_db, 0.0, np.where(x >= knee_db, x, mid))


def total_power_dbm(powers_dbm, mask):
    lin = np.where(mask, 10.0 ** (np.asarray(powers_dbm) / 10.0), 0.0)
    return 10.0 * np.log10(lin.sum())


@dataclass(frozen=True)
class EdfaPhysics:
    target_gain_db: float
    tilt_db: float
    ripple_db: np.ndarray
    p_sat_dbm: float = 20.0
    knee_db: float = 3.0
    loading_offset_db: float = 0.5

    def transfer(self, powers, mask, u):
        frac = mask.mean()
        gain = (self.target_gain_db + self.tilt_db * (u - 0.5) + self.ripple_db
                + self.loading_offset_db * (frac - 1.0))
        out = powers + gain
        if mask.any():
            out = out - soft_compression(total_power_dbm(out, mask) - self.p_sat_dbm, self.knee_db)
        return out


@dataclass(frozen=True)
class SpanPhysics:
    length_km: float
    atten_coeff: float = 0.21
    tilt_db_per_km: float = 0.002

    def loss_db(self, u):
        return self.length_km * (self.atten_coeff + self.tilt_db_per_km * (u - 0.5))

    def transfer(self, powers, mask, u):
        return powers - self.loss_db(u)


@dataclass(frozen=True)
class WssPhysics:
    mean_atten_db: float
    ripple_db: np.ndarray
    blocked: tuple = ()

    def __post_init__(self):
        if self.mean_atten_db < 0:
            raise ConfigError("WSS attenuation must be nonnegative")

    def transfer(self, powers, mask, u):
        return powers - self.mean_atten_db - self.ripple_db


def device_physics(device: DeviceConfig, grid: ChannelGrid, cfg: PhysicsConfig):
    u = grid.band_position
    seed = device_seed(cfg.realization, device.device_id)
    f = device.features
    if device.kind.is_edfa:
        ripple = ripple_curve(u, seed, cfg.ripple_max_db, cfg.ripple_harmonics)
        return EdfaPhysics(f[0], f[1], ripple, cfg.p_sat_dbm, cfg.saturation_knee_db,
                           cfg.loading_offset_db)
    if device.kind is ComponentKind.SPAN:
        return SpanPhysics(f[0], f[1], cfg.span_tilt_db_per_km)
    if device.kind is ComponentKind.WSS:
        rng = ad.derive_rng(seed, "wss")
        return WssPhysics(f[0], rng.uniform(-f[1], f[1], size=grid.num_channels))
    raise DataError(f"unknown component kind {device.kind!r}")


def build_physics(topo: Topology, cfg: PhysicsConfig) -> dict:
    """``device_id -> physics`` for every component of ``topo``."""
    return {d.device_id: device_physics(d, topo.grid, cfg) for d in topo.components}


def _transfer(p_in: PowerSpectrum, physics, grid: ChannelGrid) -> PowerSpectrum:
    if p_in.num_channels != grid.num_channels:
        raise ShapeError(f"spectrum has {p_in.num_channels} channels, grid has {grid.num_channels}")
    if not isinstance(physics, (EdfaPhysics, SpanPhysics, WssPhysics)):
        raise DataError(f"unknown physics object {type(physics).__name__}")
    mask = p_in.loaded.copy()
    if isinstance(physics, WssPhysics) and physics.blocked:
        mask[list(physics.blocked)] = False
    out = physics.transfer(p_in.powers_dbm, mask, grid.band_position)
    return PowerSpectrum.from_values(out, mask)


def propagate_component(p_in: PowerSpectrum, device: DeviceConfig, physics, grid: ChannelGrid,
                        rng: np.random.Generator | None = None,
                        noise: NoiseModel | None = None) -> PowerSpectrum:
    """One component: kind-specific transfer, then measurement noise if ``rng`` and ``noise``."""
    expected = {ComponentKind.BOOSTER: EdfaPhysics, ComponentKind.PREAMP: EdfaPhysics,
                ComponentKind.SPAN: SpanPhysics, ComponentKind.WSS: WssPhysics}.get(device.kind)
    if expected is None or not isinstance(physics, expected):
        raise DataError(f"{device.device_id}: physics {type(physics).__name__} does not match "
                        f"kind {device.kind}")
    out = _transfer(p_in, physics, grid)
    if rng is not None and noise is not None:
        out = PowerSpectrum(noise.apply(out.powers_dbm, out.loaded, rng), out.loaded)
    return out


def propagate_sequence(p0: PowerSpectrum, topo: Topology, physics: Mapping, rng=None,
                       noise: NoiseModel | None = None,
                       loading_label=LoadingMode.FIXED) -> MeasurementSequence:
    """Fold the topology over ``p0`` and record every intermediate spectrum.

    The signal itself propagates noise-free; each recorded reading (including
    ``P_0``) receives independent OCM noise when ``rng`` and ``noise`` are given.
    """
    state = p0
    true = [p0]
    for dev in topo.components:
        state = propagate_component(state, dev, physics[dev.device_id], topo.grid)
        true.append(state)
    if rng is not None and noise is not None:
        true = [PowerSpectrum(noise.apply(s.powers_dbm, s.loaded, rng), s.loaded) for s in true]
    return MeasurementSequence(topo.name, loading_label, tuple(true))


def generate_loading(mode, rng: np.random.Generator | None = None, num_channels=95,
                     fill="full", p=0.5, width=10) -> np.ndarray:
    """Channel loading mask for ``Fixed`` (``fill`` full/half), ``Random`` or ``Goalpost``."""
    mode = LoadingMode(mode)
    if mode is LoadingMode.FIXED:
        if fill == "full":
            return np.ones(num_channels, dtype=bool)
        if fill == "half":
            mask = np.zeros(num_channels, dtype=bool)
            mask[:(num_channels + 1) // 2] = True
            return mask
        raise ConfigError(f"unknown fixed fill {fill!r}")
    if mode is LoadingMode.RANDOM:
        if not 0.0 < p <= 1.0:
            raise ConfigError(f"random loading probability must be in (0, 1], got {p}")
        if rng is None:
            raise ConfigError("random loading needs an rng")
        while True:
            mask = rng.random(num_channels) < p
            if mask.any():
                return mask
    max_width = (num_channels - 1) // 2
    if not 1 <= width <= max_width:
        raise ConfigError(f"goalpost width must be in [1, {max_width}], got {width}")
    mask = np.zeros(num_channels, dtype=bool)
    mask[:width] = True
    mask[num_channels - width:] = True
    return mask


@dataclass(frozen=True)
class LaunchPlan:
    """Flat launch spectrum; jitters draw a per-sample level offset and linear tilt."""

    power_dbm: float = -2.0
    level_jitter_db: float = 0.0
    tilt_jitter_db: float = 0.0

    def spectrum(self, mask, grid: ChannelGrid, rng) -> PowerSpectrum:
        level = self.power_dbm
        tilt = 0.0
        if self.level_jitter_db > 0:
            level += rng.uniform(-self.level_jitter_db, self.level_jitter_db)
        if self.tilt_jitter_db > 0:
            tilt = rng.uniform(-self.tilt_jitter_db, self.tilt_jitter_db)
        return PowerSpectrum.from_values(level + tilt * (grid.band_position - 0.5), mask)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LoadingParams:
    random_p: float = 0.5
    goalpost_widths: tuple = (10, 10)  # inclusive range drawn per sample

    def to_dict(self):
        return {"random_p": self.random_p, "goalpost_widths": list(self.goalpost_widths)}


def generate_sample(topo, physics_map, mode, index, seed, launch: LaunchPlan,
                    loading: LoadingParams, noise: NoiseModel | None) -> MeasurementSequence:
    """Sample ``index`` of a dataset; it owns the stream ``(seed, 'sample', mode, index)``."""
    mode = LoadingMode(mode)
    rng = ad.derive_rng(seed, "sample", mode.value, index)
    C = topo.grid.num_channels
    if mode is LoadingMode.FIXED:
        mask = generate_loading(mode, num_channels=C, fill="full" if index % 2 == 0 else "half")
    elif mode is LoadingMode.RANDOM:
        mask = generate_loading(mode, rng, C, p=loading.random_p)
    else:
        lo, hi = loading.goalpost_widths
        hi = min(hi, (C - 1) // 2)
        mask = generate_loading(mode, num_channels=C, width=int(rng.integers(min(lo, hi), hi + 1)))
    for phys in physics_map.values():
        if isinstance(phys, WssPhysics) and phys.blocked:
            mask[list(phys.blocked)] = False
    p0 = launch.spectrum(mask, topo.grid, rng)
    return propagate_sequence(p0, topo, physics_map, rng, noise, loading_label=mode)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def generate_dataset(topo: Topology, physics: PhysicsConfig, counts: Mapping, seed: int,
                     launch: LaunchPlan = LaunchPlan(), loading: LoadingParams = LoadingParams(),
                     noise: NoiseModel | None = None, preset: str | None = None) -> Dataset:
    """Emit ``counts[mode]`` sequences per loading mode, Fixed then Random then Goalpost."""
    counts = {LoadingMode(k): int(v) for k, v in counts.items()}
    if any(v < 0 for v in counts.values()):
        raise ConfigError("sequence counts must be nonnegative")
    if noise is None:
        noise = physics.noise
    physics_map = build_physics(topo, physics)
    seqs = []
    for mode in LoadingMode:
        for i in range(counts.get(mode, 0)):
            seqs.append(generate_sample(topo, physics_map, mode, i, seed, launch, loading, noise))
    config = {"physics": physics.to_dict(), "launch": launch.to_dict(),
              "loading": loading.to_dict(), "noise": asdict(noise),
              "counts": {m.value: counts.get(m, 0) for m in LoadingMode},
              "topology": topo.to_dict(), "seed": int(seed)}
    meta = {"config": config, "config_hash": config_hash(config)}
    if preset:
        meta["preset"] = preset
    return Dataset(topo, seqs, int(seed), meta)


# Presets ------------------------------------------------------------------------

TOPOLOGY_PRESETS = {
    "lab": dict(spans=[40, "wss"], id_prefix="lab-", name="lab"),
    "topo1-cosmos": dict(spans=[40, 40, 40, 32, 32, 50], name="topo1-cosmos"),
    "topo2-cosmos": dict(spans=[40, 72, 72, 50], name="topo2-cosmos"),
}

LAB_REALIZATION = 1
TARGET_REALIZATION = 2

DEFAULT_LAUNCH = LaunchPlan(-2.0, level_jitter_db=1.0, tilt_jitter_db=1.0)
DEFAULT_LOADING = LoadingParams(0.5, (4, 24))


@dataclass(frozen=True)
class DatasetPreset:
    topology: str
    counts: dict
    realization: int
    seed_offset: int = 0


DATASET_PRESETS = {
    "lab-base": DatasetPreset("lab", {"Fixed": 96, "Random": 2880, "Goalpost": 192}, LAB_REALIZATION),
    "tl-target": DatasetPreset("topo1-cosmos", {"Fixed": 4, "Random": 44}, TARGET_REALIZATION, 1),
    "test": DatasetPreset("topo1-cosmos", {"Random": 658, "Goalpost": 27}, TARGET_REALIZATION, 2),
}
DATASET_PRESETS["cosmos-test"] = DATASET_PRESETS["test"]


def preset_topology(name: str, grid: ChannelGrid | None = None) -> Topology:
    try:
        p = TOPOLOGY_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown topology preset {name!r}; known: {sorted(TOPOLOGY_PRESETS)}") from None
    return build_topology(p["spans"], 18.0, 0.0, name=p["name"], grid=grid,
                          id_prefix=p.get("id_prefix", ""))


def preset_dataset(name: str, seed: int, topology: str | None = None,
                   physics: PhysicsConfig = PhysicsConfig(), launch: LaunchPlan = DEFAULT_LAUNCH,
                   loading: LoadingParams = DEFAULT_LOADING, grid: ChannelGrid | None = None,
                   counts: Mapping | None = None) -> Dataset:
    try:
        p = DATASET_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset preset {name!r}; known: {sorted(DATASET_PRESETS)}") from None
    topo = preset_topology(topology or p.topology, grid)
    cfg = physics.with_realization(p.realization)
    return generate_dataset(topo, cfg, counts if counts is not None else p.counts,
                            seed * 1000 + p.seed_offset, launch, loading, preset=name)
