"""Domain types: channel grid, spectra, devices, topologies and measurement sequences.

Everything here is an immutable value object. Spectra are stored in dBm with a
per-channel loading mask; unloaded channels always carry :data:`SENTINEL_DBM`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidTopologyError, SchemaError, SequenceValidationError

SENTINEL_DBM = -60.0
FEATURE_DIM = 4
TOPOLOGY_SCHEMA_VERSION = 1

DEFAULT_NUM_CHANNELS = 95
DEFAULT_SPACING_GHZ = 50.0
DEFAULT_START_THZ = 191.35


class ComponentKind(str, enum.Enum):
    BOOSTER = "Booster"
    PREAMP = "Preamp"
    SPAN = "Span"
    WSS = "Wss"

    @property
    def is_edfa(self):
        return self in (ComponentKind.BOOSTER, ComponentKind.PREAMP)


class LoadingMode(str, enum.Enum):
    FIXED = "Fixed"
    RANDOM = "Random"
    GOALPOST = "Goalpost"


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ChannelGrid:
    """Fixed 50 GHz grid; channel ``i`` sits at ``start_thz + i * spacing``."""

    num_channels: int = DEFAULT_NUM_CHANNELS
    spacing_ghz: float = DEFAULT_SPACING_GHZ
    start_thz: float = DEFAULT_START_THZ

    def __post_init__(self):
        if self.num_channels < 1:
            raise InvalidTopologyError("grid needs at least one channel")
        if self.spacing_ghz <= 0:
            raise InvalidTopologyError("channel spacing must be positive")

    @property
    def center_frequencies_thz(self) -> np.ndarray:
        return self.start_thz + np.arange(self.num_channels) * (self.spacing_ghz * 1e-3)

    @property
    def band_position(self) -> np.ndarray:
        """Channel position ``u`` in [0, 1] across the band."""
        if self.num_channels == 1:
            return np.zeros(1)
        return np.arange(self.num_channels) / (self.num_channels - 1)

    def to_dict(self):
        return {"num_channels": self.num_channels, "spacing_ghz": self.spacing_ghz,
                "start_thz": self.start_thz}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["num_channels"]), float(d["spacing_ghz"]), float(d["start_thz"]))


@dataclass(frozen=True, eq=False)
class PowerSpectrum:
    powers_dbm: np.ndarray
    loaded: np.ndarray

    def __post_init__(self):
        p = _frozen(self.powers_dbm)
        m = _frozen(self.loaded, dtype=bool)
        if p.ndim != 1 or p.shape != m.shape:
            raise ValueError(f"powers {p.shape} and mask {m.shape} must be equal-length vectors")
        if not np.all(np.isfinite(p[m])):
            raise ValueError("loaded channels must carry finite powers")
        if np.any(p[~m] != SENTINEL_DBM):
            raise ValueError(f"unloaded channels must carry the sentinel {SENTINEL_DBM} dBm")
        object.__setattr__(self, "powers_dbm", p)
        object.__setattr__(self, "loaded", m)

    @classmethod
    def from_values(cls, powers_dbm, loaded) -> "PowerSpectrum":
        """Build a spectrum, overwriting unloaded channels with the sentinel."""
        m = np.asarray(loaded, dtype=bool)
        p = np.where(m, np.asarray(powers_dbm, dtype=np.float64), SENTINEL_DBM)
        return cls(p, m)

    @classmethod
    def flat(cls, power_dbm, loaded) -> "PowerSpectrum":
        m = np.asarray(loaded, dtype=bool)
        return cls.from_values(np.full(m.shape, float(power_dbm)), m)

    @property
    def num_channels(self):
        return self.powers_dbm.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PowerSpectrum):
            return NotImplemented
        return (np.array_equal(self.loaded, other.loaded)
                and self.powers_dbm.tobytes() == other.powers_dbm.tobytes())

    __hash__ = None

    def to_dict(self):
        return {"powers_dbm": self.powers_dbm.tolist(),
                "loaded": self.loaded.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["powers_dbm"], dtype=np.float64), np.array(d["loaded"], dtype=bool))


@dataclass(frozen=True)
class DeviceConfig:
    """One component. ``features`` slot meaning depends on ``kind``:

    * Booster/Preamp: ``[target_gain_db, tilt_db, 0, 0]``
    * Span: ``[length_km, atten_coeff_db_per_km, 0, 0]``
    * Wss: ``[mean_atten_db, ripple_amp_db, 0, 0]``
    """

    kind: ComponentKind
    device_id: str
    features: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", ComponentKind(self.kind))
        feats = tuple(float(f) for f in self.features)
        if len(feats) > FEATURE_DIM:
            raise InvalidTopologyError(f"{self.device_id}: at most {FEATURE_DIM} features")
        feats = feats + (0.0,) * (FEATURE_DIM - len(feats))
        if not all(np.isfinite(feats)):
            raise InvalidTopologyError(f"{self.device_id}: non-finite feature")
        if self.kind.is_edfa:
            if feats[0] < 0:
                raise InvalidTopologyError(f"{self.device_id}: negative gain")
        elif self.kind is ComponentKind.SPAN:
            if feats[0] <= 0 or feats[1] < 0:
                raise InvalidTopologyError(f"{self.device_id}: span length must be > 0, attenuation >= 0")
        elif feats[0] < 0 or feats[1] < 0:
            raise InvalidTopologyError(f"{self.device_id}: negative WSS attenuation or ripple")
        object.__setattr__(self, "features", feats)

    def to_dict(self):
        return {"kind": self.kind.value, "device_id": self.device_id, "features": list(self.features)}

    @classmethod
    def from_dict(cls, d):
        return cls(ComponentKind(d["kind"]), str(d["device_id"]), tuple(d["features"]))


@dataclass(frozen=True)
class Topology:
    name: str
    components: tuple
    grid: ChannelGrid = field(default_factory=ChannelGrid)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise InvalidTopologyError(f"topology {self.name!r} has no components")
        ids = [c.device_id for c in comps]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise InvalidTopologyError(f"duplicate device ids: {dup}")
        object.__setattr__(self, "components", comps)

    def __len__(self):
        return len(self.components)

    @property
    def num_edfas(self):
        return sum(c.kind.is_edfa for c in self.components)

    @property
    def kinds(self):
        return {c.kind for c in self.components}

    def feature_matrix(self) -> np.ndarray:
        return np.array([c.features for c in self.components], dtype=np.float64)

    def to_dict(self):
        return {"schema_version": TOPOLOGY_SCHEMA_VERSION, "name": self.name,
                "grid": self.grid.to_dict(),
                "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != TOPOLOGY_SCHEMA_VERSION:
            raise SchemaError(f"unsupported topology schema_version {d.get('schema_version')!r}")
        return cls(d["name"], tuple(DeviceConfig.from_dict(c) for c in d["components"]),
                   ChannelGrid.from_dict(d["grid"]))


def build_topology(spans: Iterable, edfa_gain_db: float = 18.0, tilt_db: float = 0.0,
                   name: str | None = None, atten_coeff: float = 0.21,
                   grid: ChannelGrid | None = None, id_prefix: str = "") -> Topology:
    """Expand a span list into ``Booster, Span, Preamp`` triples.

    Entries are span lengths in km. A WSS is inserted where an entry is the
    string ``"wss"`` or a tuple ``("wss", mean_atten_db, ripple_amp_db)``.
    """
    entries = list(spans)
    if not entries:
        raise InvalidTopologyError("empty span list")
    comps = []
    counter = {k: 0 for k in ComponentKind}

    def add(kind, feats):
        counter[kind] += 1
        comps.append(DeviceConfig(kind, f"{id_prefix}{kind.value.lower()}-{counter[kind]}", feats))

    for e in entries:
        if isinstance(e, str) or isinstance(e, (tuple, list)):
            head = e if isinstance(e, str) else e[0]
            if str(head).lower() != "wss":
                raise InvalidTopologyError(f"unknown topology entry {e!r}")
            atten, ripple = (6.0, 0.2) if isinstance(e, str) else (float(e[1]), float(e[2]))
            add(ComponentKind.WSS, (atten, ripple))
            continue
        length = float(e)
        if not length > 0:
            raise InvalidTopologyError(f"span length must be > 0, got {e!r}")
        add(ComponentKind.BOOSTER, (edfa_gain_db, tilt_db))
        add(ComponentKind.SPAN, (length, atten_coeff))
        add(ComponentKind.PREAMP, (edfa_gain_db, tilt_db))
    if name is None:
        name = "-".join(f"{float(e):g}" for e in entries if not isinstance(e, (str, tuple, list)))
    return Topology(name, tuple(comps), grid or ChannelGrid())


@dataclass(frozen=True)
class MeasurementSequence:
    """OCM readings ``[P_0, ..., P_N]`` along one topology."""

    topology_name: str
    loading_label: LoadingMode
    spectra: tuple

    def __post_init__(self):
        object.__setattr__(self, "loading_label", LoadingMode(self.loading_label))
        object.__setattr__(self, "spectra", tuple(self.spectra))

    @property
    def mask(self) -> np.ndarray:
        return self.spectra[0].loaded

    @property
    def launch(self) -> PowerSpectrum:
        return self.spectra[0]

    def powers(self) -> np.ndarray:
        """``(N+1, C)`` array of dBm values."""
        return np.stack([s.powers_dbm for s in self.spectra])

    def __eq__(self, other):
        if not isinstance(other, MeasurementSequence):
            return NotImplemented
        return (self.topology_name == other.topology_name
                and self.loading_label == other.loading_label
                and len(self.spectra) == len(other.spectra)
                and all(a == b for a, b in zip(self.spectra, other.spectra)))

    __hash__ = None

    def to_dict(self):
        return {"topology_name": self.topology_name, "loading": self.loading_label.value,
                "loaded": self.mask.astype(int).tolist(),
                "powers_dbm": [s.powers_dbm.tolist() for s in self.spectra]}

    @classmethod
    def from_dict(cls, d):
        mask = np.array(d["loaded"], dtype=bool)
        spectra = tuple(PowerSpectrum(np.array(p, dtype=np.float64), mask) for p in d["powers_dbm"])
        return cls(d["topology_name"], LoadingMode(d["loading"]), spectra)


def validate_sequence(seq: MeasurementSequence, topo: Topology) -> None:
    """Raise :class:`SequenceValidationError` unless ``seq`` fits ``topo``."""
    n = len(topo)
    if seq.topology_name != topo.name:
        raise SequenceValidationError(
            "topology-mismatch", f"sequence for {seq.topology_name!r}, topology is {topo.name!r}")
    if len(seq.spectra) != n + 1:
        raise SequenceValidationError(
            "length-mismatch", f"expected {n + 1} spectra, got {len(seq.spectra)}", len(seq.spectra))
    ref = seq.spectra[0].loaded
    for i, s in enumerate(seq.spectra):
        if s.num_channels != topo.grid.num_channels:
            raise SequenceValidationError(
                "grid-mismatch", f"step {i} has {s.num_channels} channels, grid has "
                f"{topo.grid.num_channels}", i)
        if not np.array_equal(s.loaded, ref):
            raise SequenceValidationError("mask-drift", f"loading mask at step {i} differs from step 0", i)


def stack_sequences(seqs: Sequence[MeasurementSequence]):
    """Return ``(powers[B, N+1, C], masks[B, C])`` arrays."""
    powers = np.stack([s.powers() for s in seqs])
    masks = np.stack([s.mask for s in seqs])
    return powers, masks


@dataclass
class Dataset:
    """Measurement sequences recorded on one topology."""

    topology: Topology
    sequences: list = field(default_factory=list)
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def counts(self) -> dict:
        c = {m.value: 0 for m in LoadingMode}
        for s in self.sequences:
            c[s.loading_label.value] += 1
        return c

    def subset(self, labels) -> "Dataset":
        labels = {LoadingMode(x) for x in labels}
        return Dataset(self.topology, [s for s in self.sequences if s.loading_label in labels],
                       self.seed, dict(self.meta))

    def validate(self):
        for s in self.sequences:
            validate_sequence(s, self.topology)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.topology == other.topology and self.seed == other.seed
                and self.meta == other.meta and len(self) == len(other)
                and all(a == b for a, b in zip(self.sequences, other.sequences)))
