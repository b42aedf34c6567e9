"""Multi-decoder attention model for optical power-spectrum evolution along a link."""

from .core import (ChannelGrid, ComponentKind, Dataset, DeviceConfig, LoadingMode,
                   MeasurementSequence, PowerSpectrum, Topology, build_topology, validate_sequence)
from .model import ModelBundle, ModelConfig, NormStats, init_bundle

__version__ = "0.1.0"

__all__ = [
    "ChannelGrid", "ComponentKind", "Dataset", "DeviceConfig", "LoadingMode",
    "MeasurementSequence", "PowerSpectrum", "Topology", "build_topology", "validate_sequence",
    "ModelBundle", "ModelConfig", "NormStats", "init_bundle",
]
