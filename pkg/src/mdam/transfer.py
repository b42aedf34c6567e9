"""Move a lab-trained bundle onto a new topology and fine-tune it with few sequences."""

from __future__ import annotations

from .core import Dataset, Topology
from .errors import TransferIncompatibleError
from .model import ModelBundle
from .training import TrainConfig, fit

TL_LR0 = 1e-5
TL_CLIP_NORM = 0.5


def tl_config(**overrides) -> TrainConfig:
    """Transfer defaults: the base schedule with a lower learning rate and clip threshold."""
    params = {"lr0": TL_LR0, "clip_norm": TL_CLIP_NORM}
    params.update(overrides)
    return TrainConfig(**params)


def instantiate_target(base: ModelBundle, target: Topology) -> ModelBundle:
    """Copy the encoder and give every target device its own copy of its kind's base decoder.

    ``base`` is left untouched.
    """
    missing = sorted(k.value for k in target.kinds if k not in base.decoder_bases)
    if missing:
        raise TransferIncompatibleError(f"base bundle lacks kind decoders for {missing}")
    decoders = {dev.device_id: base.decoder_bases[dev.kind].clone() for dev in target.components}
    bases = {k: v.clone() for k, v in base.decoder_bases.items()}
    meta = dict(base.meta)
    meta.update({"topology": target.name, "transferred_from": base.meta.get("topology")})
    return ModelBundle(base.config, base.encoder.clone(), decoders, bases, base.norm,
                       base.schema_version, meta)


def fine_tune(bundle: ModelBundle, dataset: Dataset, cfg: TrainConfig | None = None,
              progress=None):
    """Two-phase training of a copy of ``bundle`` on target measurements.

    Encoder and all device decoders are trainable unless ``cfg.freeze_encoder``.
    """
    cfg = cfg or tl_config()
    topo = dataset.topology
    unknown = [d.device_id for d in topo.components if d.device_id not in bundle.decoders]
    if unknown:
        raise TransferIncompatibleError(
            f"bundle has no device decoders for {unknown}; run instantiate_target first")
    tuned = bundle.clone()
    tuned.meta["fine_tune"] = cfg.to_dict()
    tuned.meta["fine_tune_dataset_hash"] = dataset.meta.get("config_hash")
    tlog = fit(tuned, dataset, cfg, progress=progress)
    return tuned, tlog
