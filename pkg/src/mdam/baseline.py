"""Direct cascade: one independently trained feed-forward model per device, chained."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .core import FEATURE_DIM, ComponentKind, Dataset, DeviceConfig, Topology
from .errors import ConfigError, DataError, DivergenceError, MissingDecoderError
from .model import SENTINEL_NORM, NormStats, ParamGroup, _uniform
from .training import fit_norm, global_norm, lr_at_epoch


@dataclass(frozen=True)
class DeviceTrainConfig:
    epochs: int = 2000
    lr0: float = 1e-3
    decay_every: int = 1000
    decay_gamma: float = 0.9
    clip_norm: float = 1.0
    batch_size: int = 32
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ConfigError("invalid epochs, batch_size or decay_every")
        if not self.clip_norm > 0 or not 0 < self.decay_gamma <= 1 or not 0 <= self.momentum < 1:
            raise ConfigError("invalid clip_norm, decay_gamma or momentum")

    def to_dict(self):
        return asdict(self)


class DeviceModel:
    """``[spectrum ⊕ features] -> tanh hidden -> spectrum`` for a single device."""

    def __init__(self, device: DeviceConfig, params: ParamGroup, norm: NormStats):
        self.device = device
        self.params = params
        self.norm = norm

    @classmethod
    def init(cls, device: DeviceConfig, num_channels, norm: NormStats, seed=0, hidden=100):
        rng = ad.derive_rng(seed, "baseline-init", device.kind.value)
        width = num_channels + FEATURE_DIM
        params = ParamGroup({
            "hid.w": ad.parameter(_uniform(rng, width, (width, hidden))),
            "hid.b": ad.parameter(_uniform(rng, width, (hidden,))),
            "out.w": ad.parameter(_uniform(rng, hidden, (hidden, num_channels))),
            "out.b": ad.parameter(_uniform(rng, hidden, (num_channels,))),
        })
        return cls(device, params, norm)

    def for_device(self, device: DeviceConfig) -> "DeviceModel":
        return DeviceModel(device, self.params.clone(), self.norm)

    def forward(self, z_in):
        z_in = ad.as_tensor(z_in)
        feats = np.broadcast_to(self.norm.scale_features(self.device.features),
                                z_in.shape[:-1] + (FEATURE_DIM,))
        x = ad.concat([z_in, ad.Tensor(feats)], axis=-1)
        hid = ad.tanh(ad.linear(x, self.params["hid.w"], self.params["hid.b"]))
        return ad.linear(hid, self.params["out.w"], self.params["out.b"])

    def predict(self, powers_dbm, mask):
        """dBm in, dBm out; unloaded channels stay at the sentinel."""
        z = self.norm.normalize(powers_dbm, mask)
        return self.norm.denormalize(self.forward(z).data, mask)


def device_pairs(dataset: Dataset) -> dict:
    """``device_id -> (P_in[B, C], P_out[B, C], masks[B, C])`` in dBm."""
    powers = np.stack([s.powers() for s in dataset.sequences])
    masks = np.stack([s.mask for s in dataset.sequences])
    return {dev.device_id: (powers[:, n], powers[:, n + 1], masks)
            for n, dev in enumerate(dataset.topology.components)}


def train_device_model(pairs, cfg: DeviceTrainConfig, model: DeviceModel):
    """SGD on single-step masked MAE; trains ``model`` in place and returns it with its loss log."""
    p_in, p_out, masks = pairs
    if len(p_in) == 0:
        raise DataError("need at least one (input, output) pair")
    norm = model.norm
    z_in = norm.normalize(p_in, masks)
    z_out = norm.normalize(p_out, masks)
    params = model.params.parameters()
    velocity = [np.zeros(p.shape) for p in params] if cfg.momentum else None
    B = len(z_in)
    losses = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = ad.derive_rng(cfg.seed, "baseline-shuffle", model.device.device_id, epoch).permutation(B)
        total = 0.0
        for start in range(0, B, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with Tape():
                loss = ad.masked_mae(model.forward(z_in[idx]), z_out[idx], masks[idx])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"{model.device.device_id}: non-finite loss at epoch {epoch}")
            grads = ad.backward(loss)
            g = [grads.get(p, np.zeros(p.shape)) for p in params]
            gn = global_norm(g)
            if gn > cfg.clip_norm:
                g = [x * (cfg.clip_norm / gn) for x in g]
            for k, (p, gi) in enumerate(zip(params, g)):
                if velocity is not None:
                    velocity[k] = cfg.momentum * velocity[k] + gi
                    gi = velocity[k]
                p.data = p.data - lr * gi
            total += loss.item() * len(idx)
        losses.append(total / B * norm.std_dbm)
    return model, losses


def train_cascade(lab: Dataset, target: Dataset, pre_cfg: DeviceTrainConfig,
                  tune_cfg: DeviceTrainConfig, norm: NormStats | None = None, hidden=100) -> dict:
    """Kind-level models fitted on lab pairs, then one copy per target device fitted on its pairs.

    The data budget matches the MDAM lab + transfer workflow.
    """
    norm = norm or fit_norm(lab)
    C = lab.topology.grid.num_channels
    lab_pairs = device_pairs(lab)
    by_kind = {}
    for dev in lab.topology.components:
        model = DeviceModel.init(dev, C, norm, pre_cfg.seed, hidden)
        by_kind[dev.kind], _ = train_device_model(lab_pairs[dev.device_id], pre_cfg, model)
    tgt_pairs = device_pairs(target)
    models = {}
    for dev in target.topology.components:
        if dev.kind not in by_kind:
            raise MissingDecoderError(f"no lab model for kind {dev.kind.value}")
        models[dev.device_id], _ = train_device_model(tgt_pairs[dev.device_id], tune_cfg,
                                                      by_kind[dev.kind].for_device(dev))
    return models


def cascade_predict(p0_dbm, mask, topo: Topology, models: dict) -> list:
    """Chain ``models[device_id].predict`` along ``topo``; returns ``N`` dBm arrays.

    Works on a single spectrum ``[C]`` or a batch ``[B, C]``.
    """
    x = np.asarray(p0_dbm, dtype=np.float64)
    out = []
    for dev in topo.components:
        m = models.get(dev.device_id)
        if m is None:
            raise MissingDecoderError(f"no cascade model for device {dev.device_id!r}")
        x = m.predict(x, mask)
        out.append(x)
    return out


class CascadeModel:
    """Adapter so a cascade can be evaluated like a bundle."""

    def __init__(self, models: dict, name="Direct Cascade"):
        self.models = models
        self.name = name

    def predict_batch(self, topo: Topology, seqs):
        p0 = np.stack([s.powers()[0] for s in seqs])
        masks = np.stack([s.mask for s in seqs])
        return np.stack(cascade_predict(p0, masks, topo, self.models), axis=1)
