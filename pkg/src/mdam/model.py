"""Multi-decoder attention model.

A shared stacked LSTM encoder walks the component sequence. At component ``n``
its top-layer hidden state ``h_n`` attends (plain dot products) over the hidden
states of the previous components; the resulting context, ``h_n`` and an
embedding of the device features go to a small decoder owned by that device
(or by its component kind), which predicts the normalized output spectrum.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import (FEATURE_DIM, SENTINEL_DBM, ComponentKind, DeviceConfig, LoadingMode,
                   MeasurementSequence, PowerSpectrum, Topology, stack_sequences,
                   validate_sequence)
from .errors import (ConfigError, MissingDecoderError, MissingGroupError, NumericError,
                     ShapeError)

SCHEMA_VERSION = 1
SENTINEL_NORM = -4.0  # well below any z-scored loaded reading


@dataclass(frozen=True)
class ModelConfig:
    num_channels: int = 95
    hidden: int = 100
    layers: int = 3
    dropout: float = 0.2
    decoder_hidden: int = 100
    embed_dim: int | None = None  # defaults to ``hidden``

    def __post_init__(self):
        if min(self.num_channels, self.hidden, self.layers, self.decoder_hidden) < 1:
            raise ConfigError("model dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def feature_embed(self):
        return self.hidden if self.embed_dim is None else self.embed_dim

    def to_dict(self):
        return {"num_channels": self.num_channels, "hidden": self.hidden, "layers": self.layers,
                "dropout": self.dropout, "decoder_hidden": self.decoder_hidden,
                "embed_dim": self.embed_dim}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class NormStats:
    """z-score over loaded-channel dBm values; features divided by per-slot scales."""

    mean_dbm: float = 0.0
    std_dbm: float = 1.0
    feature_scales: tuple = (1.0,) * FEATURE_DIM

    def __post_init__(self):
        if not self.std_dbm > 0:
            raise ConfigError("std_dbm must be positive")
        scales = tuple(float(s) for s in self.feature_scales)
        if len(scales) != FEATURE_DIM or min(scales) <= 0:
            raise ConfigError("feature_scales must be 4 positive values")
        object.__setattr__(self, "feature_scales", scales)

    @classmethod
    def fit(cls, powers_dbm, masks, topo: Topology | None = None):
        powers_dbm = np.asarray(powers_dbm)
        masks = np.asarray(masks, dtype=bool)
        full = np.broadcast_to(masks[:, None, :], powers_dbm.shape) if powers_dbm.ndim == 3 else masks
        vals = powers_dbm[full]
        std = float(np.std(vals)) if vals.size > 1 else 1.0
        scales = (1.0,) * FEATURE_DIM
        if topo is not None:
            m = np.abs(topo.feature_matrix()).max(axis=0)
            scales = tuple(float(s) if s > 0 else 1.0 for s in m)
        return cls(float(np.mean(vals)), std if std > 0 else 1.0, scales)

    def normalize(self, powers_dbm, mask):
        z = (np.asarray(powers_dbm, dtype=np.float64) - self.mean_dbm) / self.std_dbm
        return np.where(mask, z, SENTINEL_NORM)

    def denormalize(self, z, mask):
        return np.where(mask, np.asarray(z) * self.std_dbm + self.mean_dbm, SENTINEL_DBM)

    def scale_features(self, features):
        return np.asarray(features, dtype=np.float64) / np.asarray(self.feature_scales)

    def to_dict(self):
        return {"mean_dbm": self.mean_dbm, "std_dbm": self.std_dbm,
                "feature_scales": list(self.feature_scales)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["mean_dbm"]), float(d["std_dbm"]), tuple(d["feature_scales"]))


class ParamGroup:
    """Ordered collection of named parameter tensors."""

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def named(self):
        return list(self.tensors.items())

    def parameters(self):
        return list(self.tensors.values())

    def clone(self):
        return type(self)({k: ad.parameter(v.data, v.name) for k, v in self.tensors.items()})

    def to_arrays(self):
        return {k: v.data for k, v in self.tensors.items()}

    def tobytes(self):
        return b"".join(v.data.tobytes() for v in self.tensors.values())


class EncoderParams(ParamGroup):
    """Per layer ``l``: ``l{l}.w`` of shape ``[in + H, 4H]`` and ``l{l}.b`` of ``[4H]``.

    Gate column order is input, forget, candidate, output.
    """

    @property
    def num_layers(self):
        return len(self.tensors) // 2

    def layer(self, i):
        return self.tensors[f"l{i}.w"], self.tensors[f"l{i}.b"]


class DecoderParams(ParamGroup):
    """``feat.w/b`` embed the device features; ``hid.w/b`` and ``out.w/b`` form the MLP."""


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(cfg: ModelConfig, rng) -> EncoderParams:
    t = {}
    H = cfg.hidden
    for i in range(cfg.layers):
        width = (cfg.num_channels if i == 0 else H) + H
        t[f"l{i}.w"] = ad.parameter(_uniform(rng, width, (width, 4 * H)), f"encoder.l{i}.w")
        b = _uniform(rng, width, (4 * H,))
        b[H:2 * H] = 1.0
        t[f"l{i}.b"] = ad.parameter(b, f"encoder.l{i}.b")
    return EncoderParams(t)


def init_decoder(cfg: ModelConfig, rng, label="decoder") -> DecoderParams:
    E, D, C, H = cfg.feature_embed, cfg.decoder_hidden, cfg.num_channels, cfg.hidden
    width = 2 * H + E
    return DecoderParams({
        "feat.w": ad.parameter(_uniform(rng, FEATURE_DIM, (FEATURE_DIM, E)), f"{label}.feat.w"),
        "feat.b": ad.parameter(_uniform(rng, FEATURE_DIM, (E,)), f"{label}.feat.b"),
        "hid.w": ad.parameter(_uniform(rng, width, (width, D)), f"{label}.hid.w"),
        "hid.b": ad.parameter(_uniform(rng, width, (D,)), f"{label}.hid.b"),
        "out.w": ad.parameter(_uniform(rng, D, (D, C)), f"{label}.out.w"),
        "out.b": ad.parameter(_uniform(rng, D, (C,)), f"{label}.out.b"),
    })


@dataclass
class ModelBundle:
    config: ModelConfig
    encoder: EncoderParams | None  # None only for decoder-only partial loads
    decoders: dict = field(default_factory=dict)  # device_id -> DecoderParams
    decoder_bases: dict = field(default_factory=dict)  # ComponentKind -> DecoderParams
    norm: NormStats = field(default_factory=NormStats)
    schema_version: int = SCHEMA_VERSION
    meta: dict = field(default_factory=dict)

    def resolve_decoder(self, device: DeviceConfig) -> DecoderParams:
        dec = self.decoders.get(device.device_id)
        if dec is None:
            dec = self.decoder_bases.get(device.kind)
        if dec is None:
            raise MissingDecoderError(
                f"no decoder for device {device.device_id!r} or kind {device.kind.value}")
        return dec

    def groups(self):
        """``(group name, ParamGroup)`` pairs in a stable order."""
        out = [("encoder", self.encoder)] if self.encoder is not None else []
        for kind in ComponentKind:
            if kind in self.decoder_bases:
                out.append((f"decoder/kind/{kind.value}", self.decoder_bases[kind]))
        for dev_id in sorted(self.decoders):
            out.append((f"decoder/device/{dev_id}", self.decoders[dev_id]))
        return out

    def parameters(self):
        return [p for _, g in self.groups() for p in g.parameters()]

    def parameters_for(self, topo: Topology):
        """Parameters reachable when running ``topo`` (encoder + resolved decoders)."""
        if self.encoder is None:
            raise MissingGroupError("bundle was loaded without its encoder")
        seen, out = set(), list(self.encoder.parameters())
        for dev in topo.components:
            dec = self.resolve_decoder(dev)
            if id(dec) not in seen:
                seen.add(id(dec))
                out.extend(dec.parameters())
        return out

    def clone(self) -> "ModelBundle":
        enc = None if self.encoder is None else self.encoder.clone()
        return ModelBundle(self.config, enc,
                           {k: v.clone() for k, v in self.decoders.items()},
                           {k: v.clone() for k, v in self.decoder_bases.items()},
                           self.norm, self.schema_version, copy.deepcopy(self.meta))

    def parameter_bytes(self) -> bytes:
        return b"".join(g.tobytes() for _, g in self.groups())


def init_bundle(cfg: ModelConfig, seed: int, norm: NormStats | None = None,
                kinds: Sequence[ComponentKind] = tuple(ComponentKind)) -> ModelBundle:
    encoder = init_encoder(cfg, ad.derive_rng(seed, "init", "encoder"))
    bases = {ComponentKind(k): init_decoder(cfg, ad.derive_rng(seed, "init", "decoder", ComponentKind(k).value),
                                            f"decoder.{ComponentKind(k).value}")
             for k in kinds}
    return ModelBundle(cfg, encoder, {}, bases, norm or NormStats())


# Single-step building blocks ---------------------------------------------------

def zero_carry(encoder: EncoderParams, batch_shape=()):
    H = encoder.layer(0)[1].shape[0] // 4
    z = np.zeros(tuple(batch_shape) + (H,))
    return [(Tensor(z), Tensor(z)) for _ in range(encoder.num_layers)]


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor):
    H = h.shape[-1]
    gates = ad.linear(ad.concat([x, h], axis=-1), w, b)
    i = ad.sigmoid(ad.take(gates, 0, H))
    f = ad.sigmoid(ad.take(gates, H, 2 * H))
    g = ad.tanh(ad.take(gates, 2 * H, 3 * H))
    o = ad.sigmoid(ad.take(gates, 3 * H, 4 * H))
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def encode_step(x, carry, encoder: EncoderParams, dropout=0.0, training=False, rng=None):
    """Advance the stacked LSTM one component. Returns ``(h_top, new_carry)``."""
    x = ad.as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("encode_step: non-finite input spectrum")
    new_carry = []
    inp = x
    for i in range(encoder.num_layers):
        w, b = encoder.layer(i)
        if inp.shape[-1] + carry[i][0].shape[-1] != w.shape[0]:
            raise ShapeError(f"encode_step: input width {inp.shape[-1]} does not match layer {i}")
        h, c = lstm_cell(inp, carry[i][0], carry[i][1], w, b)
        new_carry.append((h, c))
        inp = h
        if i < encoder.num_layers - 1:
            inp = ad.dropout(inp, dropout, rng, training)
    return inp, new_carry


def attention_context(h: Tensor, history: Sequence[Tensor]):
    """Dot-product attention of ``h`` over ``history``; returns ``(weights, context)``.

    With empty history the weights are ``None`` and the context is all zeros.
    """
    h = ad.as_tensor(h)
    if not history:
        return None, Tensor(np.zeros(h.shape))
    for s in history:
        if s.shape != h.shape:
            raise ShapeError(f"attention_context: history shape {s.shape} vs query {h.shape}")
    keys = ad.stack(list(history), axis=h.ndim - 1)
    weights = ad.softmax(ad.attention_scores(h, keys), axis=-1)
    return weights, ad.weighted_sum(weights, keys)


def device_features(device: DeviceConfig, norm: NormStats) -> np.ndarray:
    return norm.scale_features(device.features)


def decode_step(h, c, device: DeviceConfig | np.ndarray, decoder: DecoderParams,
                norm: NormStats | None = None) -> Tensor:
    """Predict the normalized output spectrum from ``h ⊕ c ⊕ embed(d)``."""
    h, c = ad.as_tensor(h), ad.as_tensor(c)
    if isinstance(device, DeviceConfig):
        feats = (norm or NormStats()).scale_features(device.features)
    else:
        feats = np.asarray(device, dtype=np.float64)
    feats = np.broadcast_to(feats, h.shape[:-1] + (FEATURE_DIM,))
    d = ad.linear(feats, decoder["feat.w"], decoder["feat.b"])
    o = ad.concat([h, c, d], axis=-1)
    hid = ad.tanh(ad.linear(o, decoder["hid.w"], decoder["hid.b"]))
    return ad.linear(hid, decoder["out.w"], decoder["out.b"])


# Sequence passes ---------------------------------------------------------------

@dataclass
class StepTrace:
    inputs: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    contexts: list = field(default_factory=list)


DecodeFn = Callable[[int, DeviceConfig, Tensor, Tensor, Tensor], Tensor]


def run_sequence(bundle: ModelBundle, topo: Topology, x0, masks, teacher=None,
                 training=False, rng=None, decode_fn: DecodeFn | None = None,
                 trace: StepTrace | None = None) -> list:
    """Core unrolled pass over ``topo`` on normalized inputs.

    ``x0`` is ``[..., C]``; ``teacher`` (if given) holds normalized ground truth
    ``[..., N+1, C]`` and switches to teacher forcing. In autoregressive mode the
    prediction is fed back with unloaded channels reset to the sentinel.
    ``decode_fn(n, device, h, c, x_in)`` replaces the learned decoders (tests).
    """
    if bundle.encoder is None:
        raise MissingGroupError("bundle was loaded without its encoder")
    masks = np.asarray(masks, dtype=bool)
    x = ad.as_tensor(x0)
    carry = zero_carry(bundle.encoder, x.shape[:-1])
    history, preds = [], []
    for n, dev in enumerate(topo.components):
        h, carry = encode_step(x, carry, bundle.encoder, bundle.config.dropout, training, rng)
        weights, ctx = attention_context(h, history)
        if trace is not None:
            trace.inputs.append(x.data.copy())
            trace.hidden.append(h.data.copy())
            trace.weights.append(None if weights is None else weights.data.copy())
            trace.contexts.append(ctx.data.copy())
        history.append(h)
        if decode_fn is None:
            y = decode_step(h, ctx, dev, bundle.resolve_decoder(dev), bundle.norm)
        else:
            y = ad.as_tensor(decode_fn(n, dev, h, ctx, x))
        preds.append(y)
        if teacher is not None:
            x = Tensor(np.asarray(teacher)[..., n + 1, :])
        else:
            x = ad.masked_fill(y, masks, SENTINEL_NORM)
    return preds


def normalized_arrays(seqs: Sequence[MeasurementSequence], norm: NormStats):
    """``(z[B, N+1, C], masks[B, C])`` with sentinel channels at ``SENTINEL_NORM``."""
    powers, masks = stack_sequences(seqs)
    return norm.normalize(powers, masks[:, None, :]), masks


def forward_teacher_forced(seq: MeasurementSequence, topo: Topology, bundle: ModelBundle,
                           **kwargs) -> list:
    validate_sequence(seq, topo)
    z, masks = normalized_arrays([seq], bundle.norm)
    preds = run_sequence(bundle, topo, z[0, 0], masks[0], teacher=z[0], **kwargs)
    return [p.data for p in preds]


def forward_autoregressive(p0: PowerSpectrum, topo: Topology, bundle: ModelBundle,
                           **kwargs) -> list:
    if p0.num_channels != topo.grid.num_channels:
        raise ShapeError(f"launch spectrum has {p0.num_channels} channels, grid has "
                         f"{topo.grid.num_channels}")
    x0 = bundle.norm.normalize(p0.powers_dbm, p0.loaded)
    preds = run_sequence(bundle, topo, x0, p0.loaded, **kwargs)
    return [p.data for p in preds]


def predict_sequence(p0: PowerSpectrum, topo: Topology, bundle: ModelBundle,
                     loading_label=LoadingMode.FIXED) -> MeasurementSequence:
    preds = forward_autoregressive(p0, topo, bundle)
    spectra = [p0] + [PowerSpectrum.from_values(bundle.norm.denormalize(z, p0.loaded), p0.loaded)
                      for z in preds]
    return MeasurementSequence(topo.name, loading_label, tuple(spectra))


def predict_batch(bundle: ModelBundle, topo: Topology, seqs: Sequence[MeasurementSequence]):
    """Autoregressive predictions in dBm, ``[B, N, C]`` (sentinel where unloaded)."""
    z, masks = normalized_arrays(seqs, bundle.norm)
    preds = run_sequence(bundle, topo, z[:, 0], masks)
    out = np.stack([p.data for p in preds], axis=1)
    return bundle.norm.denormalize(out, masks[:, None, :])
