"""Two-phase training: teacher forcing, then autoregression, with SGD by default."""

from __future__ import annotations

import csv
import time
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .core import ChannelGrid, ComponentKind, Dataset, Topology, build_topology
from .errors import ConfigError, DataError, DivergenceError
from .linksim import DEFAULT_LAUNCH, DEFAULT_LOADING, PhysicsConfig, generate_dataset
from .model import (ModelBundle, ModelConfig, NormStats, init_bundle, normalized_arrays,
                    run_sequence)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "phase", "lr", "loss", "grad_norm")
OPTIMIZERS = ("sgd", "adam")


class Optimizer:
    """SGD (optionally with heavy-ball or Nesterov momentum) or Adam over a fixed parameter list."""

    def __init__(self, params, kind="sgd", momentum=0.0, nesterov=False,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.kind = kind
        self.momentum = momentum
        self.nesterov = nesterov
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params] if kind == "adam" else None

    def step(self, grads, lr):
        self.t += 1
        if lr == 0:
            return
        for k, (p, g) in enumerate(zip(self.params, grads)):
            if self.kind == "adam":
                b1, b2 = self.betas
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                mhat = self.m[k] / (1 - b1 ** self.t)
                vhat = self.v[k] / (1 - b2 ** self.t)
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
                continue
            if self.momentum:
                self.m[k] = self.momentum * self.m[k] + g
                g = g + self.momentum * self.m[k] if self.nesterov else self.m[k]
            p.data = p.data - lr * g


@dataclass(frozen=True)
class TrainConfig:
    tf_epochs: int = 3000
    ar_epochs: int = 9000
    lr0: float = 1e-3
    decay_every: int = 1000
    decay_gamma: float = 0.9
    clip_norm: float = 1.0
    component_weights: tuple | None = None  # per component index; None = uniform
    batch_size: int = 32
    momentum: float = 0.0
    nesterov: bool = False
    optimizer: str = "sgd"
    freeze_encoder: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.tf_epochs < 0 or self.ar_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if not self.lr0 >= 0:
            raise ConfigError("lr0 must be nonnegative")
        if not 0 < self.decay_gamma <= 1:
            raise ConfigError("decay_gamma must be in (0, 1]")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.decay_every < 1 or self.batch_size < 1:
            raise ConfigError("decay_every and batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if self.component_weights is not None:
            object.__setattr__(self, "component_weights",
                               tuple(float(w) for w in self.component_weights))

    @property
    def total_epochs(self):
        return self.tf_epochs + self.ar_epochs

    def to_dict(self):
        d = asdict(self)
        if d["component_weights"] is not None:
            d["component_weights"] = list(d["component_weights"])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **kw):
        return replace(self, **kw)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be nonnegative")
    return cfg.lr0 * cfg.decay_gamma ** (epoch // cfg.decay_every)


def sequence_loss(preds: Sequence, truths: Sequence, masks, weights=None):
    """Weighted mean of per-component masked MAE: ``sum_n w_n mae_n / sum_n w_n``."""
    if len(preds) != len(truths):
        raise DataError(f"sequence_loss: {len(preds)} predictions vs {len(truths)} targets")
    if weights is None:
        weights = [1.0] * len(preds)
    if len(weights) != len(preds):
        raise DataError(f"sequence_loss: {len(weights)} weights for {len(preds)} components")
    total_w = float(np.sum(weights))
    if not total_w > 0:
        raise ConfigError("component weights must have a positive sum")
    masks = np.asarray(masks, dtype=bool)
    loss = None
    for p, t, w in zip(preds, truths, weights):
        if w == 0:
            continue
        p = ad.as_tensor(p)
        m = np.broadcast_to(masks, p.shape)
        term = ad.masked_mae(p, t, m) * (w / total_w)
        loss = term if loss is None else loss + term
    return loss


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads, max_norm):
    """Global-norm clipping. Accepts a list of arrays or a ``{key: array}`` dict."""
    if not max_norm > 0:
        raise ConfigError("max_norm must be positive")
    items = list(grads.values()) if isinstance(grads, dict) else list(grads)
    norm = global_norm(items)
    if norm > max_norm:
        scale = max_norm / norm
        if isinstance(grads, dict):
            return {k: g * scale for k, g in grads.items()}
        return [g * scale for g in items]
    return grads


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, phase, lr, loss, grad_norm):
        self.rows.append({"epoch": epoch, "phase": phase, "lr": lr, "loss": loss,
                          "grad_norm": grad_norm})

    def __len__(self):
        return len(self.rows)

    @property
    def losses(self):
        return [r["loss"] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"], r["phase"], repr(float(r["lr"])), repr(float(r["loss"])),
                        repr(float(r["grad_norm"]))])
        return buf.getvalue()


def _component_weights(cfg: TrainConfig, n):
    if cfg.component_weights is None:
        return None
    if len(cfg.component_weights) != n:
        raise ConfigError(f"{len(cfg.component_weights)} component weights for {n} components")
    return list(cfg.component_weights)


def fit(bundle: ModelBundle, dataset: Dataset, cfg: TrainConfig, params=None,
        progress=None) -> TrainingLog:
    """Optimise ``bundle`` in place on ``dataset``; returns the per-epoch log.

    Epochs ``[0, tf_epochs)`` use teacher forcing, the rest feed predictions back.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    topo = dataset.topology
    dataset.validate()
    z, masks = normalized_arrays(dataset.sequences, bundle.norm)
    if params is None:
        params = bundle.parameters_for(topo)
        if cfg.freeze_encoder:
            enc = {id(p) for p in bundle.encoder.parameters()}
            params = [p for p in params if id(p) not in enc]
    weights = _component_weights(cfg, len(topo))
    opt = Optimizer(params, cfg.optimizer, cfg.momentum, cfg.nesterov)
    std = bundle.norm.std_dbm
    B = len(dataset)
    tlog = TrainingLog()
    for epoch in range(cfg.total_epochs):
        teacher = epoch < cfg.tf_epochs
        phase = "tf" if teacher else "ar"
        lr = lr_at_epoch(cfg, epoch)
        order = ad.derive_rng(cfg.seed, "shuffle", epoch).permutation(B)
        losses, norms, sizes = [], [], []
        for bi, start in enumerate(range(0, B, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            zb, mb = z[idx], masks[idx]
            rng = ad.derive_rng(cfg.seed, "dropout", epoch, bi)
            with Tape():
                preds = run_sequence(bundle, topo, zb[:, 0], mb, teacher=zb if teacher else None,
                                     training=True, rng=rng)
                loss = sequence_loss(preds, [zb[:, n + 1] for n in range(len(topo))], mb, weights)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch} ({phase}), batch {bi}")
            grads = ad.backward(loss)
            g = [grads.get(p) if p in grads else np.zeros(p.shape) for p in params]
            norm = global_norm(g)
            if not np.isfinite(norm):
                raise DivergenceError(f"non-finite gradient norm at epoch {epoch}, batch {bi}")
            if norm > cfg.clip_norm:
                g = [gi * (cfg.clip_norm / norm) for gi in g]
            opt.step(g, lr)
            losses.append(value * std)
            norms.append(norm)
            sizes.append(len(idx))
        w = np.asarray(sizes, dtype=np.float64)
        tlog.append(epoch, phase, lr, float(np.dot(losses, w) / w.sum()),
                    float(np.dot(norms, w) / w.sum()))
        if progress is not None:
            progress(tlog.rows[-1])
    return tlog


def fit_norm(dataset: Dataset) -> NormStats:
    powers = np.stack([s.powers() for s in dataset.sequences])
    masks = np.stack([s.mask for s in dataset.sequences])
    return NormStats.fit(powers, masks, dataset.topology)


def train_base(dataset: Dataset, cfg: TrainConfig, init_seed: int = 0,
               model_cfg: ModelConfig | None = None, progress=None):
    """Fresh bundle with one decoder per component kind, trained on ``dataset``."""
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    topo: Topology = dataset.topology
    model_cfg = model_cfg or ModelConfig(num_channels=topo.grid.num_channels)
    if model_cfg.num_channels != topo.grid.num_channels:
        raise ConfigError(f"model expects {model_cfg.num_channels} channels, grid has "
                          f"{topo.grid.num_channels}")
    bundle = init_bundle(model_cfg, init_seed, fit_norm(dataset), tuple(ComponentKind))
    bundle.meta.update({"train": cfg.to_dict(), "init_seed": int(init_seed),
                        "dataset_hash": dataset.meta.get("config_hash"),
                        "topology": topo.name})
    tlog = fit(bundle, dataset, cfg, progress=progress)
    return bundle, tlog


def gradient_audit(seed: int = 0, num_channels: int = 8, hidden: int = 8, layers: int = 3,
                   spans=(40,), batch: int = 2, epsilon: float = 1e-5) -> dict:
    """Finite-difference check of every parameter of a small dropout-free model.

    Both unrolling modes are checked on simulated sequences; returns the worst
    relative error overall and per mode.
    """
    start = time.perf_counter()
    grid = ChannelGrid(num_channels)
    topo = build_topology(list(spans), grid=grid, name="audit")
    loading = replace(DEFAULT_LOADING, goalpost_widths=(1, max(1, (num_channels - 1) // 2)))
    ds = generate_dataset(topo, PhysicsConfig(), {"Random": batch}, seed, DEFAULT_LAUNCH, loading)
    bundle = init_bundle(ModelConfig(num_channels, hidden, layers, 0.0, hidden, hidden), seed,
                         fit_norm(ds))
    z, masks = normalized_arrays(ds.sequences, bundle.norm)
    targets = [z[:, n + 1] for n in range(len(topo))]
    params = bundle.parameters_for(topo)
    result = {"num_parameters": int(sum(p.data.size for p in params))}
    for mode in ("tf", "ar"):
        teacher = z if mode == "tf" else None

        def loss_fn():
            preds = run_sequence(bundle, topo, z[:, 0], masks, teacher=teacher)
            return sequence_loss(preds, targets, masks)

        result[mode] = ad.grad_check(loss_fn, params, epsilon)
    result["max_rel_err"] = max(result["tf"], result["ar"])
    result["seconds"] = time.perf_counter() - start
    return result
