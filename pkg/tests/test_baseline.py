import numpy as np
import pytest

from mdam import baseline as bl, linksim as ls, training as tr
from mdam.core import (SENTINEL_DBM, ChannelGrid, ComponentKind, DeviceConfig, PowerSpectrum, Topology,
                       build_topology)
from mdam.errors import DataError, MissingDecoderError

GRID = ChannelGrid(8)


def identity_dataset():
    # a zero-attenuation span with no tilt passes the spectrum through unchanged
    topo = Topology("id", (DeviceConfig(ComponentKind.SPAN, "s", (40.0, 0.0)),), GRID)
    phys = ls.PhysicsConfig(span_tilt_db_per_km=0.0, ocm_sigma_db=0.0)
    return ls.generate_dataset(topo, phys, {"Random": 32}, 0, ls.DEFAULT_LAUNCH,
                               ls.LoadingParams(0.5, (1, 3)))


class Shift:
    """Stand-in device model adding a constant offset in dB."""

    def __init__(self, eps):
        self.eps = eps

    def predict(self, p, mask):
        return np.where(mask, p + self.eps, p)


class Oracle:
    def __init__(self, dev, phys):
        self.dev, self.phys = dev, phys

    def predict(self, p, mask):
        rows = np.atleast_2d(p)
        masks = np.broadcast_to(mask, rows.shape)
        out = [ls.propagate_component(PowerSpectrum.from_values(r, m), self.dev, self.phys, GRID).powers_dbm
               for r, m in zip(rows, masks)]
        return np.asarray(out).reshape(np.shape(p))


def test_identity_device_overfits():
    ds = identity_dataset()
    pairs = bl.device_pairs(ds)["s"]
    assert np.array_equal(pairs[0], pairs[1])
    model = bl.DeviceModel.init(ds.topology.components[0], 8, tr.fit_norm(ds), 0, 16)
    cfg = bl.DeviceTrainConfig(3000, 0.05, 1000, 0.9, 1.0, 32, 0.9)
    model, losses = bl.train_device_model(pairs, cfg, model)
    pred = model.predict(pairs[0], pairs[2])
    mae = np.abs(pred - pairs[1])[pairs[2]].mean()
    assert mae < 0.02
    assert losses[-1] < losses[0]


def test_zero_epochs_and_reproducibility():
    ds = identity_dataset()
    pairs = bl.device_pairs(ds)["s"]
    norm = tr.fit_norm(ds)
    dev = ds.topology.components[0]
    fresh = bl.DeviceModel.init(dev, 8, norm, 4)
    same, losses = bl.train_device_model(pairs, bl.DeviceTrainConfig(0), bl.DeviceModel.init(dev, 8, norm, 4))
    assert losses == [] and same.params.tobytes() == fresh.params.tobytes()
    cfg = bl.DeviceTrainConfig(3, 1e-2, batch_size=8)
    a, la = bl.train_device_model(pairs, cfg, bl.DeviceModel.init(dev, 8, norm, 4))
    b, lb = bl.train_device_model(pairs, cfg, bl.DeviceModel.init(dev, 8, norm, 4))
    assert a.params.tobytes() == b.params.tobytes() and la == lb
    with pytest.raises(DataError):
        bl.train_device_model((pairs[0][:0], pairs[1][:0], pairs[2][:0]), cfg, a)


def test_perfect_models_give_perfect_cascade():
    topo = build_topology([40, 30], grid=GRID)
    cfg = ls.PhysicsConfig(ocm_sigma_db=0.0)
    phys = ls.build_physics(topo, cfg)
    ds = ls.generate_dataset(topo, cfg, {"Random": 5}, 1, ls.DEFAULT_LAUNCH)
    models = {d.device_id: Oracle(d, phys[d.device_id]) for d in topo.components}
    cm = bl.CascadeModel(models)
    pred = cm.predict_batch(topo, ds.sequences)
    truth = np.stack([s.powers()[1:] for s in ds.sequences])
    assert np.allclose(pred, truth, rtol=0, atol=1e-12)


def test_bias_accumulates_linearly():
    topo = build_topology([40, 30], grid=GRID)
    eps = 0.03
    models = {d.device_id: Shift(eps) for d in topo.components}
    p0 = np.full(8, -2.0)
    mask = np.ones(8, bool)
    out = bl.cascade_predict(p0, mask, topo, models)
    for n, x in enumerate(out, start=1):
        assert np.allclose(x, -2.0 + n * eps, atol=1e-12)
    with pytest.raises(MissingDecoderError):
        bl.cascade_predict(p0, mask, topo, {})


def test_unloaded_channels_keep_sentinel():
    ds = identity_dataset()
    norm = tr.fit_norm(ds)
    m = bl.DeviceModel.init(ds.topology.components[0], 8, norm, 0)
    mask = np.array([True, False] * 4)
    out = m.predict(np.where(mask, -2.0, SENTINEL_DBM), mask)
    assert np.all(out[~mask] == SENTINEL_DBM)


def test_train_cascade_builds_one_model_per_target_device():
    lab = ls.generate_dataset(build_topology([40], grid=GRID, name="lab"), ls.PhysicsConfig(),
                              {"Random": 4}, 0, ls.DEFAULT_LAUNCH)
    tgt = ls.generate_dataset(build_topology([40, 30], grid=GRID, name="tgt"), ls.PhysicsConfig(),
                              {"Random": 3}, 1, ls.DEFAULT_LAUNCH)
    cfg = bl.DeviceTrainConfig(2, 1e-3)
    models = bl.train_cascade(lab, tgt, cfg, cfg, hidden=4)
    assert sorted(models) == sorted(d.device_id for d in tgt.topology.components)
    # devices of the same kind start from the same lab model but are tuned separately
    b1, b2 = models["booster-1"], models["booster-2"]
    assert b1.params is not b2.params
    assert b1.params.tobytes() != b2.params.tobytes()
    wss = ls.generate_dataset(build_topology([40, "wss"], grid=GRID, name="w"), ls.PhysicsConfig(),
                              {"Random": 2}, 1, ls.DEFAULT_LAUNCH)
    with pytest.raises(MissingDecoderError):
        bl.train_cascade(lab, wss, cfg, cfg, hidden=4)
