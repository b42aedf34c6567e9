"""Error metrics and report tables: end-component mean/p95 and per-component quartiles."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, LoadingMode
from .errors import DataError
from .model import ModelBundle, predict_batch


class EmptyPoolError(DataError):
    pass


def nearest_rank(values, q) -> float:
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size == 0:
        raise EmptyPoolError("percentile of an empty pool")
    rank = max(1, math.ceil(q / 100.0 * x.size))
    return float(x[rank - 1])


def linear_quantile(values, q) -> float:
    """Quantile ``q`` in [0, 1] by linear interpolation between order statistics.

    Position ``q * (n - 1)`` in the sorted pool; ``q = 0.5`` is the usual median.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size == 0:
        raise EmptyPoolError("quantile of an empty pool")
    pos = q * (x.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, x.size - 1)
    return float(x[lo] + (x[hi] - x[lo]) * (pos - lo))


def abs_errors(preds, truths, masks):
    """``|pred - truth|`` as ``[B, N, C]`` plus the broadcast loading mask."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise DataError(f"prediction shape {preds.shape} vs truth shape {truths.shape}")
    masks = np.broadcast_to(np.asarray(masks, dtype=bool)[:, None, :], preds.shape)
    return np.abs(preds - truths), masks


def end_component_errors(preds, truths, masks) -> dict:
    """Pool loaded-channel errors at the last component over all sequences.

    ``preds``/``truths`` are ``[B, N, C]`` dBm arrays (truth excludes ``P_0``).
    """
    err, m = abs_errors(preds, truths, masks)
    if err.shape[0] == 0:
        raise EmptyPoolError("empty test set")
    pool = err[:, -1][m[:, -1]]
    if pool.size == 0:
        raise EmptyPoolError("no loaded channels at the end component")
    return {"mean_db": float(pool.mean()), "p95_db": nearest_rank(pool, 95), "count": int(pool.size)}


def per_component_distribution(preds, truths, masks) -> list:
    """Median and inter-quartile range (linear interpolation) per component index."""
    err, m = abs_errors(preds, truths, masks)
    out = []
    for n in range(err.shape[1]):
        pool = err[:, n][m[:, n]]
        if pool.size == 0:
            raise EmptyPoolError(f"no loaded channels at component {n + 1}")
        q25, med, q75 = (linear_quantile(pool, q) for q in (0.25, 0.5, 0.75))
        out.append({"component": n + 1, "median_db": float(med), "q25_db": float(q25),
                    "q75_db": float(q75)})
    return out


def format_cell(stats: dict) -> str:
    return f"{stats['mean_db']:.2f}/{stats['p95_db']:.2f}"


def predict_dbm(model, topo, seqs, chunk=256):
    """Autoregressive ``[B, N, C]`` predictions for a bundle or any ``predict_batch`` object."""
    parts = []
    for start in range(0, len(seqs), chunk):
        part = seqs[start:start + chunk]
        if isinstance(model, ModelBundle):
            parts.append(predict_batch(model, topo, part))
        else:
            parts.append(model.predict_batch(topo, part))
    return np.concatenate(parts, axis=0)


def dataset_truth(seqs):
    truths = np.stack([s.powers()[1:] for s in seqs])
    masks = np.stack([s.mask for s in seqs])
    return truths, masks


@dataclass
class Report:
    topology: str
    labels: list
    rows: list = field(default_factory=list)  # {"model", label -> stats}
    series: dict = field(default_factory=dict)  # model -> label -> per-component list
    meta: dict = field(default_factory=dict)

    def table(self):
        return [[r["model"]] + [format_cell(r[lab]) if lab in r else "" for lab in self.labels]
                for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model"] + self.labels)
        w.writerows(self.table())
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"topology": self.topology, "labels": self.labels, "rows": self.rows,
                           "series": self.series, "meta": self.meta}, indent=2, sort_keys=True)

    def end_mean(self, model, label):
        for r in self.rows:
            if r["model"] == model:
                return r[label]["mean_db"]
        raise KeyError(model)


def compare_models(models: dict, test: Dataset, meta: dict | None = None) -> Report:
    """Evaluate each named model autoregressively on ``test``, split by loading label."""
    if len(test) == 0:
        raise EmptyPoolError("empty test set")
    topo = test.topology
    present = {s.loading_label for s in test.sequences}
    order = [LoadingMode.RANDOM, LoadingMode.GOALPOST, LoadingMode.FIXED]
    labels = [m for m in order if m in present]
    for name, model in models.items():
        if isinstance(model, ModelBundle) and model.config.num_channels != topo.grid.num_channels:
            raise DataError(f"model {name!r} expects {model.config.num_channels} channels, "
                            f"test topology {topo.name!r} has {topo.grid.num_channels}")
    report = Report(topo.name, [m.value for m in labels], meta=dict(meta or {}))
    groups = {m: [s for s in test.sequences if s.loading_label is m] for m in labels}
    for name, model in models.items():
        row = {"model": name}
        report.series[name] = {}
        for m in labels:
            seqs = groups[m]
            preds = predict_dbm(model, topo, seqs)
            truths, masks = dataset_truth(seqs)
            row[m.value] = end_component_errors(preds, truths, masks)
            dist = per_component_distribution(preds, truths, masks)
            for d, dev in zip(dist, topo.components):
                d["device_id"] = dev.device_id
                d["kind"] = dev.kind.value
            report.series[name][m.value] = dist
        report.rows.append(row)
    return report
