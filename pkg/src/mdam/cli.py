"""Command-line entry point: ``mdam <subcommand>``.

Settings resolve as command-line flags > ``--config`` file > the packaged
``configs/default.json``. Errors are printed to stderr as one JSON object and
mapped to exit codes (2 config, 3 data, 4 numeric divergence).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import baseline, dataio, evaluation, linksim, training, transfer
from .core import LoadingMode, PowerSpectrum, Topology
from .errors import ConfigError, DataError, MdamError, NumericError
from .model import ModelConfig, predict_sequence

log = logging.getLogger("mdam")

LOG_ENV = "MDAM_LOG_LEVEL"


def default_config() -> dict:
    text = resources.files("mdam").joinpath("configs/default.json").read_text(encoding="utf-8")
    return json.loads(text)


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins, unknown keys are rejected."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        cfg = merge(cfg, dataio.load_json(args.config))
    flags = {}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    section = getattr(args, "section", None)
    if section:
        over = {k: getattr(args, k) for k in _TRAIN_FLAGS if getattr(args, k, None) is not None}
        if over:
            flags[section] = over
    return merge(cfg, flags)


def config_hash(cfg: dict) -> str:
    return linksim.config_hash(cfg)


def _train_config(section: dict, seed) -> training.TrainConfig:
    try:
        return training.TrainConfig(**dict(section, seed=seed))
    except TypeError as e:
        raise ConfigError(f"bad training config: {e}") from None


def _topology(name_or_path, grid=None) -> Topology:
    if name_or_path in linksim.TOPOLOGY_PRESETS:
        return linksim.preset_topology(name_or_path, grid)
    if Path(name_or_path).exists():
        return dataio.load_topology(name_or_path)
    raise ConfigError(f"unknown topology {name_or_path!r}: not a preset "
                      f"({sorted(linksim.TOPOLOGY_PRESETS)}) or an existing file")


def _progress(every=100):
    def report(row):
        if row["epoch"] % every == 0:
            log.info("epoch %d %s lr=%.3g loss=%.4f dB grad_norm=%.3g", row["epoch"], row["phase"],
                     row["lr"], row["loss"], row["grad_norm"])
    return report


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# Subcommands ------------------------------------------------------------------

def cmd_simulate(args, cfg):
    physics = linksim.PhysicsConfig.from_dict(cfg["physics"])
    if args.physics:
        physics = dataio.load_physics(args.physics)
    launch = linksim.LaunchPlan(**cfg["launch"])
    loading = linksim.LoadingParams(cfg["loading"]["random_p"], tuple(cfg["loading"]["goalpost_widths"]))
    counts = None
    if args.count:
        counts = {}
        for item in args.count:
            mode, _, n = item.partition("=")
            try:
                counts[LoadingMode(mode).value] = int(n)
            except ValueError:
                raise ConfigError(f"bad --count {item!r}; expected Mode=N") from None
    topo = None
    if args.topo and args.topo not in linksim.TOPOLOGY_PRESETS:
        topo = _topology(args.topo)
    if topo is None:
        ds = linksim.preset_dataset(args.preset, cfg["seed"], args.topo, physics, launch, loading,
                                    counts=counts)
    else:
        p = linksim.DATASET_PRESETS[args.preset]
        ds = linksim.generate_dataset(topo, physics.with_realization(p.realization),
                                      counts or p.counts, cfg["seed"] * 1000 + p.seed_offset,
                                      launch, loading, preset=args.preset)
    ds.meta["cli_config_hash"] = config_hash(cfg)
    dataio.save_dataset(args.out, ds)
    _print({"path": str(args.out), "records": len(ds), "counts": ds.counts, "seed": ds.seed,
            "config_hash": ds.meta["config_hash"], "topology": ds.topology.name})


def cmd_train_base(args, cfg):
    ds = dataio.load_dataset(args.data)
    model_cfg = ModelConfig.from_dict(dict(cfg["model"], num_channels=ds.topology.grid.num_channels))
    tcfg = _train_config(cfg["train"], cfg["seed"])
    bundle, tlog = training.train_base(ds, tcfg, cfg["seed"], model_cfg, progress=_progress())
    bundle.meta.update({"seed": cfg["seed"], "config": cfg, "config_hash": config_hash(cfg)})
    dataio.save_checkpoint(args.out, bundle)
    if args.log:
        dataio.atomic_write(args.log, tlog.to_csv())
    _print({"checkpoint": str(args.out), "final_loss_db": tlog.losses[-1] if len(tlog) else None,
            "epochs": len(tlog), "config_hash": config_hash(cfg)})


def cmd_transfer(args, cfg):
    ds = dataio.load_dataset(args.train)
    topo = _topology(args.topo, ds.topology.grid) if args.topo else ds.topology
    if topo != ds.topology:
        raise DataError(f"training data was recorded on {ds.topology.name!r}, not {topo.name!r}")
    base = dataio.load_checkpoint(args.base, devices=False)
    bundle = transfer.instantiate_target(base, topo)
    tcfg = _train_config(cfg["transfer"], cfg["seed"])
    tuned, tlog = transfer.fine_tune(bundle, ds, tcfg, progress=_progress())
    tuned.meta.update({"seed": cfg["seed"], "config": cfg, "config_hash": config_hash(cfg)})
    dataio.save_checkpoint(args.out, tuned)
    if args.log:
        dataio.atomic_write(args.log, tlog.to_csv())
    _print({"checkpoint": str(args.out), "device_decoders": len(tuned.decoders),
            "final_loss_db": tlog.losses[-1] if len(tlog) else None,
            "config_hash": config_hash(cfg)})


def _cascade(cfg, lab_path, target_path):
    lab, target = dataio.load_dataset(lab_path), dataio.load_dataset(target_path)
    b = cfg["baseline"]
    pre = baseline.DeviceTrainConfig(**dict(b["pretrain"], seed=cfg["seed"]))
    tune = baseline.DeviceTrainConfig(**dict(b["tune"], seed=cfg["seed"]))
    return baseline.CascadeModel(baseline.train_cascade(lab, target, pre, tune, hidden=b["hidden"]))


def cmd_evaluate(args, cfg):
    test = dataio.load_dataset(args.test)
    models = {}
    for item in args.checkpoint or []:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        models[name] = dataio.load_checkpoint(path)
    if args.cascade:
        models["Direct Cascade"] = _cascade(cfg, *args.cascade)
    if not models:
        raise ConfigError("nothing to evaluate: pass --checkpoint and/or --cascade")
    meta = {"seed": cfg["seed"], "config_hash": config_hash(cfg),
            "test_config_hash": test.meta.get("config_hash")}
    report = evaluation.compare_models(models, test, meta)
    csv_path, json_path = dataio.save_report(args.out, report)
    print(report.to_csv(), end="")
    log.info("wrote %s and %s", csv_path, json_path)


def cmd_predict(args, cfg):
    bundle = dataio.load_checkpoint(args.checkpoint)
    topo = _topology(args.topo)
    if args.launch:
        p0 = PowerSpectrum.from_dict(dataio.load_json(args.launch))
    else:
        mode = LoadingMode(args.loading)
        C = topo.grid.num_channels
        rng = np.random.default_rng(cfg["seed"])
        mask = linksim.generate_loading(mode, rng, C, fill="full",
                                        width=min(10, (C - 1) // 2))
        p0 = PowerSpectrum.flat(args.power, mask)
    seq = predict_sequence(p0, topo, bundle)
    out = seq.to_dict()
    out["device_ids"] = [d.device_id for d in topo.components]
    if args.out:
        dataio.save_json(args.out, out)
    else:
        print(json.dumps(out))


def cmd_gradcheck(args, cfg):
    g = cfg["gradcheck"]
    res = training.gradient_audit(cfg["seed"], g["num_channels"], g["hidden"], g["layers"],
                                  tuple(g["spans"]), g["batch"], g["epsilon"])
    res["tolerance"] = g["tolerance"]
    res["passed"] = res["max_rel_err"] < g["tolerance"]
    _print(res)
    if not res["passed"]:
        raise NumericError(f"gradient audit failed: max rel. err {res['max_rel_err']:.3g} "
                           f">= {g['tolerance']}")


_TRAIN_FLAGS = ("tf_epochs", "ar_epochs", "lr0", "decay_every", "decay_gamma", "clip_norm",
                "batch_size", "momentum", "optimizer")


def _add_train_flags(p):
    p.add_argument("--tf-epochs", dest="tf_epochs", type=int)
    p.add_argument("--ar-epochs", dest="ar_epochs", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--decay-every", dest="decay_every", type=int)
    p.add_argument("--decay-gamma", dest="decay_gamma", type=float)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--optimizer", choices=training.OPTIMIZERS)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding the packaged defaults")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")

    p = argparse.ArgumentParser(prog="mdam", description="Power-spectrum evolution modelling")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a dataset preset")
    s.add_argument("--preset", required=True, choices=sorted(linksim.DATASET_PRESETS))
    s.add_argument("--topo", help="topology preset name or JSON file (default: preset's own)")
    s.add_argument("--physics", help="physics config JSON")
    s.add_argument("--count", action="append", metavar="MODE=N",
                   help="override the preset's count for a loading mode (repeatable)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-base", parents=[common], help="two-phase training on lab data")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="training log CSV")
    _add_train_flags(s)
    s.set_defaults(func=cmd_train_base, section="train")

    s = sub.add_parser("transfer", parents=[common], help="instantiate per-device decoders and fine-tune")
    s.add_argument("--base", required=True, help="base checkpoint")
    s.add_argument("--topo", help="target topology preset or JSON file")
    s.add_argument("--train", required=True, help="target fine-tuning dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    _add_train_flags(s)
    s.set_defaults(func=cmd_transfer, section="transfer")

    s = sub.add_parser("evaluate", parents=[common], help="error tables and per-component series")
    s.add_argument("--test", required=True)
    s.add_argument("--checkpoint", action="append", metavar="[NAME=]PATH")
    s.add_argument("--cascade", nargs=2, metavar=("LAB", "TARGET"),
                   help="train and include the direct-cascade baseline")
    s.add_argument("--out", required=True, help="report path stem (.csv and .json are written)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", parents=[common], help="predict a sequence from a launch spectrum")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--topo", required=True)
    s.add_argument("--launch", help="PowerSpectrum JSON ({powers_dbm, loaded})")
    s.add_argument("--power", type=float, default=-2.0, help="flat launch power if no --launch")
    s.add_argument("--loading", default="Fixed", choices=[m.value for m in LoadingMode])
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get(LOG_ENV, "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except MdamError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e),
                          "exit_code": DataError.exit_code}), file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
