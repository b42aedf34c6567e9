"""Files: line-delimited JSON datasets, binary checkpoints, physics/topology JSON, reports.

Every writer goes through :func:`atomic_write` so readers never observe a
half-written file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .core import (ComponentKind, Dataset, LoadingMode, MeasurementSequence, Topology,
                   validate_sequence)
from .errors import (ChecksumError, DataError, MissingGroupError, SchemaError,
                     SequenceValidationError)
from .linksim import PhysicsConfig
from .model import (SCHEMA_VERSION, DecoderParams, EncoderParams, ModelBundle, ModelConfig,
                    NormStats)

DATASET_FORMAT = "mdam-dataset"
DATASET_SCHEMA_VERSION = 1
CHECKPOINT_MAGIC = b"MDAM"
CHECKPOINT_VERSION = 1
PHYSICS_SCHEMA_VERSION = 1

_U32 = struct.Struct("<I")


def atomic_write(path, data: bytes | str):
    """Write to a sibling temp file, fsync, then rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# Datasets -----------------------------------------------------------------------

def dataset_header(ds: Dataset) -> dict:
    return {"format": DATASET_FORMAT, "schema_version": DATASET_SCHEMA_VERSION,
            "topology_name": ds.topology.name, "topology": ds.topology.to_dict(),
            "grid": ds.topology.grid.to_dict(), "seed": ds.seed, "counts": ds.counts,
            "num_records": len(ds), "config_hash": ds.meta.get("config_hash"), "meta": ds.meta}


def dumps_dataset(ds: Dataset) -> str:
    lines = [_dumps(dataset_header(ds))]
    lines.extend(_dumps(s.to_dict()) for s in ds.sequences)
    return "\n".join(lines) + "\n"


def save_dataset(path, ds: Dataset):
    ds.validate()
    atomic_write(path, dumps_dataset(ds))


def loads_dataset(text: str, source="<string>") -> Dataset:
    if not text:
        raise DataError(f"{source}: empty dataset file")
    truncated = not text.endswith("\n")
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise SchemaError(f"{source}: unreadable header ({e})") from None
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise SchemaError(f"{source}: not an MDAM dataset file")
    if header.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise SchemaError(f"{source}: unsupported dataset schema_version "
                          f"{header.get('schema_version')!r} (expected {DATASET_SCHEMA_VERSION})")
    topo = Topology.from_dict(header["topology"])
    if header.get("topology_name") != topo.name:
        raise SchemaError(f"{source}: header topology_name {header.get('topology_name')!r} "
                          f"does not match topology {topo.name!r}")
    seqs = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = MeasurementSequence.from_dict(json.loads(line))
        except json.JSONDecodeError:
            if truncated and lineno == len(lines):
                raise DataError(f"{source}: truncated file (partial record on line {lineno})") from None
            raise SchemaError(f"{source}: malformed record on line {lineno}") from None
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{source}: invalid record on line {lineno}: {e}") from None
        try:
            if rec.topology_name != topo.name:
                raise SequenceValidationError(
                    "topology-mismatch", f"record names {rec.topology_name!r}", lineno - 2)
            validate_sequence(rec, topo)
        except SequenceValidationError as e:
            raise SequenceValidationError(e.kind, f"{source} line {lineno}: {e}", lineno - 2) from None
        seqs.append(rec)
    if truncated:
        raise DataError(f"{source}: truncated file (missing final newline)")
    if header.get("num_records") != len(seqs):
        raise DataError(f"{source}: header announces {header.get('num_records')} records, "
                        f"found {len(seqs)} (truncated file?)")
    ds = Dataset(topo, seqs, header.get("seed"), header.get("meta") or {})
    expected = {m.value: int(header.get("counts", {}).get(m.value, 0)) for m in LoadingMode}
    if expected != ds.counts:
        raise DataError(f"{source}: header counts {expected} do not match records {ds.counts}")
    return ds


def load_dataset(path) -> Dataset:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"dataset file not found: {path}") from None
    return loads_dataset(text, str(path))


# Checkpoints --------------------------------------------------------------------
#
# layout: b"MDAM" | u32 version | u32 header length | header JSON | u32 header CRC |
#         group sections (little-endian float64, concatenated tensors, in header order)

def _group_kind(name):
    parts = name.split("/")
    if name == "encoder":
        return "encoder", None
    if len(parts) == 3 and parts[0] == "decoder" and parts[1] in ("kind", "device"):
        return parts[1], parts[2]
    raise SchemaError(f"unrecognised checkpoint group name {name!r}")


def dumps_checkpoint(bundle: ModelBundle) -> bytes:
    groups, blobs, offset = [], [], 0
    for name, group in bundle.groups():
        tensors, parts = [], []
        for tname, t in group.named():
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            tensors.append({"name": tname, "shape": list(arr.shape)})
            parts.append(arr.tobytes())
        blob = b"".join(parts)
        groups.append({"name": name, "offset": offset, "nbytes": len(blob),
                       "crc32": zlib.crc32(blob), "tensors": tensors})
        blobs.append(blob)
        offset += len(blob)
    header = {"schema_version": bundle.schema_version, "config": bundle.config.to_dict(),
              "norm": bundle.norm.to_dict(), "meta": bundle.meta, "groups": groups}
    hbytes = _dumps(header).encode("utf-8")
    return b"".join([CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(hbytes)),
                     hbytes, _U32.pack(zlib.crc32(hbytes))] + blobs)


def save_checkpoint(path, bundle: ModelBundle):
    atomic_write(path, dumps_checkpoint(bundle))


def read_checkpoint_header(blob: bytes, source="<bytes>"):
    """Parse and verify the fixed prefix; returns ``(header, data_offset)``."""
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise SchemaError(f"{source}: not an MDAM checkpoint (bad magic)")
    (version,) = _U32.unpack_from(blob, 4)
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"{source}: unsupported checkpoint version {version}")
    (hlen,) = _U32.unpack_from(blob, 8)
    end = 12 + hlen
    if len(blob) < end + 4:
        raise DataError(f"{source}: truncated checkpoint header")
    hbytes = blob[12:end]
    (crc,) = _U32.unpack_from(blob, end)
    if zlib.crc32(hbytes) != crc:
        raise ChecksumError(f"{source}: header checksum mismatch")
    header = json.loads(hbytes.decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{source}: unsupported bundle schema_version "
                          f"{header.get('schema_version')!r} (expected {SCHEMA_VERSION})")
    return header, end + 4


def _select(names, selector, kind):
    """Resolve a per-family selector: True = all, False/None = none, iterable = those."""
    if selector is True:
        return list(names)
    if not selector:
        return []
    wanted = [s.value if isinstance(s, ComponentKind) else str(s) for s in selector]
    missing = [w for w in wanted if w not in names]
    if missing:
        raise MissingGroupError(f"checkpoint has no {kind} decoder group(s) {missing}")
    return wanted


def loads_checkpoint(blob: bytes, encoder=True, kinds=True, devices=True,
                     source="<bytes>") -> ModelBundle:
    """Rebuild a bundle, optionally from a subset of its groups.

    ``kinds``/``devices`` take ``True`` (all), ``False`` (none) or a list of
    component kinds / device ids; naming an absent group raises
    :class:`MissingGroupError`. Only selected groups are checksummed, so a
    corrupt unselected group does not block a partial load.
    """
    header, base = read_checkpoint_header(blob, source)
    by_name = {g["name"]: g for g in header["groups"]}
    kind_names = [_group_kind(n)[1] for n in by_name if _group_kind(n)[0] == "kind"]
    dev_names = [_group_kind(n)[1] for n in by_name if _group_kind(n)[0] == "device"]
    selected = []
    if encoder:
        if "encoder" not in by_name:
            raise MissingGroupError(f"{source}: checkpoint has no encoder group")
        selected.append("encoder")
    selected += [f"decoder/kind/{k}" for k in _select(kind_names, kinds, "kind")]
    selected += [f"decoder/device/{d}" for d in _select(dev_names, devices, "device")]

    def read_group(name, cls):
        g = by_name[name]
        start, stop = base + g["offset"], base + g["offset"] + g["nbytes"]
        if stop > len(blob):
            raise DataError(f"{source}: truncated checkpoint (group {name!r})")
        chunk = blob[start:stop]
        if zlib.crc32(chunk) != g["crc32"]:
            raise ChecksumError(f"{source}: checksum mismatch in group {name!r}")
        tensors, pos = {}, 0
        for t in g["tensors"]:
            shape = tuple(t["shape"])
            n = int(np.prod(shape)) * 8
            arr = np.frombuffer(chunk, dtype="<f8", count=n // 8, offset=pos).reshape(shape)
            tensors[t["name"]] = ad.parameter(arr.astype(np.float64), f"{name}.{t['name']}")
            pos += n
        if pos != len(chunk):
            raise SchemaError(f"{source}: group {name!r} size does not match its tensor shapes")
        return cls(tensors)

    enc, bases, decs = None, {}, {}
    for name in selected:
        family, key = _group_kind(name)
        if family == "encoder":
            enc = read_group(name, EncoderParams)
        elif family == "kind":
            bases[ComponentKind(key)] = read_group(name, DecoderParams)
        else:
            decs[key] = read_group(name, DecoderParams)
    return ModelBundle(ModelConfig.from_dict(header["config"]), enc, decs, bases,
                       NormStats.from_dict(header["norm"]), header["schema_version"],
                       header.get("meta") or {})


def load_checkpoint(path, encoder=True, kinds=True, devices=True) -> ModelBundle:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    return loads_checkpoint(blob, encoder, kinds, devices, str(path))


def checkpoint_groups(path) -> list:
    """Group names stored in a checkpoint, in file order."""
    header, _ = read_checkpoint_header(Path(path).read_bytes(), str(path))
    return [g["name"] for g in header["groups"]]


# Small JSON documents ----------------------------------------------------------

def save_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON ({e})") from None


def save_topology(path, topo: Topology):
    save_json(path, topo.to_dict())


def load_topology(path) -> Topology:
    d = load_json(path)
    try:
        return Topology.from_dict(d)
    except KeyError as e:
        raise SchemaError(f"{path}: topology file lacks field {e}") from None


def save_physics(path, physics: PhysicsConfig):
    save_json(path, {"schema_version": PHYSICS_SCHEMA_VERSION, "physics": physics.to_dict()})


def load_physics(path) -> PhysicsConfig:
    d = load_json(path)
    if d.get("schema_version") != PHYSICS_SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported physics schema_version {d.get('schema_version')!r}")
    try:
        return PhysicsConfig.from_dict(d["physics"])
    except (KeyError, TypeError) as e:
        raise SchemaError(f"{path}: invalid physics config ({e})") from None


def save_report(stem, report):
    """Write ``<stem>.csv`` (table) and ``<stem>.json`` (table rows + per-component series)."""
    stem = Path(stem)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    atomic_write(csv_path, report.to_csv())
    atomic_write(json_path, report.to_json() + "\n")
    return csv_path, json_path
