"""Binary array containers for datasets and checkpoints, manifests, and the
INI experiment-config reader.

Container layout (all integers little-endian)::

    magic    6 bytes  b"DYNATK"
    version  1 byte   0x01
    kind     1 byte   0x44 'D' dataset | 0x43 'C' checkpoint
    count    u32      number of records
    record*  name_len u16, name utf-8, dtype 1 byte ('f' f64 | 'i' i32 | 'u' utf-8 bytes),
             ndim u8, extents ndim x u64, payload

See docs/formats.md for the record names used by each kind.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import struct
import typing
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import SyntheticDataset
from .experiments import AttackGrid, DatasetSpec, ExperimentConfig, TrainSpec, VictimSpec
from .models import AdaptiveNetwork, build_from_spec

MAGIC = b"DYNATK"
VERSION = 1
KIND_DATASET = ord("D")
KIND_CHECKPOINT = ord("C")
_DTYPES = {"f": np.dtype("<f8"), "i": np.dtype("<i4")}


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- containers

def encode_records(records: dict, kind: int) -> bytes:
    out = [MAGIC, bytes([VERSION, kind]), struct.pack("<I", len(records))]
    for name, value in records.items():
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        if isinstance(value, str):
            raw = value.encode("utf-8")
            out.append(b"u" + struct.pack("<BQ", 1, len(raw)) + raw)
            continue
        arr = np.asarray(value)
        code = "i" if np.issubdtype(arr.dtype, np.integer) else "f"
        if code == "i" and arr.size and (arr.min() < -2**31 or arr.max() >= 2**31):
            raise FormatError(f"record {name!r} does not fit int32")
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        out.append(code.encode() + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_records(blob: bytes, kind: int | None = None) -> dict:
    if blob[:6] != MAGIC:
        raise FormatError("bad magic")
    if blob[6] != VERSION:
        raise FormatError(f"unsupported version {blob[6]}")
    if kind is not None and blob[7] != kind:
        raise FormatError("container holds a different kind of artifact")
    (count,) = struct.unpack_from("<I", blob, 8)
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            code = chr(blob[pos])
            ndim = blob[pos + 1]
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos + 2)
            pos += 2 + 8 * ndim
            if code == "u":
                out[name] = blob[pos:pos + shape[0]].decode("utf-8")
                pos += shape[0]
                continue
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(blob):
                raise FormatError("truncated payload")
            arr = np.frombuffer(blob, dt, count=size // dt.itemsize, offset=pos).reshape(shape)
            out[name] = arr.astype(np.float64 if code == "f" else np.int64)
            pos += size
    except (struct.error, KeyError, IndexError) as exc:
        raise FormatError(f"corrupt container: {exc}") from exc
    if pos != len(blob):
        raise FormatError("trailing bytes after last record")
    return out


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_new(path: Path, blob: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "xb") as fh:
        fh.write(blob)
    return path


# ---------------------------------------------------------------- datasets

def dataset_records(ds: SyntheticDataset) -> dict:
    meta = dict(kind=ds.kind, seed=ds.seed, split=ds.split, classes=ds.classes, n=len(ds))
    rec = {"meta": json.dumps(meta, sort_keys=True)}
    if ds.is_image:
        rec["images"] = ds.images
        rec["labels"] = ds.labels
        return rec
    for i, (p, y, c) in enumerate(zip(ds.clouds, ds.point_labels, ds.colors)):
        rec[f"cloud{i}.points"] = p
        rec[f"cloud{i}.labels"] = y
        rec[f"cloud{i}.colors"] = c
    return rec


def write_dataset(ds: SyntheticDataset, path) -> Path:
    return _write_new(Path(path), encode_records(dataset_records(ds), KIND_DATASET))


def read_dataset(path) -> SyntheticDataset:
    rec = decode_records(Path(path).read_bytes(), KIND_DATASET)
    meta = json.loads(rec["meta"])
    ds = SyntheticDataset(meta["kind"], meta["seed"], meta["split"], meta["classes"])
    if "images" in rec:
        ds.images, ds.labels = rec["images"], rec["labels"]
        return ds
    for i in range(meta["n"]):
        ds.clouds.append(rec[f"cloud{i}.points"])
        ds.point_labels.append(rec[f"cloud{i}.labels"])
        ds.colors.append(rec[f"cloud{i}.colors"])
    return ds


def dataset_manifest(ds: SyntheticDataset, path) -> dict:
    m = dict(file=Path(path).name, kind=ds.kind, seed=ds.seed, split=ds.split,
             classes=ds.classes, count=len(ds), sha256=sha256(path))
    if ds.is_image:
        m["image_shape"] = list(ds.images.shape[1:])
    else:
        m["points"] = [int(len(p)) for p in ds.clouds]
    return m


# ---------------------------------------------------------------- checkpoints

def write_checkpoint(net: AdaptiveNetwork, path, extra: dict | None = None) -> Path:
    meta = dict(spec=net.spec, kind=net.kind, training_log=list(net.training_log),
                census=net.census if net.kind == "layer_skip" else None, **(extra or {}))
    rec = {"meta": json.dumps(meta, sort_keys=True)}
    for name, value in net.state_dict().items():
        rec[f"param.{name}"] = value
    return _write_new(Path(path), encode_records(rec, KIND_CHECKPOINT))


def read_checkpoint(path) -> tuple[AdaptiveNetwork, dict]:
    rec = decode_records(Path(path).read_bytes(), KIND_CHECKPOINT)
    meta = json.loads(rec.pop("meta"))
    net = build_from_spec(meta["spec"])
    net.load_state_dict({k[len("param."):]: v for k, v in rec.items()})
    net.training_log = meta.get("training_log", [])
    return net, meta


# ---------------------------------------------------------------- configs

_SECTIONS = {"dataset": DatasetSpec, "victim": VictimSpec, "train": TrainSpec, "attack": AttackGrid}


def _coerce(cls, name: str, text: str):
    f = {f.name: f for f in fields(cls)}.get(name)
    if f is None:
        raise ValueError(f"unknown key {name!r} in [{_section_of(cls)}]")
    hint = typing.get_type_hints(cls)[name]
    text = text.strip()
    if hint is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        sample = f.default[0] if isinstance(f.default, tuple) and f.default else ""
        return tuple(_scalar(type(sample), t) for t in items)
    return _scalar(hint, text)


def _scalar(tp, text: str):
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _section_of(cls) -> str:
    return next(k for k, v in _SECTIONS.items() if v is cls)


def config_from_ini(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``[dataset] [victim] [train] [attack]`` sections of key = value
    lines; keys not given keep the values of ``base`` (default presets)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.read_string(text)
    cfg = base or ExperimentConfig()
    parts = {}
    for section, cls in _SECTIONS.items():
        current = getattr(cfg, section)
        values = {f.name: getattr(current, f.name) for f in fields(cls)}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                values[key] = _coerce(cls, key, raw)
        parts[section] = cls(**values)
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    return ExperimentConfig(**parts).validate()


def config_to_ini(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for f in fields(getattr(cfg, section)):
            v = getattr(getattr(cfg, section), f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> ExperimentConfig:
    return config_from_ini(Path(path).read_text(encoding="utf-8"))
