"""Image files, dataset manifests and run configuration files."""
from __future__ import annotations

import json
import struct
import sys
from pathlib import Path

import numpy as np
from PIL import Image

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .evaluation import LabeledDataset
from .tag_model import TagLabel

F32_HEADER = struct.Struct("<II")


# -- images -------------------------------------------------------------------

def to_uint8(x) -> np.ndarray:
    """Linear map [-1, 1] -> [0, 255], saturating outside."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / 127.5 - 1.0


def write_png(path: str | Path, x) -> None:
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("L")))


def write_f32(path: str | Path, x) -> None:
    """Raw little-endian float32 blob behind a ``width, height`` u32 header."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("expected a 2-D image")
    h, w = x.shape
    with open(path, "wb") as fh:
        fh.write(F32_HEADER.pack(w, h))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_f32(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < F32_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    w, h = F32_HEADER.unpack_from(data)
    body = data[F32_HEADER.size :]
    if len(body) != 4 * w * h:
        raise ValueError(f"{path}: expected {w}x{h} floats, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


# -- manifests ----------------------------------------------------------------

def manifest_record(path: str, label: TagLabel, provenance: str, seed: int, index: int) -> dict:
    return {
        "path": path,
        "bits": label.bit_string(),
        "center_x": label.center_x,
        "center_y": label.center_y,
        "yaw": label.yaw,
        "pitch": label.pitch,
        "roll": label.roll,
        "scale": label.scale,
        "provenance": provenance,
        "seed": seed,
        "index": index,
    }


def record_label(record: dict) -> TagLabel:
    return TagLabel(
        tuple(c == "1" for c in record["bits"]),
        record["center_x"], record["center_y"],
        record["yaw"], record["pitch"], record["roll"], record["scale"],
    )


def write_manifest(path: str | Path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    """Parse a JSON-lines manifest and check every record."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            bits = rec.get("bits", "")
            if len(bits) != 12 or set(bits) - {"0", "1"}:
                raise ValueError(f"{path}:{n}: bits must be 12 characters of 0/1")
            if not (path.parent / rec["path"]).exists():
                raise ValueError(f"{path}:{n}: missing image {rec['path']}")
            records.append(rec)
    return records


# -- run configuration ----------------------------------------------------------

def load_config(path: str | Path, allowed: dict[str, type]) -> dict:
    """Read a flat TOML table and check keys and value types against ``allowed``."""
    data = tomllib.loads(Path(path).read_text())
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in data.items():
        want = allowed[key]
        ok = isinstance(value, want) and not (want is int and isinstance(value, bool))
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            ok, data[key] = True, float(value)
        if not ok:
            raise ValueError(f"config key {key!r} must be {want.__name__}, got {type(value).__name__}")
    return data


# -- datasets on disk -----------------------------------------------------------

MANIFEST = "manifest.jsonl"


def write_samples(root: str | Path, samples, provenance: str, seed: int, png: bool = True, f32: bool = True) -> Path:
    """Write images under ``root/images`` and one manifest line per sample, in order."""
    if not (png or f32):
        raise ValueError("at least one image format is required")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        stem = f"images/{s.index:06d}"
        if png:
            write_png(root / f"{stem}.png", s.image)
        if f32:
            write_f32(root / f"{stem}.f32", s.image)
        records.append(manifest_record(f"{stem}.f32" if f32 else f"{stem}.png", s.label, provenance, seed, s.index))
    write_manifest(root / MANIFEST, records)
    return root / MANIFEST


def read_image(path: str | Path) -> np.ndarray:
    return read_f32(path) if str(path).endswith(".f32") else read_png(path)


def load_dataset(manifest: str | Path):
    """``(LabeledDataset, records)`` from a manifest file or a directory holding one."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    records = read_manifest(manifest)
    if not records:
        raise ValueError(f"{manifest} lists no samples")
    provenances = {r["provenance"] for r in records}
    if len(provenances) != 1:
        raise ValueError(f"{manifest} mixes provenances {sorted(provenances)}")
    labels = [record_label(r) for r in records]
    data = LabeledDataset(
        images=np.stack([read_image(manifest.parent / r["path"]) for r in records]),
        bits=np.stack([l.bits_array() for l in labels]),
        provenance=provenances.pop(),
        labels=labels,
    )
    return data, records
