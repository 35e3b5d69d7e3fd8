"""File formats: raw float images, 8-bit PGM, and the manifest + blob tensor store.

Raw images
    ASCII header line ``f64 H W`` followed by ``H*W`` little-endian float64
    values in row-major order. Round-trips bit-exactly.

PGM
    Binary ``P5`` with maxval 255. Values are clipped to [0, 1] and quantised
    as ``floor(255 * v + 0.5)``.

Tensor store
    A directory holding ``manifest.json`` and ``tensors.bin``. The manifest
    lists every tensor (name, shape, dtype ``<f8``, byte offset, role) and
    carries a ``kind`` ("weights", "coefficients" or "adam") plus free-form
    metadata such as the serialised :class:`~synthnett.tfunet.ArchConfig`.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .tensor import BatchNormState, Tensor
from .tfunet import (
    ArchConfig,
    CoeffPyramid,
    NetworkParams,
    bn_names,
    coefficient_shapes,
    param_specs,
)

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
FORMAT = "synthnett-tensors"


class FormatError(ValueError):
    """Malformed or inconsistent file."""


# --------------------------------------------------------------------------
# images


def write_raw(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"raw images are 2-D, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"f64 {h} {w}\n".encode("ascii"))
        f.write(image.astype("<f8").tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: no header line terminator (byte offset {len(data)})")
    parts = data[:nl].split()
    if len(parts) != 3 or parts[0] != b"f64":
        raise FormatError(f"{path}: bad header at byte offset 0, expected 'f64 H W'")
    try:
        h, w = int(parts[1]), int(parts[2])
    except ValueError:
        raise FormatError(f"{path}: non-integer dimensions in header at byte offset 0") from None
    if h < 1 or w < 1:
        raise FormatError(f"{path}: non-positive dimensions in header at byte offset 0")
    need = h * w * 8
    body = data[nl + 1 :]
    if len(body) != need:
        raise FormatError(
            f"{path}: expected {need} payload bytes after byte offset {nl + 1}, found {len(body)}"
        )
    return np.frombuffer(body, dtype="<f8").reshape(h, w).astype(np.float64)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantize(image).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM and return values scaled to [0, 1]."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header at byte offset {pos}")
        fields.append((data[start:pos], start))
    if fields[0][0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic at byte offset 0)")
    try:
        w, h, maxval = (int(v) for v, _ in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: bad PGM header field near byte offset {fields[1][1]}") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported (byte offset {fields[3][1]})")
    pos += 1
    body = data[pos:]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes after byte offset {pos}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w) / 255.0


def read_image(path) -> np.ndarray:
    """Read a raw ``.f64`` image or a ``.pgm`` file, chosen by content."""
    with open(path, "rb") as f:
        head = f.read(3)
    if head == b"f64":
        return read_raw(path)
    if head[:2] == b"P5":
        return read_pgm(path)
    raise FormatError(f"{path}: unrecognised image format at byte offset 0")


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    files = sorted(d.glob("*.f64"))
    if not files:
        raise FileNotFoundError(f"no .f64 images in {d}")
    return files


def load_images(directory) -> list[np.ndarray]:
    """Read every ``*.f64`` image in a directory (sorted by name)."""
    images = [read_raw(p) for p in list_images(directory)]
    shape = images[0].shape
    for p, img in zip(list_images(directory), images):
        if img.shape != shape:
            raise FormatError(f"{p}: shape {img.shape} differs from {shape}")
    return images


def save_images(directory, images, prefix: str = "img", pgm: bool = False) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = d / f"{prefix}_{i:05d}.f64"
        write_raw(p, img)
        if pgm:
            write_pgm(p.with_suffix(".pgm"), img)
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# tensor store


def write_store(directory, entries: list[tuple[str, np.ndarray, str]], kind: str, meta: dict | None = None) -> Path:
    """Write ``(name, array, role)`` entries as manifest + blob."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records, offset, chunks = [], 0, []
    seen = set()
    for name, arr, role in entries:
        if name in seen:
            raise ValueError(f"duplicate tensor name {name}")
        seen.add(name)
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        records.append({"name": name, "shape": list(np.shape(arr)), "dtype": "<f8", "offset": offset, "role": role})
        chunks.append(buf)
        offset += len(buf)
    manifest = {"format": FORMAT, "version": 1, "kind": kind, "meta": meta or {}, "tensors": records, "nbytes": offset}
    (d / BLOB).write_bytes(b"".join(chunks))
    tmp = d / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, d / MANIFEST)
    return d


def read_store(directory, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    d = Path(directory)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"{d}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / MANIFEST}: invalid JSON at byte offset {exc.pos}") from None
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{d}: not a {FORMAT} manifest")
    if kind is not None and manifest.get("kind") != kind:
        raise FormatError(f"{d}: holds {manifest.get('kind')!r}, expected {kind!r}")
    blob = (d / BLOB).read_bytes()
    if len(blob) != manifest["nbytes"]:
        raise FormatError(f"{d / BLOB}: {len(blob)} bytes, manifest declares {manifest['nbytes']}")
    arrays, covered = {}, 0
    for rec in sorted(manifest["tensors"], key=lambda r: r["offset"]):
        if rec["dtype"] != "<f8":
            raise FormatError(f"tensor {rec['name']}: unsupported dtype {rec['dtype']}")
        if rec["offset"] != covered:
            raise FormatError(f"tensor {rec['name']}: gap or overlap at byte offset {rec['offset']}")
        n = int(np.prod(rec["shape"], dtype=np.int64)) * 8
        arrays[rec["name"]] = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=rec["offset"]).reshape(rec["shape"]).astype(np.float64)
        covered += n
    if covered != len(blob):
        raise FormatError(f"{d / BLOB}: {len(blob) - covered} orphan bytes after byte offset {covered}")
    return manifest, arrays


def save_params(directory, params: NetworkParams, meta: dict | None = None) -> Path:
    entries = [(s.name, params[s.name].data, s.role) for s in param_specs(params.config)]
    for name, _ in bn_names(params.config):
        st = params.bn[name]
        entries.append((f"{name}.running_mean", st.running_mean, "running-stat"))
        entries.append((f"{name}.running_var", st.running_var, "running-stat"))
    m = {"arch": params.config.to_dict(), **(meta or {})}
    return write_store(directory, entries, "weights", m)


def load_params(directory, config: ArchConfig | None = None) -> NetworkParams:
    """Load weights, validating every tensor against the architecture.

    When ``config`` is given it must equal the stored architecture.
    """
    manifest, arrays = read_store(directory, "weights")
    stored = ArchConfig.from_dict(manifest["meta"]["arch"])
    if config is not None and config != stored:
        raise FormatError(f"{directory}: stored architecture {stored} does not match requested {config}")
    cfg = stored
    tensors = {}
    for spec in param_specs(cfg):
        arr = arrays.pop(spec.name, None)
        if arr is None:
            raise FormatError(f"tensor {spec.name} missing from {directory}")
        if arr.shape != spec.shape:
            raise FormatError(f"tensor {spec.name} has shape {arr.shape}, architecture needs {spec.shape}")
        tensors[spec.name] = Tensor(arr, requires_grad=True, name=spec.name)
    bn = {}
    for name, ch in bn_names(cfg):
        mean = arrays.pop(f"{name}.running_mean", None)
        var = arrays.pop(f"{name}.running_var", None)
        if mean is None or var is None:
            raise FormatError(f"running statistics of {name} missing from {directory}")
        if mean.shape != (ch,) or var.shape != (ch,):
            raise FormatError(f"running statistics of {name} have the wrong shape")
        bn[name] = BatchNormState(mean, var)
    if arrays:
        raise FormatError(f"{directory}: unexpected tensors {sorted(arrays)}")
    return NetworkParams(cfg, tensors, bn)


def save_coefficients(directory, xi: CoeffPyramid, meta: dict | None = None) -> Path:
    entries = [(name, t.data, "bypass" if name.startswith("bypass") else ("coarse" if name == "coarse" else "high-pass")) for name, t in xi.entries()]
    return write_store(directory, entries, "coefficients", meta)


def load_coefficients(directory, config: ArchConfig | None = None) -> CoeffPyramid:
    manifest, arrays = read_store(directory, "coefficients")
    names = [r["name"] for r in manifest["tensors"]]
    levels = sum(1 for n in names if n.endswith(".h"))
    bypass = any(n.startswith("bypass") for n in names)
    high = [tuple(Tensor(arrays[f"level{i + 1}.{b}"]) for b in ("h", "v", "d")) for i in range(levels)]
    xi = CoeffPyramid(high, Tensor(arrays["coarse"]), [Tensor(arrays[f"bypass{i + 1}"]) for i in range(levels)] if bypass else None)
    if config is not None:
        B, _, h, w = xi.coarse.shape
        s = 2**config.levels
        if levels != config.levels or bypass != config.bypass:
            raise FormatError(f"{directory}: coefficient layout does not match the architecture")
        for (name, t), shape in zip(xi.entries(), coefficient_shapes(config, h * s, w * s, B)):
            if t.shape != shape:
                raise FormatError(f"coefficient stack {name} has shape {t.shape}, expected {shape}")
    return xi
