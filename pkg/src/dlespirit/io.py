"""On-disk dataset container, parameter checkpoints and flat key=value configs.

Container layout: a directory with ``meta.json`` plus one raw little-endian
file per array. Complex arrays are stored as interleaved binary32 pairs
(``.c64``), real arrays as binary32 (``.f32``) and the sampling mask as one
byte per ky line (``.u8``). Element order is slice, channel, ky row, kx column.
All arithmetic elsewhere is binary64; conversion happens only here.

Checkpoint layout::

    bytes 0-7    magic  b"DLESPCK1"
    bytes 8-11   uint32 LE format version
    bytes 12-15  uint32 LE header length H
    bytes 16-    H bytes of UTF-8 JSON header
    then         float64 LE tensor data, concatenated in header order

The header holds ``network`` (the network config), ``extra`` (free-form
JSON) and ``tensors``: a list of ``{"name", "shape", "offset", "count"}``
where ``offset`` counts float64 elements from the start of the data block.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
import struct
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Geometry

__all__ = [
    "FORMAT_VERSION",
    "ARRAY_SPECS",
    "ContainerError",
    "ArtifactMissing",
    "ConfigError",
    "DatasetContainer",
    "save_dataset",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "parse_config",
    "read_config",
    "config_hash",
    "provenance_block",
]

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"DLESPCK1"
CHECKPOINT_VERSION = 1

# file name -> (on-disk dtype, in-memory dtype, shape kind)
ARRAY_SPECS = {
    "kspace.c64": ("<c8", np.complex128, "SCYX"),
    "mask.u8": ("u1", bool, "Y"),
    "maps_ref.c64": ("<c8", np.complex128, "SCYX"),
    "maps_trans.c64": ("<c8", np.complex128, "SCYX"),
    "maps_est.c64": ("<c8", np.complex128, "SCYX"),
    "maps_true.c64": ("<c8", np.complex128, "SCYX"),
    "eigval.f32": ("<f4", np.float64, "SYX"),
    "eigval_trans.f32": ("<f4", np.float64, "SYX"),
    "eigval_est.f32": ("<f4", np.float64, "SYX"),
    "recon.c64": ("<c8", np.complex128, "SYX"),
    "errmap.f32": ("<f4", np.float64, "SYX"),
}


class ContainerError(ValueError):
    """Invalid container; ``field`` names the offending meta key or file."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message

    def to_json(self) -> str:
        return json.dumps({"error": type(self).__name__, "field": self.field, "message": self.message})


class ArtifactMissing(ContainerError):
    def __init__(self, name: str):
        super().__init__(name, f"{name} missing")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.field = key


def _shape(kind: str, dims) -> tuple:
    s, c, y, x = dims
    return {"SCYX": (s, c, y, x), "SYX": (s, y, x), "Y": (y,)}[kind]


@dataclass
class DatasetContainer:
    """In-memory view of a dataset directory.

    ``dims`` is ``(nslices, nchannels, ny, nx)``. ``arrays`` maps file names
    from :data:`ARRAY_SPECS` to binary64 (or bool) arrays.
    """

    dims: tuple
    geometry: Geometry = field(default_factory=Geometry)
    R: int = 1
    offset: int = 0
    acs_lines: int = 24
    seed: int = 0
    slice_spacing: float = 1.0
    arrays: dict = field(default_factory=dict)
    provenance: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 4 or min(self.dims) < 1:
            raise ContainerError("dims", f"need four positive sizes, got {self.dims}")

    def expected_shape(self, name: str) -> tuple:
        if name not in ARRAY_SPECS:
            raise ContainerError(name, "unknown array name")
        return _shape(ARRAY_SPECS[name][2], self.dims)

    def set(self, name: str, value) -> None:
        value = np.asarray(value)
        shape = self.expected_shape(name)
        if value.shape != shape:
            raise ContainerError(name, f"shape {value.shape} does not match dims (expected {shape})")
        self.arrays[name] = value.astype(ARRAY_SPECS[name][1])

    def get(self, name: str) -> np.ndarray:
        if name not in self.arrays:
            raise ArtifactMissing(name)
        return self.arrays[name]

    def has(self, name: str) -> bool:
        return name in self.arrays

    def meta(self) -> dict:
        s, c, y, x = self.dims
        return {
            "format_version": FORMAT_VERSION,
            "dims": {"nslices": s, "nchannels": c, "ny": y, "nx": x},
            "geometry": self.geometry.to_meta(),
            "R": self.R,
            "offset": self.offset,
            "acs_lines": self.acs_lines,
            "seed": self.seed,
            "slice_spacing": self.slice_spacing,
            "arrays": {name: int(np.prod(self.expected_shape(name))) * np.dtype(ARRAY_SPECS[name][0]).itemsize
                       for name in sorted(self.arrays)},
            "provenance": self.provenance,
            "extra": self.extra,
        }


def save_dataset(container: DatasetContainer, path) -> None:
    """Write arrays then ``meta.json``; files of arrays no longer held are removed."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, value in container.arrays.items():
        if value.shape != container.expected_shape(name):
            raise ContainerError(name, f"shape {value.shape} does not match dims")
        disk = ARRAY_SPECS[name][0]
        np.ascontiguousarray(value).astype(disk).tofile(path / name)
    for name in ARRAY_SPECS:
        if name not in container.arrays and (path / name).exists():
            (path / name).unlink()
    (path / "meta.json").write_text(json.dumps(container.meta(), indent=2, sort_keys=True), encoding="utf-8")


def _require(meta: dict, key: str, kind):
    if key not in meta:
        raise ContainerError(key, "missing from meta.json")
    value = meta[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ContainerError(key, f"expected integer, got {value!r}")
    if kind is dict and not isinstance(value, dict):
        raise ContainerError(key, f"expected object, got {value!r}")
    return value


def load_dataset(path) -> DatasetContainer:
    """Read and validate a container directory.

    Raises :class:`ContainerError` naming the field on an unknown format
    version, malformed metadata, or any byte-length disagreement between
    ``meta.json``, the declared dims and the files on disk.
    """
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise ArtifactMissing("meta.json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ContainerError("meta.json", f"not valid UTF-8 JSON ({exc})") from None
    version = _require(meta, "format_version", int)
    if version != FORMAT_VERSION:
        raise ContainerError("format_version", f"unsupported version {version}")
    dims_meta = _require(meta, "dims", dict)
    dims = []
    for key in ("nslices", "nchannels", "ny", "nx"):
        value = _require(dims_meta, key, int)
        if value < 1:
            raise ContainerError(f"dims.{key}", f"must be positive, got {value}")
        dims.append(value)
    geo = _require(meta, "geometry", dict)
    try:
        geometry = Geometry.from_meta(geo)
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError("geometry", str(exc)) from None
    container = DatasetContainer(
        dims=tuple(dims), geometry=geometry, R=_require(meta, "R", int), offset=_require(meta, "offset", int),
        acs_lines=_require(meta, "acs_lines", int), seed=_require(meta, "seed", int),
        slice_spacing=float(meta.get("slice_spacing", 1.0)),
        provenance=list(meta.get("provenance", [])), extra=dict(meta.get("extra", {})))
    declared = _require(meta, "arrays", dict)
    for name, nbytes in declared.items():
        if name not in ARRAY_SPECS:
            raise ContainerError(name, "unknown array name")
        disk, mem, kind = ARRAY_SPECS[name]
        shape = _shape(kind, container.dims)
        expected = int(np.prod(shape)) * np.dtype(disk).itemsize
        if nbytes != expected:
            raise ContainerError(name, f"declared byte length {nbytes} disagrees with dims ({expected})")
        file = path / name
        if not file.exists():
            raise ArtifactMissing(name)
        actual = file.stat().st_size
        if actual != nbytes:
            raise ContainerError(name, f"file holds {actual} bytes, meta declares {nbytes}")
        raw = np.fromfile(file, dtype=disk).reshape(shape)
        if name == "mask.u8" and np.any(raw > 1):
            raise ContainerError(name, "mask bytes must be 0 or 1")
        container.arrays[name] = raw.astype(mem)
    return container


def config_hash(config) -> str:
    """SHA-256 of the canonical JSON encoding of ``config``."""
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def provenance_block(subcommand: str, config, seed=None) -> dict:
    import scipy

    from . import __version__

    versions = {"dlespirit": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                "python": platform.python_version()}
    try:
        import torch

        versions["torch"] = torch.__version__
    except ImportError:  # pragma: no cover - torch is a hard dependency
        pass
    return {"subcommand": subcommand, "config_hash": config_hash(config), "seed": seed, "versions": versions}


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Write every named parameter of ``model`` as float64 (see module docstring)."""
    tensors, chunks, offset = [], [], 0
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().double().numpy()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
        offset += arr.size
    header = {"network": dataclasses.asdict(model.cfg), "extra": extra or {}, "tensors": tensors}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path, dtype: str = "float64"):
    """Rebuild a ``MapEstimator`` from a checkpoint; returns ``(model, header)``."""
    import torch

    from .estimator import MapEstimator, NetworkConfig

    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise ContainerError("magic", "not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ContainerError("version", f"unsupported checkpoint version {version}")
    if len(data) < 16 + hlen:
        raise ContainerError("header", "truncated header")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    body = np.frombuffer(data, dtype="<f8", offset=16 + hlen)
    total = sum(t["count"] for t in header["tensors"])
    if body.size != total:
        raise ContainerError("tensors", f"data block holds {body.size} values, header declares {total}")
    model = MapEstimator(NetworkConfig(**header["network"]))
    state = {}
    for t in header["tensors"]:
        chunk = body[t["offset"]:t["offset"] + t["count"]].reshape(t["shape"])
        state[t["name"]] = torch.as_tensor(chunk.copy())
    model = model.double()
    model.load_state_dict(state)
    return model.to({"float32": torch.float32, "float64": torch.float64}[dtype]), header


def _convert(key: str, text: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if text.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if hint is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if origin is tuple or hint is tuple:
            item = args[0] if args else float
            return tuple(_convert(key, part.strip(), item) for part in text.split(",") if part.strip())
    except (ValueError, StopIteration):
        raise ConfigError(key, f"cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(key, f"unsupported field type {hint}")


def parse_config(text: str, cls):
    """Parse flat ``key = value`` lines into dataclass ``cls``.

    Blank lines and ``#`` comments are skipped; tuples are comma separated.
    Unknown or repeated keys raise :class:`ConfigError`.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in names:
            raise ConfigError(key, f"unknown key for {cls.__name__}")
        if key in values:
            raise ConfigError(key, "given twice")
        values[key] = _convert(key, value, hints[key])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(cls.__name__, str(exc)) from None


def read_config(path, cls):
    return parse_config(Path(path).read_text(encoding="utf-8"), cls)
