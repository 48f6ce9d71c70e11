"""Raw volume files, PNG slice export and run configuration.

A volume ``name.raw`` holds contiguous little-endian floats; ``name.json``
beside it records dims, element type, data range, creator, the digest of the
producing config and a SHA-256 checksum of the payload.  Every file is
written to a temporary name and renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .network import NetworkSpec
from .operators import Geometry
from .solver import SolverConfig

__all__ = [
    "FormatError",
    "RunConfig",
    "DTYPES",
    "atomic_write_bytes",
    "atomic_write_text",
    "config_digest",
    "write_volume",
    "read_volume",
    "write_png",
]

DTYPES = {"f32le": "<f4", "f64le": "<f8"}
CREATOR = "tomodip"


class FormatError(ValueError):
    """Malformed, truncated or corrupted file."""


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def config_digest(config: dict | None) -> str | None:
    if config is None:
        return None
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".raw", ".json"):
        path = path.with_suffix("")
    return path.with_suffix(".raw"), path.with_suffix(".json")


def write_volume(path: str | Path, array: np.ndarray, dtype: str = "f64le",
                 data_range: float = 1.0, dims_order: str = "slice,height,width",
                 config: dict | None = None, geometry: Geometry | None = None,
                 extra: dict | None = None) -> Path:
    """Write ``array`` and its JSON sidecar; returns the payload path."""
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
    array = np.asarray(array)
    if not np.all(np.isfinite(array)):
        raise FormatError("refusing to write non-finite values")
    payload = np.ascontiguousarray(array, dtype=DTYPES[dtype]).tobytes()
    raw_path, json_path = _paths(path)
    header = {
        "dims": list(array.shape),
        "dims_order": dims_order.split(","),
        "dtype": dtype,
        "data_range": data_range,
        "creator": CREATOR,
        "config_digest": config_digest(config),
        "checksum": "sha256:" + hashlib.sha256(payload).hexdigest(),
    }
    if geometry is not None:
        header["geometry"] = geometry.to_dict()
    if extra:
        header.update(extra)
    atomic_write_bytes(raw_path, payload)
    atomic_write_text(json_path, json.dumps(header, indent=2))
    return raw_path


def read_volume(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read a payload, checking its length and checksum against the sidecar."""
    raw_path, json_path = _paths(path)
    if not raw_path.exists() or not json_path.exists():
        raise FileNotFoundError(f"missing {raw_path.name} or {json_path.name}")
    try:
        header = json.loads(json_path.read_text())
        dims = [int(d) for d in header["dims"]]
        np_dtype = DTYPES[header["dtype"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed header {json_path}: {exc}") from exc
    payload = raw_path.read_bytes()
    expected = int(np.prod(dims)) * np.dtype(np_dtype).itemsize
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, header implies {expected}")
    digest = "sha256:" + hashlib.sha256(payload).hexdigest()
    if header.get("checksum") != digest:
        raise FormatError(f"checksum mismatch for {raw_path}")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(dims)
    return arr.astype(np.float64), header


def write_png(path: str | Path, image: np.ndarray) -> dict:
    """8-bit PNG with the linear map ``[0, 1] -> [0, 255]``.

    Values outside ``[0, 1]`` are clipped; the returned record says how many.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PNG export takes a 2D slice")
    low, high = int(np.sum(image < 0)), int(np.sum(image > 1))
    img8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    Image.fromarray(img8).save(tmp, format="PNG")
    tmp.replace(path)
    return {"file": path.name, "clipped_low": low, "clipped_high": high}


@dataclass
class RunConfig:
    """Everything needed to repeat one CLI run."""

    kind: str = "sparse_view"          # denoise | sparse_view | limited_angle
    dims: tuple[int, int, int] = (16, 64, 64)
    views: int = 20
    arc_degrees: float | None = None   # 180 for sparse views, 20 for limited angle
    pixel_spacing: float | None = None  # None: the operator default
    n_novel: int = 100
    phantom_seed: int = 0
    noise_sigma: float = 0.0
    noise_seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    measurements: str | None = None
    ground_truth: str | None = None
    out_dir: str = "run"
    png_slices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("denoise", "sparse_view", "limited_angle"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if isinstance(self.solver, dict):
            self.solver = SolverConfig.from_dict(self.solver)
        if isinstance(self.network, dict):
            self.network = NetworkSpec(**self.network)
        self.dims = tuple(int(d) for d in self.dims)
        self.png_slices = tuple(int(s) for s in self.png_slices)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        d["dims"] = list(self.dims)
        d["png_slices"] = list(self.png_slices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def digest(self) -> str:
        return config_digest(self.to_dict())
