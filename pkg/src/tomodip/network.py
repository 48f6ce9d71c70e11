"""Encoder-decoder skip network applied independently to every slice.

Stage ``i`` of the encoder runs a stride-2 convolution and a same-size
convolution (both ``k x k``, reflection padded, LeakyReLU).  A 1x1 skip
branch taps the stage input.  The decoder upsamples by nearest neighbour,
concatenates the skip features, and applies a ``k x k`` and a 1x1
convolution.  A final 1x1 convolution and a sigmoid produce one channel in
``(0, 1)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["NetworkSpec", "NetworkParams", "init_network", "forward", "parameter_count"]


@dataclass(frozen=True)
class NetworkSpec:
    depth: int = 3
    channels: tuple[int, ...] = (32, 64, 64)
    skip_channels: tuple[int, ...] = (4, 4, 4)
    kernel_size: int = 3
    leaky_slope: float = 0.2
    seed: int = 0
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "skip_channels", tuple(int(c) for c in self.skip_channels))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.channels) != self.depth or len(self.skip_channels) != self.depth:
            raise ValueError("channels and skip_channels need one entry per stage")
        if any(c < 1 for c in self.channels) or any(c < 0 for c in self.skip_channels):
            raise ValueError("channel counts must be positive (skips may be zero)")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")

    def layer_shapes(self) -> dict[str, tuple[int, int, int]]:
        """``name -> (c_out, c_in, k)`` in forward order."""
        k = self.kernel_size
        shapes: dict[str, tuple[int, int, int]] = {}
        c_prev = self.in_channels
        for i in range(self.depth):
            if self.skip_channels[i]:
                shapes[f"skip{i}"] = (self.skip_channels[i], c_prev, 1)
            shapes[f"down{i}"] = (self.channels[i], c_prev, k)
            shapes[f"enc{i}"] = (self.channels[i], self.channels[i], k)
            c_prev = self.channels[i]
        for i in reversed(range(self.depth)):
            c_up = self.channels[i + 1] if i + 1 < self.depth else self.channels[i]
            shapes[f"dec{i}"] = (self.channels[i], c_up + self.skip_channels[i], k)
            shapes[f"dec{i}_1x1"] = (self.channels[i], self.channels[i], 1)
        shapes["out"] = (self.out_channels, self.channels[0], 1)
        return shapes

    def to_dict(self) -> dict:
        return {
            "depth": self.depth, "channels": list(self.channels),
            "skip_channels": list(self.skip_channels), "kernel_size": self.kernel_size,
            "leaky_slope": self.leaky_slope, "seed": self.seed,
            "in_channels": self.in_channels, "out_channels": self.out_channels,
        }


def parameter_count(spec: NetworkSpec) -> int:
    return sum(co * ci * k * k + co for co, ci, k in spec.layer_shapes().values())


@dataclass(eq=False)
class NetworkParams:
    """Named weights and biases; each entry is a leaf :class:`Tensor`."""

    spec: NetworkSpec
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, spec: NetworkSpec, arrays: dict[str, np.ndarray],
                    requires_grad: bool = True) -> "NetworkParams":
        return cls(spec, {k: Tensor(v, requires_grad) for k, v in arrays.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def frozen(self) -> "NetworkParams":
        """Same values as constants (no gradient bookkeeping)."""
        return NetworkParams(self.spec, {k: Tensor(t.data) for k, t in self.tensors.items()})

    def trainable(self) -> "NetworkParams":
        return NetworkParams.from_arrays(self.spec, self.arrays(), requires_grad=True)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def save(self, path: str | Path) -> None:
        """Write ``<path>.bin`` (f64le payload) and ``<path>.json`` (manifest)."""
        path = Path(path)
        manifest, offset = [], 0
        for name, t in self.tensors.items():
            manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
            offset += t.size * 8
        bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
        tmp = bin_path.with_suffix(".bin.tmp")
        tmp.write_bytes(self.flat().astype("<f8").tobytes())
        tmp.replace(bin_path)
        meta = {"spec": self.spec.to_dict(), "dtype": "f64le", "tensors": manifest}
        tmp = json_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(meta, indent=2))
        tmp.replace(json_path)

    @classmethod
    def load(cls, path: str | Path) -> "NetworkParams":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        spec_d = dict(meta["spec"])
        spec = NetworkSpec(**spec_d)
        arrays = {}
        for entry in meta["tensors"]:
            n = int(np.prod(entry["shape"]))
            start = entry["offset"] // 8
            arrays[entry["name"]] = blob[start:start + n].reshape(entry["shape"]).copy()
        return cls.from_arrays(spec, arrays)


def init_network(spec: NetworkSpec) -> NetworkParams:
    """Fan-in scaled Gaussian weights (LeakyReLU gain), zero biases."""
    rng = np.random.default_rng(spec.seed)
    gain = np.sqrt(2.0 / (1.0 + spec.leaky_slope ** 2))
    arrays: dict[str, np.ndarray] = {}
    for name, (co, ci, k) in spec.layer_shapes().items():
        std = gain / np.sqrt(ci * k * k)
        arrays[f"{name}.w"] = rng.normal(0.0, std, size=(co, ci, k, k))
        arrays[f"{name}.b"] = np.zeros(co)
    return NetworkParams.from_arrays(spec, arrays)


def _conv(p: dict[str, Tensor], name: str, x: Tensor, stride: int = 1) -> Tensor:
    return ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, pad_mode="reflection")


def forward(params: NetworkParams, x: Tensor) -> Tensor:
    """Map ``(1, H, W)`` or a batch ``(B, 1, H, W)`` of slices to the same shape."""
    spec = params.spec
    p = params.tensors
    single = x.data.ndim == 3
    if single:
        x = ad.linear_map(x, lambda a: a[None], lambda g: g[0], "unsqueeze")
    if x.data.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"network input must be (B, {spec.in_channels}, H, W), got {x.shape}")
    h, w = x.shape[2:]
    div = 2 ** spec.depth
    if h % div or w % div:
        raise ValueError(f"input extents {h}x{w} must be divisible by {div}")
    a = spec.leaky_slope

    skips: list[Tensor | None] = []
    feat = x
    for i in range(spec.depth):
        skips.append(ad.leaky_relu(_conv(p, f"skip{i}", feat), a) if spec.skip_channels[i] else None)
        feat = ad.leaky_relu(_conv(p, f"down{i}", feat, stride=2), a)
        feat = ad.leaky_relu(_conv(p, f"enc{i}", feat), a)
    for i in reversed(range(spec.depth)):
        feat = ad.upsample_nearest(feat, 2)
        if skips[i] is not None:
            feat = ad.concat([feat, skips[i]], axis=1)
        feat = ad.leaky_relu(_conv(p, f"dec{i}", feat), a)
        feat = ad.leaky_relu(_conv(p, f"dec{i}_1x1", feat), a)
    out = ad.sigmoid(_conv(p, "out", feat))
    if single:
        out = ad.linear_map(out, lambda v: v[0], lambda g: g[None], "squeeze")
    return out
