"""Ellipsoid phantoms and Gaussian noise injection.

Geometry is given on the normalized cube ``[-1, 1]^3``: ``x`` runs along
image columns, ``y`` along rows and ``z`` along slices.  Voxel centres sit at
``(i + 0.5) / n * 2 - 1`` on each axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .operators import SinogramSet

__all__ = [
    "Ellipsoid",
    "PhantomSpec",
    "make_phantom",
    "shepp_logan_3d",
    "random_phantom",
    "add_gaussian_noise",
]


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]      # (x, y, z)
    semi_axes: tuple[float, float, float]   # (a, b, c)
    intensity: float
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # ZXZ Euler angles, degrees

    def __post_init__(self):
        if min(self.semi_axes) <= 0:
            raise ValueError(f"degenerate ellipsoid with semi-axes {self.semi_axes}")

    def to_dict(self) -> dict:
        return {"center": list(self.center), "semi_axes": list(self.semi_axes),
                "intensity": self.intensity, "rotation": list(self.rotation)}


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]  # (S, H, W)
    ellipsoids: tuple[Ellipsoid, ...] = field(default_factory=tuple)
    seed: int | None = None

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "seed": self.seed,
                "ellipsoids": [e.to_dict() for e in self.ellipsoids]}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        ells = tuple(
            Ellipsoid(tuple(e["center"]), tuple(e["semi_axes"]), float(e["intensity"]),
                      tuple(e.get("rotation", (0.0, 0.0, 0.0))))
            for e in d.get("ellipsoids", ())
        )
        return cls(tuple(int(n) for n in d["dims"]), ells, d.get("seed"))


def _axis(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n * 2.0 - 1.0


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Sum of ellipsoid indicators times intensities, clipped to ``[0, 1]``."""
    s, h, w = spec.dims
    if min(spec.dims) < 1:
        raise ValueError(f"invalid phantom dims {spec.dims}")
    z, y, x = np.meshgrid(_axis(s), _axis(h), _axis(w), indexing="ij")
    pts = np.stack([x, y, z], axis=-1)
    vol = np.zeros((s, h, w))
    for e in spec.ellipsoids:
        rot = Rotation.from_euler("ZXZ", e.rotation, degrees=True).as_matrix()
        local = (pts - np.asarray(e.center)) @ rot  # row-vector form of R^T (p - c)
        q = np.sum((local / np.asarray(e.semi_axes)) ** 2, axis=-1)
        vol[q <= 1.0] += e.intensity
    return np.clip(vol, 0.0, 1.0)


# 3D Shepp-Logan with Toft intensities (Schabel's ellipsoid table).
_SHEPP_LOGAN = [
    # A, a, b, c, x0, y0, z0, phi, theta, psi
    (1.0, 0.6900, 0.920, 0.810, 0.00, 0.0000, 0.00, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.780, 0.00, -0.0184, 0.00, 0.0, 0.0, 0.0),
    (-0.2, 0.1100, 0.310, 0.220, 0.22, 0.0000, 0.00, -18.0, 0.0, 10.0),
    (-0.2, 0.1600, 0.410, 0.280, -0.22, 0.0000, 0.00, 18.0, 0.0, 10.0),
    (0.1, 0.2100, 0.250, 0.410, 0.00, 0.3500, -0.15, 0.0, 0.0, 0.0),
    (0.1, 0.0460, 0.046, 0.050, 0.00, 0.1000, 0.25, 0.0, 0.0, 0.0),
    (0.1, 0.0460, 0.046, 0.050, 0.00, -0.1000, 0.25, 0.0, 0.0, 0.0),
    (0.1, 0.0460, 0.023, 0.050, -0.08, -0.6050, 0.00, 0.0, 0.0, 0.0),
    (0.1, 0.0230, 0.023, 0.020, 0.00, -0.6060, 0.00, 0.0, 0.0, 0.0),
    (0.1, 0.0230, 0.046, 0.020, 0.06, -0.6050, 0.00, 0.0, 0.0, 0.0),
]


def shepp_logan_3d(dims: tuple[int, int, int]) -> PhantomSpec:
    ells = tuple(
        Ellipsoid((x0, y0, z0), (a, b, c), A, (phi, theta, psi))
        for A, a, b, c, x0, y0, z0, phi, theta, psi in _SHEPP_LOGAN
    )
    return PhantomSpec(tuple(dims), ells)


def random_phantom(dims: tuple[int, int, int], n_inclusions: int = 8, seed: int = 0) -> PhantomSpec:
    """A body ellipsoid with random inclusions that start and stop along ``z``.

    Inclusions cover a few slices each, so inter-slice differences are zero
    almost everywhere and non-zero on the inclusion caps.
    """
    rng = np.random.default_rng(seed)
    ells = [Ellipsoid((0.0, 0.0, 0.0), (0.8, 0.65, 1.6), 0.4, (0.0, 0.0, 0.0))]
    for _ in range(n_inclusions):
        r = rng.uniform(0.0, 0.45)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        center = (r * np.cos(phi) * 1.1, r * np.sin(phi) * 0.9, rng.uniform(-0.6, 0.6))
        axes = (rng.uniform(0.08, 0.28), rng.uniform(0.08, 0.28), rng.uniform(0.25, 0.7))
        intensity = float(rng.choice([-0.25, 0.2, 0.35, 0.5]))
        ells.append(Ellipsoid(center, axes, intensity, (rng.uniform(0, 180), 0.0, 0.0)))
    return PhantomSpec(tuple(dims), tuple(ells), seed)


def add_gaussian_noise(v, sigma: float, seed: int = 0):
    """Add ``N(0, (sigma / 255)^2)`` noise; ``sigma`` is on the 0-255 scale."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    data = v.data if isinstance(v, SinogramSet) else np.asarray(v, dtype=np.float64)
    noisy = data.copy()
    if sigma > 0:
        noisy += np.random.default_rng(seed).normal(0.0, sigma / 255.0, size=data.shape)
    if isinstance(v, SinogramSet):
        return SinogramSet(noisy, v.geometry, dict(v.meta, noise_sigma=sigma))
    return noisy
