"""Problem builders and reprojection evaluation shared by the CLI and tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import ms_ssim, psnr
from .operators import (
    Geometry,
    IdentityOperator,
    ParallelBeamOperator,
    SinogramSet,
    limited_angle_angles,
    novel_view_angles,
    parallel_geometry,
    project_volume,
    sparse_view_angles,
)
from .phantoms import add_gaussian_noise, make_phantom, random_phantom

__all__ = ["Problem", "EXPERIMENT_KINDS", "ct_problem", "denoise_problem", "reprojection_metrics"]

EXPERIMENT_KINDS = ("denoise", "sparse_view", "limited_angle")


@dataclass
class Problem:
    kind: str
    ground_truth: np.ndarray
    measurements: np.ndarray
    operator: object
    geometry: Geometry | None = None


def view_angles(kind: str, views: int, arc_degrees: float | None = None) -> np.ndarray:
    if kind == "sparse_view":
        return sparse_view_angles(views, 180.0 if arc_degrees is None else arc_degrees)
    if kind == "limited_angle":
        return limited_angle_angles(views, 20.0 if arc_degrees is None else arc_degrees)
    raise ValueError(f"no view set for experiment kind {kind!r}")


def ct_problem(kind: str = "sparse_view", dims=(16, 64, 64), views: int = 20,
               arc_degrees: float | None = None, phantom_seed: int = 0,
               noise_sigma: float = 0.0, noise_seed: int = 0,
               volume: np.ndarray | None = None, pixel_spacing: float | None = None) -> Problem:
    """Random ellipsoid phantom (or ``volume``) projected at the requested views.

    ``noise_sigma`` is on the 0-255 scale and is added to the sinogram.
    """
    gt = make_phantom(random_phantom(tuple(dims), seed=phantom_seed)) if volume is None \
        else np.asarray(volume, dtype=np.float64)
    geom = parallel_geometry(gt.shape[1:], view_angles(kind, views, arc_degrees), pixel_spacing)
    sino = project_volume(gt, geom)
    if noise_sigma > 0:
        sino = add_gaussian_noise(sino, noise_sigma, noise_seed)
    return Problem(kind, gt, sino.data, ParallelBeamOperator(geom), geom)


def denoise_problem(image: np.ndarray, sigma: float = 25.0, seed: int = 0) -> Problem:
    image = np.asarray(image, dtype=np.float64)
    vol = image[None] if image.ndim == 2 else image
    noisy = add_gaussian_noise(vol, sigma, seed)
    return Problem("denoise", vol, noisy, IdentityOperator())


def _projection_scores(volume: np.ndarray, ground_truth: np.ndarray, geometry: Geometry) -> dict:
    rec = project_volume(volume, geometry).data
    ref = project_volume(ground_truth, geometry).data
    data_range = float(ref.max() - ref.min()) or 1.0
    # One projection image per angle: (slice, detector).
    rec_img = np.moveaxis(rec, 1, 0)
    ref_img = np.moveaxis(ref, 1, 0)
    # Volumes with fewer slices than the SSIM window have no MS-SSIM score.
    score = ms_ssim(rec_img, ref_img, data_range) if min(rec_img.shape[1:]) >= 11 else None
    return {
        "psnr": psnr(rec, ref, data_range),
        "ms_ssim": score,
        "data_range": data_range,
        "num_views": geometry.num_angles,
    }


def reprojection_metrics(volume: np.ndarray, ground_truth: np.ndarray, geometry: Geometry,
                         n_novel: int = 100) -> dict:
    """Scores of reprojections at the training angles and at ``n_novel``
    held-out angles spread over 180 degrees, against the ground truth's."""
    given = _projection_scores(volume, ground_truth, geometry)
    novel_angles = novel_view_angles(n_novel, geometry.angles)
    novel = _projection_scores(volume, ground_truth, geometry.with_angles(novel_angles))
    return {"given": given, "novel": novel}


def sinogram(problem: Problem) -> SinogramSet:
    return SinogramSet(problem.measurements, problem.geometry)
