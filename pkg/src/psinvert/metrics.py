"""Evaluation measures for normals, lights and re-rendered images."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateEstimate, ShapeMismatch

PSNR_CAP = 99.0


def angular_error_map(est, gt) -> np.ndarray:
    """Per-vector angle in degrees between unit vectors (last axis)."""
    est, gt = np.asarray(est, float), np.asarray(gt, float)
    if est.shape != gt.shape or est.shape[-1] != 3:
        raise ShapeMismatch(f"shapes {est.shape} and {gt.shape} are not matching vector fields")
    cos = np.clip(np.sum(est * gt, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def mean_angular_error(est, gt, mask=None) -> float:
    err = angular_error_map(est, gt)
    if mask is not None:
        mask = np.asarray(mask, bool)
        if mask.shape != err.shape:
            raise ShapeMismatch("mask does not match the vector field")
        err = err[mask]
    return float(np.mean(err))


def intensity_scale(e, e_gt) -> float:
    """Least-squares s minimizing sum (s e_i - gt_i)^2."""
    e, e_gt = np.asarray(e, float), np.asarray(e_gt, float)
    denom = float(np.dot(e, e))
    if denom == 0:
        raise DegenerateEstimate("all estimated intensities are zero")
    return float(np.dot(e, e_gt)) / denom


def scale_invariant_intensity_error(e, e_gt) -> float:
    e, e_gt = np.asarray(e, float), np.asarray(e_gt, float)
    if e.shape != e_gt.shape or e.size == 0:
        raise ShapeMismatch("need equally many (>= 1) estimates and references")
    if np.any(e_gt <= 0):
        raise ValueError("reference intensities must be positive")
    s = intensity_scale(e, e_gt)
    return float(np.mean(np.abs(s * e - e_gt) / e_gt))


def psnr(img, ref, peak: float = 1.0) -> float:
    img, ref = np.asarray(img, float), np.asarray(ref, float)
    if img.shape != ref.shape:
        raise ShapeMismatch("image and reference differ in shape")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse)))


@dataclass
class EvalReport:
    normal_mae_deg: float | None = None
    light_dir_mae_deg: float | None = None
    intensity_si_error: float | None = None
    psnr_db: float | None = None
    n_images: int = 0
    n_pixels: int = 0
    error_map: np.ndarray | None = None

    def to_json(self, config_echo: dict | None = None, **extra) -> dict:
        out = asdict(self)
        out.pop("error_map")
        out["config_echo"] = config_echo or {}
        out.update(extra)
        return out


def evaluate(normals, lights, dataset, rendered=None) -> EvalReport:
    """Compare estimates against whatever ground truth ``dataset`` carries.

    ``normals`` is (H, W, 3), ``lights`` a LightTable or None, ``rendered``
    an optional (n, H, W) re-rendering compared to the observed images over
    the mask.
    """
    mask = dataset.mask
    rep = EvalReport(n_images=dataset.n, n_pixels=int(mask.sum()))
    if dataset.gt_normals is not None and normals is not None:
        emap = angular_error_map(normals, dataset.gt_normals)
        emap[~mask] = 0.0
        rep.error_map = emap
        rep.normal_mae_deg = float(emap[mask].mean())
    if dataset.gt_lights is not None and lights is not None:
        rep.light_dir_mae_deg = mean_angular_error(lights.directions, dataset.gt_lights.directions)
        rep.intensity_si_error = scale_invariant_intensity_error(lights.intensities, dataset.gt_lights.intensities)
    if rendered is not None:
        rep.psnr_db = psnr(np.asarray(rendered)[:, mask], dataset.images[:, mask])
    return rep
