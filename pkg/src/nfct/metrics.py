"""Image-quality metrics and pose-recovery error statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import PoseSet
from .projector import ImageGrid

PSNR_CAP_DB = 99.0

# SSIM contract: 11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03,
# symmetric boundary handling.
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricsBlock:
    """Quantitative evaluation of one reconstruction."""

    psnr: float
    ssim: float
    pose_angle_mae: float | None = None
    pose_trans_mae: float | None = None
    pose_angle_mae_initial: float | None = None
    pose_trans_mae_initial: float | None = None


def _as_pixels(img) -> np.ndarray:
    if isinstance(img, ImageGrid):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


def psnr(test, reference, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; identical images report the 99 dB cap.

    ``data_range`` defaults to the reference's max - min.
    """
    t = _as_pixels(test)
    r = _as_pixels(reference)
    if t.shape != r.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {r.shape}")
    if data_range is None:
        data_range = float(r.max() - r.min())
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((t - r) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * np.log10(data_range**2 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    tmp = correlate1d(img, kernel, axis=0, mode="reflect")
    return correlate1d(tmp, kernel, axis=1, mode="reflect")


def ssim(test, reference, data_range: float | None = None) -> float:
    """Mean local structural similarity under the documented window contract."""
    t = _as_pixels(test)
    r = _as_pixels(reference)
    if t.shape != r.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {r.shape}")
    if min(t.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    if data_range is None:
        data_range = float(r.max() - r.min())
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    mu_t = _windowed_mean(t, kernel)
    mu_r = _windowed_mean(r, kernel)
    var_t = _windowed_mean(t * t, kernel) - mu_t**2
    var_r = _windowed_mean(r * r, kernel) - mu_r**2
    cov = _windowed_mean(t * r, kernel) - mu_t * mu_r

    num = (2 * mu_t * mu_r + c1) * (2 * cov + c2)
    den = (mu_t**2 + mu_r**2 + c1) * (var_t + var_r + c2)
    return float(np.mean(num / den))


def angle_error_deg(a, b) -> np.ndarray:
    """Per-entry angular difference a - b in degrees, wrapped to (-180, 180]."""
    diff = np.rad2deg(np.asarray(a) - np.asarray(b))
    return 180.0 - np.mod(180.0 - diff, 360.0)


def pose_report(
    initial: PoseSet, true_: PoseSet, optimized: PoseSet, image_size: int
) -> tuple[dict, list[dict]]:
    """Pose-recovery errors of the optimized poses against the true ones.

    Angle errors are wrapped to (-180, 180] degrees; translation errors are
    Euclidean distances in pixels (``image_size`` converts normalized units).
    Returns the MAE summary plus one row per view with all three pose tracks,
    ready for CSV emission.
    """
    if not (len(initial) == len(true_) == len(optimized)):
        raise ValueError("pose sets must have equal lengths")
    unit_to_px = image_size / 2.0

    def errors(candidate: PoseSet):
        dth = np.abs(angle_error_deg(candidate.thetas(), true_.thetas()))
        dt = (
            np.linalg.norm(candidate.translations() - true_.translations(), axis=1)
            * unit_to_px
        )
        return dth, dt

    ang_init, tr_init = errors(initial)
    ang_opt, tr_opt = errors(optimized)
    summary = {
        "pose_angle_mae": float(ang_opt.mean()),
        "pose_trans_mae": float(tr_opt.mean()),
        "pose_angle_mae_initial": float(ang_init.mean()),
        "pose_trans_mae_initial": float(tr_init.mean()),
    }
    rows = []
    for i in range(len(true_)):
        rows.append(
            {
                "view_index": i,
                "nominal_angle_rad": float(true_.nominal_angles[i]),
                "theta_initial_rad": float(initial.poses[i].theta),
                "t_x_initial": float(initial.poses[i].t[0]),
                "t_y_initial": float(initial.poses[i].t[1]),
                "theta_true_rad": float(true_.poses[i].theta),
                "t_x_true": float(true_.poses[i].t[0]),
                "t_y_true": float(true_.poses[i].t[1]),
                "theta_optimized_rad": float(optimized.poses[i].theta),
                "t_x_optimized": float(optimized.poses[i].t[0]),
                "t_y_optimized": float(optimized.poses[i].t[1]),
            }
        )
    return summary, rows
