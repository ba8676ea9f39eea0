"""Ray construction, line-integral forward projection, and motion simulation.

A view's projection value at detector offset ``s`` is a Riemann sum of the
integrand along the vertical line ``x = s`` in standard space, after mapping
each sample point into the object frame with the view's rigid pose.  The sum
carries the ``sample_step`` factor so values approximate true line integrals
and are stable under quadrature refinement.

Simulation and reconstruction share this single geometric convention: the
sinogram simulator projects a discrete image (bilinear interpolation, zero
outside the unit square) at the true poses, the reconstruction renders a
neural field at the current pose estimates, both through the same sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .geometry import PoseSet, ProjectionPose, apply_pose, nominal_view_angles

FULL_SPAN = 2.0 * np.sqrt(2.0)  # diagonal of the [-1,1]^2 square


@dataclass(frozen=True)
class DetectorGeometry:
    """Detector bins plus the quadrature rule along each ray.

    ``n_bins`` detector bins with centers ``-1 + (j + 0.5) * 2 / n_bins``;
    ``n_samples`` points spaced ``sample_step`` apart, centered on the ray so
    that ``n_samples * sample_step`` covers at least the square's diagonal.
    """

    n_bins: int
    n_samples: int
    sample_step: float

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.n_samples < 2 or self.sample_step <= 0:
            raise ValueError("need n_samples >= 2 and sample_step > 0")
        if self.n_samples * self.sample_step < FULL_SPAN - 1e-12:
            raise ValueError(
                f"ray span {self.n_samples * self.sample_step:.4f} does not cover "
                f"the required chord length {FULL_SPAN:.4f}"
            )

    @classmethod
    def default(cls, n_bins: int, n_samples: int | None = None) -> "DetectorGeometry":
        """Default rule: 2*n_bins samples spanning the square diagonal."""
        if n_samples is None:
            n_samples = 2 * n_bins
        return cls(n_bins=n_bins, n_samples=n_samples, sample_step=FULL_SPAN / n_samples)

    @property
    def bin_centers(self) -> np.ndarray:
        n = self.n_bins
        return -1.0 + (np.arange(n) + 0.5) * (2.0 / n)

    @property
    def span(self) -> float:
        return self.n_samples * self.sample_step


@dataclass
class ImageGrid:
    """Square scalar field on the normalized [-1, 1]^2 square.

    Pixel (row r, col c) has center ``x = -1 + (c + 0.5) * 2 / N`` and
    ``y = 1 - (r + 0.5) * 2 / N``: columns scan x left to right, rows scan
    y top to bottom.
    """

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"pixels must be square, got {self.pixels.shape}")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def pixel_centers(self) -> np.ndarray:
        """All pixel-center coordinates, shape (N, N, 2), row-major."""
        n = self.size
        return grid_coordinates(n)


def grid_coordinates(n: int) -> np.ndarray:
    """Pixel-center coordinates of an n x n grid, shape (n, n, 2)."""
    xs = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    ys = 1.0 - (np.arange(n) + 0.5) * (2.0 / n)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


@dataclass
class Sinogram:
    """View-major projection values: one row per view, one column per bin."""

    values: np.ndarray
    angles: np.ndarray
    detector: DetectorGeometry

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        if self.values.ndim != 2:
            raise ValueError("sinogram values must be 2-D")
        m, n = self.values.shape
        if m != self.angles.size or n != self.detector.n_bins:
            raise ValueError(
                f"shape {self.values.shape} inconsistent with {self.angles.size} angles "
                f"and {self.detector.n_bins} bins"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram values must be finite")

    @property
    def n_views(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# Rays
# ---------------------------------------------------------------------------

def sample_ray(s: float, geom: DetectorGeometry) -> np.ndarray:
    """Sample points along the standard-space ray ``x = s``, shape (K, 2).

    Points are placed at ``y_k = -c + (k + 0.5) * sample_step`` with
    ``c = n_samples * sample_step / 2``, i.e. centered on the detector axis.
    """
    if not np.isfinite(s) or abs(s) > 1.0:
        raise ValueError(f"detector coordinate s={s!r} outside [-1, 1]")
    k = np.arange(geom.n_samples)
    y = (k + 0.5) * geom.sample_step - 0.5 * geom.span
    pts = np.empty((geom.n_samples, 2))
    pts[:, 0] = s
    pts[:, 1] = y
    return pts


def ray_grid(geom: DetectorGeometry) -> np.ndarray:
    """Sample points of every detector bin's ray, shape (n_bins, n_samples, 2)."""
    pts = np.empty((geom.n_bins, geom.n_samples, 2))
    y = (np.arange(geom.n_samples) + 0.5) * geom.sample_step - 0.5 * geom.span
    pts[:, :, 0] = geom.bin_centers[:, None]
    pts[:, :, 1] = y[None, :]
    return pts


# ---------------------------------------------------------------------------
# Bilinear image sampling (shared by simulation and the image-backed field)
# ---------------------------------------------------------------------------

def bilinear_sample(pixels: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a square image at points, 0 outside the square.

    The image is treated as zero-padded beyond its pixel centers, and any
    point outside [-1, 1]^2 reads exactly 0.
    """
    pts = np.asarray(pts)
    n = pixels.shape[0]
    x = pts[..., 0]
    y = pts[..., 1]
    cf = (x + 1.0) * (n / 2.0) - 0.5
    rf = (1.0 - y) * (n / 2.0) - 0.5
    c0 = np.floor(cf).astype(np.int64)
    r0 = np.floor(rf).astype(np.int64)
    wc = (cf - c0).astype(pixels.dtype)
    wr = (rf - r0).astype(pixels.dtype)

    out = np.zeros(x.shape, dtype=pixels.dtype)
    for dr, dc, w in (
        (0, 0, (1 - wr) * (1 - wc)),
        (0, 1, (1 - wr) * wc),
        (1, 0, wr * (1 - wc)),
        (1, 1, wr * wc),
    ):
        r = r0 + dr
        c = c0 + dc
        valid = (r >= 0) & (r < n) & (c >= 0) & (c < n)
        rr = np.clip(r, 0, n - 1)
        cc = np.clip(c, 0, n - 1)
        out += np.where(valid, pixels[rr, cc], 0) * w
    inside = (np.abs(x) <= 1.0) & (np.abs(y) <= 1.0)
    out[~inside] = 0
    return out


def make_bilinear_field(image: ImageGrid):
    """A ``coords -> intensity`` closure over an image, for forward_project_field."""

    def field_eval(pts):
        return bilinear_sample(image.pixels, np.asarray(pts))

    return field_eval


# ---------------------------------------------------------------------------
# Forward projection
# ---------------------------------------------------------------------------

def forward_project_field(field_eval, poses: PoseSet, geom: DetectorGeometry) -> Sinogram:
    """Render a sinogram by integrating ``field_eval`` along every posed ray.

    ``field_eval`` must accept an (B, 2) array of coordinates anywhere in the
    plane and return (B,) intensities.  Row i uses poses.poses[i]; the
    returned sinogram is tagged with the nominal angles.
    """
    pts = ray_grid(geom)
    flat = pts.reshape(-1, 2)
    m = len(poses)
    rows = np.empty((m, geom.n_bins))
    for i, pose in enumerate(poses):
        q = apply_pose(pose, flat)
        vals = np.asarray(field_eval(q), dtype=np.float64)
        rows[i] = vals.reshape(geom.n_bins, geom.n_samples).sum(axis=1) * geom.sample_step
    return Sinogram(rows, poses.nominal_angles.copy(), geom)


def forward_project_image(
    image: ImageGrid, pose: ProjectionPose, geom: DetectorGeometry
) -> np.ndarray:
    """One projection row of a discrete image under one pose, shape (n_bins,).

    Same quadrature as :func:`forward_project_field` with the integrand being
    bilinear interpolation of the image (zero outside the square).
    """
    if not np.all(np.isfinite(image.pixels)):
        raise ValueError("image must be finite")
    pts = ray_grid(geom).reshape(-1, 2)
    q = apply_pose(pose, pts)
    vals = bilinear_sample(image.pixels, q)
    return vals.reshape(geom.n_bins, geom.n_samples).sum(axis=1) * geom.sample_step


# ---------------------------------------------------------------------------
# Motion-corrupted acquisition simulation
# ---------------------------------------------------------------------------

def simulate_motion_sinogram(
    image: ImageGrid,
    n_views: int,
    k: float,
    seed: int,
    *,
    geom: DetectorGeometry | None = None,
    k_rot: float | None = None,
    k_trans: float | None = None,
):
    """Simulate a rigid-motion-corrupted parallel-beam scan.

    For each view at nominal angle ``alpha_i`` (uniform over [0, pi)) the true
    pose draws ``dtheta ~ U(-k, k)`` degrees and ``t_x, t_y ~ U(-k, k)``
    pixels, converted to normalized units by ``2 / N``.  Draws come from a
    PCG64 stream seeded with ``seed``, ordered dtheta, t_x, t_y per view.
    ``k_rot`` / ``k_trans`` decouple the two ranges when given.

    Returns ``(sinogram, true_poses, initial_poses)`` where the initial poses
    sit at the nominal angles with zero translation.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    k_rot = k if k_rot is None else k_rot
    k_trans = k if k_trans is None else k_trans
    if k_rot < 0 or k_trans < 0:
        raise ValueError("motion level must be >= 0")
    if geom is None:
        geom = DetectorGeometry.default(image.size)
    rng = np.random.Generator(np.random.PCG64(seed))
    nominal = nominal_view_angles(n_views)
    px_to_unit = 2.0 / image.size

    thetas = np.empty(n_views)
    ts = np.empty((n_views, 2))
    for i in range(n_views):
        dtheta_deg = rng.uniform(-k_rot, k_rot)
        tx_px = rng.uniform(-k_trans, k_trans)
        ty_px = rng.uniform(-k_trans, k_trans)
        thetas[i] = nominal[i] + np.deg2rad(dtheta_deg)
        ts[i] = (tx_px * px_to_unit, ty_px * px_to_unit)

    true_poses = PoseSet.from_arrays(nominal, thetas, ts)
    initial_poses = PoseSet.initial(nominal)
    rows = np.empty((n_views, geom.n_bins))
    for i, pose in enumerate(true_poses):
        rows[i] = forward_project_image(image, pose, geom)
    return Sinogram(rows, nominal, geom), true_poses, initial_poses


# ---------------------------------------------------------------------------
# Closed-form ellipse projection (independent oracle)
# ---------------------------------------------------------------------------

def ellipse_projection_oracle(
    center, semi_axes, tilt: float, density: float, view_angle: float, s
):
    """Exact line integral of a constant-density ellipse.

    The ray is the standard-space line ``x = s`` rotated by ``view_angle``
    (the same ray :func:`forward_project_field` integrates for a pose with
    ``theta = view_angle`` and zero translation).  Returns density times the
    chord length, 0 where the ray misses.  Vectorized over ``s``.
    """
    a, b = semi_axes
    if a <= 0 or b <= 0:
        raise ValueError("semi-axes must be positive")
    s = np.asarray(s, dtype=np.float64)
    ca, sa = np.cos(view_angle), np.sin(view_angle)
    # Ray: base + u * d with base = R(angle) (s, 0), d = R(angle) (0, 1).
    base_x = s * ca - center[0]
    base_y = s * sa - center[1]
    dx, dy = -sa, ca
    # Canonical ellipse frame: rotate by -tilt, scale axes to the unit circle.
    ct, st = np.cos(tilt), np.sin(tilt)
    xi0 = (ct * base_x + st * base_y) / a
    eta0 = (-st * base_x + ct * base_y) / b
    xi_d = (ct * dx + st * dy) / a
    eta_d = (-st * dx + ct * dy) / b
    qa = xi_d * xi_d + eta_d * eta_d
    qb = xi0 * xi_d + eta0 * eta_d
    qc = xi0 * xi0 + eta0 * eta0 - 1.0
    disc = qb * qb - qa * qc
    chord = 2.0 * np.sqrt(np.maximum(disc, 0.0)) / qa
    return density * chord
