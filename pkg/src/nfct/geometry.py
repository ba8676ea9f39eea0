"""Rigid per-view poses and the transform from ray space to object space.

Every view of a parallel-beam acquisition carries one rigid pose: a rotation
angle ``theta`` (radians) and a translation ``t`` in normalized image units,
i.e. units of the ``[-1, 1] x [-1, 1]`` square the image lives on.  A sample
point ``p`` on a ray in the standard (detector-aligned) space maps to the
object's frame as ``R(theta) @ p + t``.

Angles are kept unwrapped while they are being optimized; use
:func:`wrap_angle` when reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


def _require_finite(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return arr


def rotation_matrix(theta: float) -> np.ndarray:
    """2x2 rotation matrix ``[[cos, -sin], [sin, cos]]`` for ``theta`` radians."""
    _require_finite("theta", theta)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotation_matrix_deriv(theta: float) -> np.ndarray:
    """Entrywise derivative of :func:`rotation_matrix` with respect to theta."""
    _require_finite("theta", theta)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, -c], [c, -s]])


def wrap_angle(theta):
    """Reduce an angle in radians to the interval ``(-pi, pi]``."""
    return np.pi - np.mod(np.pi - np.asarray(theta), TWO_PI)


@dataclass
class ProjectionPose:
    """Rigid pose of one projection: rotation ``theta`` plus translation ``t``.

    ``theta`` is in radians, ``t = (t_x, t_y)`` in normalized image units.
    No range restriction is placed on ``t``; optimization may transiently
    push it beyond the injected motion range.
    """

    theta: float
    t: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.theta = float(_require_finite("theta", self.theta))
        self.t = _require_finite("t", self.t).reshape(2).copy()

    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.theta)


def apply_pose(pose: ProjectionPose, p) -> np.ndarray:
    """Map standard-space point(s) ``p`` into the object frame: ``R(theta) p + t``.

    ``p`` may be a single point of shape ``(2,)`` or a batch ``(B, 2)``.
    """
    p = _require_finite("p", p)
    return p @ pose.rotation().T + pose.t


def apply_pose_jacobians(pose: ProjectionPose, p):
    """Jacobians of :func:`apply_pose` at ``p``.

    Returns ``(d_theta, d_t, d_p)`` where ``d_theta = R'(theta) @ p`` (shape
    matching ``p``), ``d_t`` is the 2x2 identity and ``d_p = R(theta)``.
    """
    p = _require_finite("p", p)
    dR = rotation_matrix_deriv(pose.theta)
    return p @ dR.T, np.eye(2), pose.rotation()


@dataclass
class PoseSet:
    """Ordered per-view poses plus the scheduled (nominal) acquisition angles.

    ``nominal_angles`` must be strictly increasing within ``[0, pi)``; for a
    parallel-beam scan of M views they are ``i * pi / M``.
    """

    poses: list[ProjectionPose]
    nominal_angles: np.ndarray

    def __post_init__(self):
        self.nominal_angles = _require_finite(
            "nominal_angles", self.nominal_angles
        ).reshape(-1)
        if len(self.poses) != len(self.nominal_angles):
            raise ValueError(
                f"{len(self.poses)} poses for {len(self.nominal_angles)} nominal angles"
            )
        a = self.nominal_angles
        if a.size and (np.any(a < 0) or np.any(a >= np.pi) or np.any(np.diff(a) <= 0)):
            raise ValueError("nominal angles must be strictly increasing in [0, pi)")

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def thetas(self) -> np.ndarray:
        return np.array([p.theta for p in self.poses])

    def translations(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(len(self.poses), 2)

    @classmethod
    def from_arrays(cls, nominal_angles, thetas, translations) -> "PoseSet":
        nominal_angles = np.asarray(nominal_angles, dtype=float)
        thetas = np.asarray(thetas, dtype=float)
        translations = np.asarray(translations, dtype=float).reshape(-1, 2)
        poses = [ProjectionPose(th, t) for th, t in zip(thetas, translations)]
        return cls(poses, nominal_angles)

    @classmethod
    def initial(cls, nominal_angles) -> "PoseSet":
        """Optimization start: theta at the nominal angle, zero translation."""
        nominal_angles = np.asarray(nominal_angles, dtype=float)
        return cls.from_arrays(
            nominal_angles, nominal_angles, np.zeros((len(nominal_angles), 2))
        )


def nominal_view_angles(n_views: int) -> np.ndarray:
    """The M scheduled angles of a parallel-beam scan, uniform over [0, pi)."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    return np.arange(n_views) * (np.pi / n_views)
