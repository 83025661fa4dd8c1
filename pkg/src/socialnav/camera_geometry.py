"""Pinhole projection, fixed-height back-projection and pixel-to-world
uncertainty propagation for a calibrated camera.

All functions broadcast: a pixel argument may be shape ``(2,)`` or ``(N, 2)``
with a matching height array, which is how the pose estimator pushes all
17 joints of a person through in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBackProjection, DegenerateProjection

EPS_SCALE = 1e-9
EPS_DET = 1e-9


@dataclass(frozen=True)
class ProjectionMatrix:
    """3x4 camera matrix ``H = K [R | t]`` mapping homogeneous world points to pixels."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).reshape(3, 4)
        if not np.all(np.isfinite(h)):
            raise ValueError("projection matrix has non-finite entries")
        if np.linalg.matrix_rank(h[:, :3]) < 3:
            raise ValueError("left 3x3 block of the projection matrix is singular")
        object.__setattr__(self, "h", h)

    @classmethod
    def from_krt(cls, K, R, t) -> "ProjectionMatrix":
        K = np.asarray(K, dtype=float)
        Rt = np.hstack([np.asarray(R, dtype=float), np.asarray(t, dtype=float).reshape(3, 1)])
        return cls(K @ Rt)

    @classmethod
    def from_row_major(cls, values) -> "ProjectionMatrix":
        values = np.asarray(values, dtype=float)
        if values.size != 12:
            raise ValueError(f"expected 12 numbers for a projection matrix, got {values.size}")
        return cls(values.reshape(3, 4))

    @classmethod
    def look_at(cls, position, target, focal_px: float, cx: float, cy: float,
                up=(0.0, 0.0, 1.0)) -> "ProjectionMatrix":
        """Build H for a camera at ``position`` whose optical axis points at ``target``.

        Camera frame is the usual computer-vision one: x right, y down, z forward.
        """
        c = np.asarray(position, dtype=float)
        fwd = np.asarray(target, dtype=float) - c
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=float))
        if np.linalg.norm(right) < 1e-9:
            # looking straight down: pick world +x as image right
            right = np.array([1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.vstack([right, down, fwd])
        K = np.array([[focal_px, 0.0, cx], [0.0, focal_px, cy], [0.0, 0.0, 1.0]])
        return cls.from_krt(K, R, -R @ c)

    def row_major(self) -> list[float]:
        return [float(v) for v in self.h.ravel()]


@dataclass(frozen=True)
class PixelHeightNoise:
    """Standard deviations of the back-projection inputs (pixels, pixels, meters)."""

    sigma_xp: float
    sigma_yp: float
    sigma_zw: float

    def __post_init__(self):
        for name in ("sigma_xp", "sigma_yp", "sigma_zw"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _as_h(H) -> np.ndarray:
    return H.h if isinstance(H, ProjectionMatrix) else np.asarray(H, dtype=float)


def project(p, H) -> tuple[np.ndarray, np.ndarray | float]:
    """Project world point(s) ``p`` (..., 3) to pixels.

    Returns:
        (pixel (..., 2), projective scale s (...)).

    Raises:
        DegenerateProjection: if any ``|s| <= 1e-9``.
    """
    h = _as_h(H)
    p = np.asarray(p, dtype=float)
    hom = p @ h[:, :3].T + h[:, 3]
    s = hom[..., 2]
    if np.any(np.abs(s) <= EPS_SCALE):
        raise DegenerateProjection("point lies on the camera plane")
    pixel = hom[..., :2] / s[..., None]
    if pixel.ndim == 1:
        return pixel, float(s)
    return pixel, s


def _intermediates(pixel, z_w, h):
    xp = pixel[..., 0]
    yp = pixel[..., 1]
    a11 = h[2, 0] * xp - h[0, 0]
    a12 = h[2, 1] * xp - h[0, 1]
    a21 = h[2, 0] * yp - h[1, 0]
    a22 = h[2, 1] * yp - h[1, 1]
    b1 = h[0, 2] * z_w - h[2, 2] * xp * z_w - h[2, 3] * xp + h[0, 3]
    b2 = h[1, 2] * z_w - h[2, 2] * yp * z_w - h[2, 3] * yp + h[1, 3]
    D = a11 * a22 - a12 * a21
    if np.any(np.abs(D) <= EPS_DET):
        raise DegenerateBackProjection("viewing ray parallel to the height plane")
    return a11, a12, a21, a22, b1, b2, D


def back_project(pixel, z_w, H) -> np.ndarray:
    """World ``(x_w, y_w)`` of a pixel known to lie at height ``z_w``."""
    h = _as_h(H)
    pixel = np.asarray(pixel, dtype=float)
    z_w = np.asarray(z_w, dtype=float)
    a11, a12, a21, a22, b1, b2, D = _intermediates(pixel, z_w, h)
    nx = b1 * a22 - b2 * a12
    ny = b2 * a11 - b1 * a21
    return np.stack([nx / D, ny / D], axis=-1)


def back_projection_jacobian(pixel, z_w, H) -> np.ndarray:
    """Jacobian of ``(x_w, y_w, z_w)`` with respect to ``(x_p, y_p, z_w)``.

    Quotient rule on ``N_x / D`` and ``N_y / D``. The third row is (0, 0, 1).
    """
    h = _as_h(H)
    pixel = np.asarray(pixel, dtype=float)
    z_w = np.asarray(z_w, dtype=float)
    a11, a12, a21, a22, b1, b2, D = _intermediates(pixel, z_w, h)
    nx = b1 * a22 - b2 * a12
    ny = b2 * a11 - b1 * a21
    h31, h32, h33, h34 = h[2]

    # d/dx_p: a11' = h31, a12' = h32, b1' = -(h33 z + h34)
    db = -(h33 * z_w + h34)
    dnx_dx = db * a22 - b2 * h32
    dny_dx = b2 * h31 - db * a21
    dD_dx = h31 * a22 - h32 * a21
    # d/dy_p: a21' = h31, a22' = h32, b2' = -(h33 z + h34)
    dnx_dy = b1 * h32 - db * a12
    dny_dy = db * a11 - b1 * h31
    dD_dy = a11 * h32 - a12 * h31
    # d/dz_w: only b1, b2 move
    db1_dz = h[0, 2] - h33 * pixel[..., 0]
    db2_dz = h[1, 2] - h33 * pixel[..., 1]
    dnx_dz = db1_dz * a22 - db2_dz * a12
    dny_dz = db2_dz * a11 - db1_dz * a21

    D2 = D * D
    J = np.zeros(np.shape(D) + (3, 3))
    J[..., 0, 0] = (dnx_dx * D - nx * dD_dx) / D2
    J[..., 0, 1] = (dnx_dy * D - nx * dD_dy) / D2
    J[..., 0, 2] = dnx_dz / D
    J[..., 1, 0] = (dny_dx * D - ny * dD_dx) / D2
    J[..., 1, 1] = (dny_dy * D - ny * dD_dy) / D2
    J[..., 1, 2] = dny_dz / D
    J[..., 2, 2] = 1.0
    return J


def propagate_covariance(J, noise: PixelHeightNoise | np.ndarray) -> np.ndarray:
    """``J diag(sx^2, sy^2, sz^2) J^T``, symmetrized.

    ``noise`` may also be an array of per-point sigmas with shape (..., 3).
    """
    J = np.asarray(J, dtype=float)
    if isinstance(noise, PixelHeightNoise):
        sig = np.array([noise.sigma_xp, noise.sigma_yp, noise.sigma_zw])
    else:
        sig = np.asarray(noise, dtype=float)
    JS = J * (sig**2)[..., None, :]
    cov = JS @ np.swapaxes(J, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))
