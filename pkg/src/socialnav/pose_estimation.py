"""Per-person 3D pose from pixel keypoints.

Each keypoint is back-projected at the nominal height of its joint (a fraction
of the stature prior) to give a Gaussian per joint. The joint Gaussians, bone
length priors and optional LiDAR joint fixes are then combined in a
maximum-likelihood refinement solved with damped Newton iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .angles import wrap_angle
from .camera_geometry import (
    PixelHeightNoise,
    ProjectionMatrix,
    back_project,
    back_projection_jacobian,
    propagate_covariance,
)
from .errors import MissingJoints, SingularCovariance

COV_REG = 1e-9
NORM_SMOOTH = 1e-12
FTOL = 1e-13

COCO17 = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

HEIGHT_FRACTIONS = {
    "nose": 0.936,
    "left_eye": 0.948,
    "right_eye": 0.948,
    "left_ear": 0.939,
    "right_ear": 0.939,
    "left_shoulder": 0.818,
    "right_shoulder": 0.818,
    "left_elbow": 0.630,
    "right_elbow": 0.630,
    "left_wrist": 0.485,
    "right_wrist": 0.485,
    "left_hip": 0.530,
    "right_hip": 0.530,
    "left_knee": 0.285,
    "right_knee": 0.285,
    "left_ankle": 0.039,
    "right_ankle": 0.039,
}

SHOULDER_WIDTH = 0.259
HIP_WIDTH = 0.191

# Upright body template in the person frame (x forward, y left, z up).
# Head offsets are in meters, everything else scales with stature.
_HEAD_OFFSETS = {
    "nose": (0.11, 0.0),
    "left_eye": (0.06, 0.035),
    "right_eye": (0.06, -0.035),
    "left_ear": (-0.02, 0.075),
    "right_ear": (-0.02, -0.075),
}

# (joint a, joint b, length as fraction of stature or None = from template)
_BONES = (
    ("nose", "left_eye", None),
    ("nose", "right_eye", None),
    ("left_eye", "left_ear", None),
    ("right_eye", "right_ear", None),
    ("nose", "left_shoulder", None),
    ("nose", "right_shoulder", None),
    ("left_shoulder", "right_shoulder", SHOULDER_WIDTH),
    ("left_shoulder", "left_elbow", 0.186),
    ("left_elbow", "left_wrist", 0.146),
    ("right_shoulder", "right_elbow", 0.186),
    ("right_elbow", "right_wrist", 0.146),
    ("left_shoulder", "left_hip", None),
    ("right_shoulder", "right_hip", None),
    ("left_hip", "right_hip", HIP_WIDTH),
    ("left_hip", "left_knee", 0.245),
    ("left_knee", "left_ankle", 0.246),
    ("right_hip", "right_knee", 0.245),
    ("right_knee", "right_ankle", 0.246),
)


def body_template(stature: float) -> np.ndarray:
    """Joint positions (17, 3) of an upright person at the origin facing +x."""
    out = np.zeros((len(COCO17), 3))
    for i, name in enumerate(COCO17):
        out[i, 2] = HEIGHT_FRACTIONS[name] * stature
        if name in _HEAD_OFFSETS:
            out[i, :2] = _HEAD_OFFSETS[name]
            continue
        side = 1.0 if name.startswith("left") else -1.0
        if name.endswith(("shoulder", "elbow", "wrist")):
            out[i, 1] = side * 0.5 * SHOULDER_WIDTH * stature
        else:
            out[i, 1] = side * 0.5 * HIP_WIDTH * stature
    return out


def posed_joints(x: float, y: float, heading: float, stature: float) -> np.ndarray:
    """Template joints rotated to ``heading`` and translated to ``(x, y)``."""
    t = body_template(stature)
    c, s = np.cos(heading), np.sin(heading)
    out = t.copy()
    out[:, 0] = x + c * t[:, 0] - s * t[:, 1]
    out[:, 1] = y + s * t[:, 0] + c * t[:, 1]
    return out


@dataclass(frozen=True)
class Gaussian3:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class SkeletonModel:
    """Joint names, bone-length priors and per-joint height fractions."""

    joint_names: tuple[str, ...]
    bones: list[tuple[int, int, float, float]]
    height_fractions: np.ndarray

    def __post_init__(self):
        self.height_fractions = np.asarray(self.height_fractions, dtype=float)
        n = len(self.joint_names)
        if self.height_fractions.shape != (n,):
            raise ValueError("one height fraction per joint required")
        if np.any(self.height_fractions < 0) or np.any(self.height_fractions > 1.05):
            raise ValueError("height fractions must lie in [0, 1.05]")
        for i, j, l, s in self.bones:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"bad bone ({i}, {j})")
            if l <= 0 or s <= 0:
                raise ValueError("bone length and sigma must be positive")
        if n > 1 and not self._connected():
            raise ValueError("bone graph is not connected")

    def _connected(self) -> bool:
        n = len(self.joint_names)
        adj = [[] for _ in range(n)]
        for i, j, _, _ in self.bones:
            adj[i].append(j)
            adj[j].append(i)
        seen = {0}
        stack = [0]
        while stack:
            for k in adj[stack.pop()]:
                if k not in seen:
                    seen.add(k)
                    stack.append(k)
        return len(seen) == n

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise MissingJoints(f"skeleton has no joint {name!r}") from None

    def bone_arrays(self):
        b = np.array([(i, j) for i, j, _, _ in self.bones], dtype=int).reshape(-1, 2)
        lengths = np.array([l for _, _, l, _ in self.bones], dtype=float)
        sigmas = np.array([s for _, _, _, s in self.bones], dtype=float)
        return b[:, 0], b[:, 1], lengths, sigmas


def default_skeleton(stature: float = 1.75, bone_sigma: float = 0.05) -> SkeletonModel:
    """COCO-17 skeleton with anthropometric bone lengths for ``stature`` meters."""
    names = COCO17
    idx = {n: k for k, n in enumerate(names)}
    tmpl = body_template(stature)
    bones = []
    for a, b, frac in _BONES:
        i, j = idx[a], idx[b]
        if frac is None:
            length = float(np.linalg.norm(tmpl[i] - tmpl[j]))
        else:
            length = frac * stature
        bones.append((i, j, length, bone_sigma))
    hf = np.array([HEIGHT_FRACTIONS[n] for n in names])
    return SkeletonModel(names, bones, hf)


@dataclass(frozen=True)
class PosePrior:
    """Per-joint Gaussians from one camera view."""

    means: np.ndarray  # (n_joints, 3)
    covs: np.ndarray  # (n_joints, 3, 3)
    source_node: int = 0
    timestamp: float = 0.0

    def joint(self, i: int) -> Gaussian3:
        return Gaussian3(self.means[i], self.covs[i])


@dataclass(frozen=True)
class LidarJointMeasurement:
    joint_index: int
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class RefinedPose:
    joints: np.ndarray  # (n_joints, 3)
    nll: float
    converged: bool
    iterations: int
    history: list[float] = field(default_factory=list)


def joint_prior_from_keypoint(keypoint, joint_index: int, stature_prior: tuple[float, float],
                              H: ProjectionMatrix, noise: PixelHeightNoise,
                              skeleton: SkeletonModel | None = None) -> Gaussian3:
    """Gaussian for one joint from its pixel, the stature prior and the camera."""
    skeleton = skeleton or default_skeleton(stature_prior[0])
    means, covs = _priors_for(np.asarray(keypoint, dtype=float)[None, :],
                              np.array([joint_index]), stature_prior, H, noise, skeleton)
    return Gaussian3(means[0], covs[0])


def _priors_for(keypoints, joint_idx, stature_prior, H, noise, skeleton):
    mean_stature, std_stature = stature_prior
    frac = skeleton.height_fractions[joint_idx]
    z = frac * mean_stature
    xy = back_project(keypoints, z, H)
    J = back_projection_jacobian(keypoints, z, H)
    sig_z = np.hypot(frac * std_stature, noise.sigma_zw)
    sig = np.stack([np.full_like(z, noise.sigma_xp), np.full_like(z, noise.sigma_yp), sig_z], axis=-1)
    covs = propagate_covariance(J, sig)
    means = np.column_stack([xy, z])
    return means, covs


def pose_prior_from_keypoints(keypoints, stature_prior: tuple[float, float], H: ProjectionMatrix,
                              noise: PixelHeightNoise, skeleton: SkeletonModel,
                              source_node: int = 0, timestamp: float = 0.0) -> PosePrior:
    """Vectorized :func:`joint_prior_from_keypoint` over all joints of a person."""
    keypoints = np.asarray(keypoints, dtype=float)
    means, covs = _priors_for(keypoints, np.arange(skeleton.n_joints), stature_prior, H, noise, skeleton)
    return PosePrior(means, covs, source_node, timestamp)


def _whitener(cov) -> np.ndarray:
    """Upper factor U with U^T U = inv(cov + reg I)."""
    cov = np.asarray(cov, dtype=float)
    reg = cov + COV_REG * np.eye(cov.shape[-1])
    try:
        L = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError:
        raise SingularCovariance("covariance is not positive definite") from None
    if not np.all(np.isfinite(L)):
        raise SingularCovariance("covariance is not finite")
    # inv(reg) = L^-T L^-1  ->  U = L^-1
    eye = np.broadcast_to(np.eye(cov.shape[-1]), reg.shape)
    return np.linalg.solve(L, eye)


def negative_log_likelihood(candidate, priors: list[PosePrior], skeleton: SkeletonModel,
                            lidar: list[LidarJointMeasurement] | tuple = ()) -> float:
    """Negative log of the joint-coherence likelihood, constants dropped."""
    if not priors:
        raise ValueError("at least one PosePrior is required")
    x = np.asarray(candidate, dtype=float)
    total = 0.0
    for pr in priors:
        U = _whitener(pr.covs)
        r = np.einsum("nij,nj->ni", U, x - pr.means)
        total += 0.5 * float(np.sum(r * r))
    bi, bj, lengths, sigmas = skeleton.bone_arrays()
    if len(bi):
        diff = x[bi] - x[bj]
        norm = np.sqrt(np.sum(diff * diff, axis=1) + NORM_SMOOTH)
        total += float(np.sum((norm - lengths) ** 2 / (2.0 * sigmas**2)))
    for m in lidar:
        U = _whitener(m.cov)
        r = U @ (x[m.joint_index] - np.asarray(m.mean, dtype=float))
        total += 0.5 * float(r @ r)
    return total


class _Problem:
    """Stacked residual ``r(x)`` for the refinement; x is the flattened pose."""

    def __init__(self, priors, skeleton, lidar, curvature=True):
        self.curvature = curvature
        n = skeleton.n_joints
        self.n = n
        rows = []
        offsets = []
        for pr in priors:
            U = _whitener(pr.covs)  # (n, 3, 3)
            blk = np.zeros((3 * n, 3 * n))
            for k in range(n):
                blk[3 * k:3 * k + 3, 3 * k:3 * k + 3] = U[k]
            rows.append(blk)
            offsets.append(np.einsum("nij,nj->ni", U, pr.means).ravel())
        for m in lidar:
            U = _whitener(m.cov)
            blk = np.zeros((3, 3 * n))
            k = m.joint_index
            blk[:, 3 * k:3 * k + 3] = U
            rows.append(blk)
            offsets.append(U @ np.asarray(m.mean, dtype=float))
        # linear part: r_lin = A x - c
        self.A = np.vstack(rows)
        self.c = np.concatenate(offsets)
        self.AtA = self.A.T @ self.A
        self.Atc = self.A.T @ self.c
        self.bi, self.bj, self.lengths, self.sigmas = skeleton.bone_arrays()
        self.nb = len(self.bi)
        self.cols_i = 3 * self.bi[:, None] + np.arange(3)
        self.cols_j = 3 * self.bj[:, None] + np.arange(3)
        self.brow = np.arange(self.nb)[:, None]
        self.incidence = np.zeros((self.nb, n))
        self.incidence[np.arange(self.nb), self.bi] = 1.0
        self.incidence[np.arange(self.nb), self.bj] = -1.0
        self.pair_incidence = (self.incidence[:, :, None] * self.incidence[:, None, :]).reshape(self.nb, n * n)

    def bone_residual(self, x):
        X = x.reshape(-1, 3)
        diff = X[self.bi] - X[self.bj]
        norm = np.sqrt(np.sum(diff * diff, axis=1) + NORM_SMOOTH)
        return (norm - self.lengths) / self.sigmas, diff, norm

    def cost(self, x) -> float:
        r_lin = self.A @ x - self.c
        rb, _, _ = self.bone_residual(x)
        return 0.5 * float(r_lin @ r_lin + rb @ rb)

    def normal_equations(self, x):
        """Hessian of the cost (Gauss-Newton part plus bone curvature), gradient,
        and the Gauss-Newton diagonal used to scale damping."""
        rb, diff, norm = self.bone_residual(x)
        u = diff / (norm * self.sigmas)[:, None]
        Jb = np.zeros((self.nb, 3 * self.n))
        Jb[self.brow, self.cols_i] = u
        Jb[self.brow, self.cols_j] = -u
        H = self.AtA + Jb.T @ Jb
        scale = np.diag(H).copy()
        g = self.AtA @ x - self.Atc + Jb.T @ rb
        if self.curvature:
            # second-order part of the bone terms: r/(sigma n) (I - e e^T)
            e = diff / norm[:, None]
            w = rb / (self.sigmas * norm)
            K = w[:, None, None] * (np.eye(3) - e[:, :, None] * e[:, None, :])
            H4 = (self.pair_incidence.T @ K.reshape(self.nb, 9)).reshape(self.n, self.n, 3, 3)
            H = H + H4.transpose(0, 2, 1, 3).reshape(3 * self.n, 3 * self.n)
        return H, g, scale


def _initial_guess(priors: list[PosePrior]) -> np.ndarray:
    if len(priors) == 1:
        return priors[0].means.copy()
    info_sum = 0.0
    weighted = 0.0
    for pr in priors:
        info = np.linalg.inv(pr.covs + COV_REG * np.eye(3))
        info_sum = info_sum + info
        weighted = weighted + np.einsum("nij,nj->ni", info, pr.means)
    return np.linalg.solve(info_sum, weighted[..., None])[..., 0]


def refine_pose(priors: list[PosePrior], skeleton: SkeletonModel,
                lidar: list[LidarJointMeasurement] | tuple = (), max_iter: int = 100,
                grad_tol: float = 1e-6, step_tol: float = 1e-8,
                init: np.ndarray | None = None) -> RefinedPose:
    """Maximum-likelihood pose under camera priors, bone lengths and LiDAR fixes.

    Damped Newton iterations on the exact Hessian, with the damping scaled
    by the Gauss-Newton diagonal and raised until the system is positive
    definite. ``converged`` is set when the gradient infinity-norm drops
    below ``grad_tol``, an accepted step is shorter than ``step_tol``, or
    the predicted decrease falls to rounding level; otherwise the best
    iterate is returned with ``converged = False``.
    """
    if not priors:
        raise ValueError("at least one PosePrior is required")
    prob = _Problem(priors, skeleton, lidar)
    x = (_initial_guess(priors) if init is None else np.asarray(init, dtype=float)).ravel().copy()
    cost = prob.cost(x)
    history = [cost]
    H, g, scale = prob.normal_equations(x)
    lam = 1e-6
    converged = False
    it = 0
    while it < max_iter:
        if np.max(np.abs(g)) < grad_tol:
            converged = True
            break
        it += 1
        try:
            # the bone curvature can make H indefinite; damping raises it to positive definite
            factor = cho_factor(H + lam * np.diag(scale))
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        step = -cho_solve(factor, g)
        if abs(float(g @ step)) <= FTOL * (1.0 + abs(cost)):
            # no decrease left above rounding level
            converged = True
            break
        x_new = x + step
        cost_new = prob.cost(x_new)
        if cost_new <= cost:
            x, cost = x_new, cost_new
            history.append(cost)
            lam = max(lam / 10.0, 1e-12)
            if np.linalg.norm(step) < step_tol:
                converged = True
                break
            H, g, scale = prob.normal_equations(x)
        else:
            lam *= 10.0
    return RefinedPose(x.reshape(-1, 3), cost, converged, it, history)


def pose_center(joints, skeleton: SkeletonModel) -> np.ndarray:
    """Ground-plane position of a person: mean xy of shoulders and hips."""
    idx = [skeleton.index(n) for n in ("left_shoulder", "right_shoulder", "left_hip", "right_hip")]
    return np.asarray(joints)[idx, :2].mean(axis=0)


def heading_from_pose(pose: RefinedPose | np.ndarray, skeleton: SkeletonModel,
                      fallback_velocity_heading: float | None = None) -> float:
    """Facing direction of a person from the shoulder and hip lines.

    The facing vector is the right-to-left shoulder vector rotated by -90 deg,
    so a person whose left shoulder is at +y faces +x. Shoulder and hip
    estimates are averaged on the unit circle.
    When they disagree by more than 90 deg the fallback heading is returned
    if given, else the shoulder estimate.
    """
    joints = pose.joints if isinstance(pose, RefinedPose) else np.asarray(pose)
    try:
        ls, rs = skeleton.index("left_shoulder"), skeleton.index("right_shoulder")
        lh, rh = skeleton.index("left_hip"), skeleton.index("right_hip")
    except MissingJoints:
        if fallback_velocity_heading is not None:
            return wrap_angle(fallback_velocity_heading)
        raise
    sel = joints[[ls, rs, lh, rh], :2]
    if not np.all(np.isfinite(sel)):
        if fallback_velocity_heading is not None:
            return wrap_angle(fallback_velocity_heading)
        raise MissingJoints("shoulder/hip joints are not finite")
    ds = sel[0] - sel[1]
    dh = sel[2] - sel[3]
    a_s = np.arctan2(-ds[0], ds[1])
    a_h = np.arctan2(-dh[0], dh[1])
    if abs(wrap_angle(a_s - a_h)) > np.pi / 2:
        if fallback_velocity_heading is not None:
            return wrap_angle(fallback_velocity_heading)
        return wrap_angle(a_s)
    return wrap_angle(np.arctan2(np.sin(a_s) + np.sin(a_h), np.cos(a_s) + np.cos(a_h)))
