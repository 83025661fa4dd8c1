"""Central-layer fusion: cross-node grouping, EKF tracking with a constant
velocity and turn-rate (CVTR) model, and timestamp-based delay compensation.

Track state is ``(x, y, v, theta, omega)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .angles import wrap_angle
from .errors import MissingJoints
from .pose_estimation import (
    LidarJointMeasurement,
    PosePrior,
    RefinedPose,
    SkeletonModel,
    heading_from_pose,
    pose_center,
    refine_pose,
)

logger = logging.getLogger(__name__)

OMEGA_EPS = 1e-6
HUMAN = "human"
ROBOT = "robot"


@dataclass(frozen=True)
class Detection:
    cls: str
    position: np.ndarray
    timestamp: float
    node_id: int = -1
    yaw: float | None = None
    refined_pose: RefinedPose | None = None


@dataclass
class Track:
    id: int
    cls: str
    state: np.ndarray
    cov: np.ndarray
    last_update: float
    misses: int = 0
    hits: int = 1
    confirmed: bool = False

    @property
    def position(self) -> np.ndarray:
        return self.state[:2]


@dataclass(frozen=True)
class FusionConfig:
    gate_distance: float = 1.0
    sigma_accel: float = 0.8  # m/s^2
    sigma_turn_accel: float = 0.3  # rad/s^2
    sigma_xy: float = 0.1  # m
    sigma_theta: float = 0.25  # rad
    miss_limit: int = 5
    spawn_confirmations: int = 2
    init_speed_sigma: float = 1.0
    init_omega_sigma: float = 0.5
    max_age: float = 1.0  # s without an update before a track is dropped

    def __post_init__(self):
        for name in ("gate_distance", "sigma_accel", "sigma_turn_accel", "sigma_xy", "sigma_theta",
                     "init_speed_sigma", "init_omega_sigma", "max_age"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.miss_limit < 1 or self.spawn_confirmations < 1:
            raise ValueError("miss_limit and spawn_confirmations must be >= 1")


@dataclass(frozen=True)
class FusedObject:
    track_id: int
    cls: str
    position: np.ndarray
    yaw: float
    speed: float
    omega: float
    stamp: float
    # (n, 3) rows of (x, y, theta) at now + k*dt, k = 1..n
    trajectory: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


def _cvtr_mean(state, dt):
    x, y, v, th, om = state
    if abs(om) > OMEGA_EPS:
        th2 = th + om * dt
        x2 = x + v / om * (np.sin(th2) - np.sin(th))
        y2 = y + v / om * (np.cos(th) - np.cos(th2))
    else:
        # straight-line limit with the mid-step heading, continuous with the arc branch
        th2 = th + om * dt
        mid = th + 0.5 * om * dt
        x2 = x + v * dt * np.cos(mid)
        y2 = y + v * dt * np.sin(mid)
    return np.array([x2, y2, v, wrap_angle(th2), om])


def _cvtr_jacobian(state, dt):
    _, _, v, th, om = state
    F = np.eye(5)
    if abs(om) > OMEGA_EPS:
        th2 = th + om * dt
        s1, c1, s2, c2 = np.sin(th), np.cos(th), np.sin(th2), np.cos(th2)
        F[0, 2] = (s2 - s1) / om
        F[0, 3] = v / om * (c2 - c1)
        F[0, 4] = v * dt * c2 / om - v / om**2 * (s2 - s1)
        F[1, 2] = (c1 - c2) / om
        F[1, 3] = v / om * (s2 - s1)
        F[1, 4] = v * dt * s2 / om - v / om**2 * (c1 - c2)
    else:
        mid = th + 0.5 * om * dt
        cm, sm = np.cos(mid), np.sin(mid)
        F[0, 2] = dt * cm
        F[0, 3] = -v * dt * sm
        F[0, 4] = -0.5 * v * dt * dt * sm
        F[1, 2] = dt * sm
        F[1, 3] = v * dt * cm
        F[1, 4] = 0.5 * v * dt * dt * cm
    F[3, 4] = dt
    return F


def process_noise(state, dt: float, q: tuple[float, float]) -> np.ndarray:
    """White longitudinal-acceleration and turn-acceleration noise over ``dt``."""
    sa, sw = q
    th = state[3]
    G = np.array([
        [0.5 * dt * dt * np.cos(th), 0.0],
        [0.5 * dt * dt * np.sin(th), 0.0],
        [dt, 0.0],
        [0.0, 0.5 * dt * dt],
        [0.0, dt],
    ])
    return G @ np.diag([sa * sa, sw * sw]) @ G.T


def cvtr_predict(state, cov, dt: float, q: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Propagate a CVTR state and covariance forward by ``dt >= 0`` seconds."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    state = np.asarray(state, dtype=float)
    cov = np.asarray(cov, dtype=float)
    F = _cvtr_jacobian(state, dt)
    new_cov = F @ cov @ F.T + process_noise(state, dt, q)
    return _cvtr_mean(state, dt), 0.5 * (new_cov + new_cov.T)


def cvtr_trajectory(state, n: int, dt: float) -> np.ndarray:
    """``(n, 3)`` rows of (x, y, theta) at ``dt, 2 dt, ..., n dt`` ahead."""
    out = np.empty((n, 3))
    s = np.asarray(state, dtype=float)
    for k in range(n):
        p = _cvtr_mean(s, (k + 1) * dt)
        out[k] = (p[0], p[1], p[3])
    return out


def compensate_delay(track: Track, now: float, q: tuple[float, float]) -> Track:
    """Copy of ``track`` extrapolated to ``now``; the input track is untouched."""
    if now < track.last_update - 1e-12:
        raise ValueError("now precedes the track's last update")
    dt = max(0.0, now - track.last_update)
    if dt == 0.0:
        return replace(track, state=track.state.copy(), cov=track.cov.copy())
    state, cov = cvtr_predict(track.state, track.cov, dt, q)
    return replace(track, state=state, cov=cov, last_update=now)


def associate(detections: list[Detection], tracks: list[Track], cfg: FusionConfig):
    """Greedy gated nearest-neighbour matching on class-equal pairs.

    Ties are broken by (distance, lower track id).

    Returns:
        (list of (detection index, track index), unmatched detection indices,
        unmatched track indices)
    """
    pairs = []
    for di, det in enumerate(detections):
        for ti, tr in enumerate(tracks):
            if det.cls != tr.cls:
                continue
            dist = float(np.hypot(*(np.asarray(det.position) - tr.position)))
            if dist <= cfg.gate_distance:
                pairs.append((dist, tr.id, di, ti))
    pairs.sort()
    used_d, used_t, matches = set(), set(), []
    for _, _, di, ti in pairs:
        if di in used_d or ti in used_t:
            continue
        used_d.add(di)
        used_t.add(ti)
        matches.append((di, ti))
    unmatched_d = [i for i in range(len(detections)) if i not in used_d]
    unmatched_t = [i for i in range(len(tracks)) if i not in used_t]
    return matches, unmatched_d, unmatched_t


def ekf_update(track: Track, detection: Detection, cfg: FusionConfig) -> Track:
    """EKF position (and yaw, if measured) update in Joseph form."""
    x = track.state
    P = track.cov
    if detection.yaw is not None:
        H = np.zeros((3, 5))
        H[0, 0] = H[1, 1] = H[2, 3] = 1.0
        z = np.array([detection.position[0], detection.position[1], detection.yaw])
        R = np.diag([cfg.sigma_xy**2, cfg.sigma_xy**2, cfg.sigma_theta**2])
        y = z - H @ x
        y[2] = wrap_angle(y[2])
    else:
        H = np.zeros((2, 5))
        H[0, 0] = H[1, 1] = 1.0
        R = np.diag([cfg.sigma_xy**2, cfg.sigma_xy**2])
        y = np.asarray(detection.position, dtype=float) - H @ x
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    x_new = x + K @ y
    x_new[3] = wrap_angle(x_new[3])
    I_KH = np.eye(5) - K @ H
    P_new = I_KH @ P @ I_KH.T + K @ R @ K.T
    return replace(track, state=x_new, cov=0.5 * (P_new + P_new.T))


class Tracker:
    """Single-writer track store consuming detections with heterogeneous stamps."""

    def __init__(self, cfg: FusionConfig | None = None):
        self.cfg = cfg or FusionConfig()
        self.tracks: list[Track] = []
        self._next_id = 0

    @property
    def q(self) -> tuple[float, float]:
        return (self.cfg.sigma_accel, self.cfg.sigma_turn_accel)

    def _spawn(self, det: Detection) -> Track:
        cfg = self.cfg
        yaw = 0.0 if det.yaw is None else det.yaw
        state = np.array([det.position[0], det.position[1], 0.0, yaw, 0.0])
        cov = np.diag([cfg.sigma_xy**2, cfg.sigma_xy**2, cfg.init_speed_sigma**2,
                       (cfg.sigma_theta if det.yaw is not None else np.pi) ** 2,
                       cfg.init_omega_sigma**2])
        tr = Track(self._next_id, det.cls, state, cov, det.timestamp,
                   confirmed=cfg.spawn_confirmations <= 1)
        self._next_id += 1
        return tr

    def _predict_to(self, tr: Track, stamp: float) -> Track:
        # stamps older than the last update are applied at the last update time
        dt = max(0.0, stamp - tr.last_update)
        if dt == 0.0:
            return tr
        state, cov = cvtr_predict(tr.state, tr.cov, dt, self.q)
        return replace(tr, state=state, cov=cov, last_update=stamp)

    def fuse_step(self, detections: list[Detection], now: float,
                  horizon: int = 0, horizon_dt: float = 0.1) -> list[FusedObject]:
        """Update the track store with ``detections`` and report tracks at ``now``.

        Detections are processed in stamp order. Each track is predicted to a
        detection's stamp before matching and updating; the reported objects
        are extrapolated to ``now``. Miss counting only happens on calls that
        carry detections; tracks not updated for ``max_age`` seconds are
        dropped regardless.
        """
        if not detections:
            self.tracks = [tr for tr in self.tracks if now - tr.last_update <= self.cfg.max_age]
            return self.report(now, horizon, horizon_dt)
        matched: set[int] = set()
        born: set[int] = set()
        order = sorted(range(len(detections)), key=lambda i: (detections[i].timestamp, detections[i].node_id, i))
        for stamp in sorted({detections[i].timestamp for i in order}):
            batch = [detections[i] for i in order if detections[i].timestamp == stamp]
            predicted = [self._predict_to(tr, stamp) for tr in self.tracks]
            matches, unmatched_d, _ = associate(batch, predicted, self.cfg)
            for di, ti in matches:
                self.tracks[ti] = ekf_update(predicted[ti], batch[di], self.cfg)
                matched.add(self.tracks[ti].id)
            for di in unmatched_d:
                new = self._spawn(batch[di])
                self.tracks.append(new)
                born.add(new.id)

        survivors = []
        for tr in self.tracks:
            if tr.id in born:
                survivors.append(tr)
                continue
            if tr.id in matched:
                tr.hits += 1
                tr.misses = 0
                if tr.hits >= self.cfg.spawn_confirmations:
                    tr.confirmed = True
            else:
                tr.misses += 1
                if not tr.confirmed:
                    # tentative tracks need consecutive matches
                    continue
            if tr.misses < self.cfg.miss_limit and now - tr.last_update <= self.cfg.max_age:
                survivors.append(tr)
        self.tracks = survivors
        return self.report(now, horizon, horizon_dt)

    def report(self, now: float, horizon: int = 0, horizon_dt: float = 0.1) -> list[FusedObject]:
        out = []
        for tr in self.tracks:
            if not tr.confirmed:
                continue
            c = compensate_delay(tr, max(now, tr.last_update), self.q)
            traj = cvtr_trajectory(c.state, horizon, horizon_dt) if horizon else np.zeros((0, 3))
            out.append(FusedObject(tr.id, tr.cls, c.state[:2].copy(), float(c.state[3]),
                                   float(c.state[2]), float(c.state[4]), c.last_update, traj))
        return out


@dataclass(frozen=True)
class PersonReport:
    """What a sensor node sends to the central layer for one person."""

    priors: tuple[PosePrior, ...]
    lidar: tuple[LidarJointMeasurement, ...]
    refined: RefinedPose
    position: np.ndarray
    yaw: float | None


@dataclass(frozen=True)
class NodeReport:
    node_id: int
    stamp: float
    persons: tuple[PersonReport, ...]


def fuse_node_reports(reports: list[NodeReport], skeleton: SkeletonModel, gate: float = 1.0,
                      cooperative: bool = True) -> list[Detection]:
    """Turn per-node reports into detections, refining cross-node matches jointly.

    Reports sharing a capture stamp are grouped by greedy nearest-neighbour
    matching of their node-local positions (one person per node per group).
    A group seen by several nodes is re-solved with all camera priors and
    LiDAR fixes; a single-node group keeps the node-local solution.
    """
    dets: list[Detection] = []
    by_stamp: dict[float, list[NodeReport]] = {}
    for rep in sorted(reports, key=lambda r: (r.stamp, r.node_id)):
        by_stamp.setdefault(rep.stamp, []).append(rep)
    for stamp, reps in by_stamp.items():
        groups: list[list[tuple[int, PersonReport]]] = []
        for rep in reps:
            cand = []
            for gi, g in enumerate(groups):
                if any(nid == rep.node_id for nid, _ in g):
                    continue
                ref = np.mean([p.position for _, p in g], axis=0)
                for pi, p in enumerate(rep.persons):
                    d = float(np.hypot(*(p.position - ref)))
                    if d <= gate:
                        cand.append((d, gi, pi))
            cand.sort()
            used_g, used_p = set(), set()
            for _, gi, pi in cand:
                if gi in used_g or pi in used_p:
                    continue
                used_g.add(gi)
                used_p.add(pi)
                groups[gi].append((rep.node_id, rep.persons[pi]))
            for pi, p in enumerate(rep.persons):
                if pi not in used_p:
                    groups.append([(rep.node_id, p)])
        for g in groups:
            if len(g) == 1 or not cooperative:
                nid, p = g[0]
                dets.append(Detection(HUMAN, p.position, stamp, nid, p.yaw, p.refined))
                continue
            priors = [pr for _, p in g for pr in p.priors]
            lidar = [m for _, p in g for m in p.lidar]
            pose = refine_pose(priors, skeleton, lidar)
            try:
                yaw = heading_from_pose(pose, skeleton)
            except MissingJoints:
                yaw = None
            dets.append(Detection(HUMAN, pose_center(pose.joints, skeleton), stamp, -1, yaw, pose))
    return dets
