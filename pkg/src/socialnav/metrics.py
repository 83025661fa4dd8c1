"""Episode metrics: perception accuracy against ground truth, clearance, and travel statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .angles import wrap_angle
from .simulation import PEDESTRIAN_RADIUS, EpisodeLog
from .vehicle_model import RobotGeometry, footprint_distance


@dataclass(frozen=True)
class MetricsReport:
    position_mae: float
    position_rmse: float
    yaw_mae: float
    yaw_rmse: float
    clearance: float
    collisions: int
    travel_distance: float
    travel_time: float
    goal_reached: bool
    cycles: int

    def as_dict(self) -> dict:
        return asdict(self)


def rect_point_distance(center, heading: float, half_length: float, half_width: float,
                        points) -> np.ndarray:
    """Distance from a centred rectangle to points (..., 2); zero inside."""
    g = RobotGeometry(half_length, half_length, half_width)
    return footprint_distance(np.array([center[0], center[1], heading]), g, points)


def clearance(robot_state, geom: RobotGeometry, ped_xy, radius: float = PEDESTRIAN_RADIUS) -> float:
    """Border-to-border distance between the robot footprint and the nearest pedestrian disc."""
    pts = np.asarray(ped_xy, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return float("inf")
    return float(np.min(footprint_distance(robot_state, geom, pts))) - radius


def _errors(estimates: np.ndarray, yaws, truth: np.ndarray):
    """Match each estimate to its nearest true person; return position and yaw errors."""
    pos, ang = [], []
    if len(truth) == 0:
        return pos, ang
    for e, yaw in zip(estimates, yaws):
        d = np.hypot(truth[:, 0] - e[0], truth[:, 1] - e[1])
        i = int(np.argmin(d))
        pos.append(float(d[i]))
        if yaw is not None:
            ang.append(abs(float(wrap_angle(yaw - truth[i, 2]))))
    return pos, ang


def _mae_rmse(errs) -> tuple[float, float]:
    if not errs:
        return float("nan"), float("nan")
    a = np.asarray(errs)
    return float(np.mean(np.abs(a))), float(np.sqrt(np.mean(a * a)))


def compute_metrics(log: EpisodeLog, geom: RobotGeometry | None = None) -> MetricsReport:
    """Summarize an episode. ``geom`` defaults to the standard robot footprint."""
    if not log.cycles:
        raise ValueError("episode log is empty")
    geom = geom or RobotGeometry()
    pos_err, yaw_err = [], []
    min_clear = float("inf")
    collisions = 0
    for c in log.cycles:
        if c.tracks:
            est = np.array([t.position for t in c.tracks])
            p, a = _errors(est, [t.yaw for t in c.tracks], c.pedestrians)
            pos_err += p
            yaw_err += a
        cl = clearance(c.robot, geom, c.pedestrians[:, :2])
        min_clear = min(min_clear, cl)
        collisions += int(cl <= 0.0)
    xy = np.array([c.robot[:2] for c in log.cycles])
    dist = float(np.sum(np.hypot(*np.diff(xy, axis=0).T))) if len(xy) > 1 else 0.0
    pm, pr = _mae_rmse(pos_err)
    ym, yr = _mae_rmse(yaw_err)
    t = log.goal_time if log.goal_reached else float("nan")
    return MetricsReport(pm, pr, ym, yr, min_clear, collisions, dist, t, log.goal_reached,
                         len(log.cycles))


def aggregate(reports: list[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and standard deviation of each numeric metric across episodes."""
    out = {}
    for key in ("position_mae", "position_rmse", "yaw_mae", "yaw_rmse", "clearance",
                "collisions", "travel_distance", "travel_time"):
        vals = np.array([getattr(r, key) for r in reports], dtype=float)
        vals = vals[np.isfinite(vals)]
        out[key] = (float(np.mean(vals)), float(np.std(vals))) if len(vals) else (float("nan"),) * 2
    return out
