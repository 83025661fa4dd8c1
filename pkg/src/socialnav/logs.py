"""CSV episode logs and their reader.

Files written to a log directory:

* ``episode.csv``: key,value metadata (scenario, seed, Ts, goal, robot geometry)
* ``truth.csv``: t,kind,id,x,y,heading (kind is ``robot`` or ``pedestrian``)
* ``perception.csv``: delivered_at,stamp,node_id,x,y,yaw (fused detections as delivered)
* ``tracks.csv``: t,track_id,x,y,yaw,speed,omega (confirmed tracks reported to the planner)
* ``plan.csv``: t,X,Y,psi,v_f,v_r,delta_f,delta_r,qp_status,J1,J2,J3,iterations,min_predicted_clearance
* ``timing.csv``: t,solve_time_ms (wall clock, so excluded from reproducibility checks)
* ``metrics.csv``: key,value for every MetricsReport field
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .metrics import MetricsReport
from .simulation import CycleRecord, EpisodeLog
from .tracking_fusion import HUMAN, FusedObject
from .vehicle_model import RobotGeometry

DETERMINISTIC_FILES = ("episode.csv", "truth.csv", "perception.csv", "tracks.csv", "plan.csv",
                       "metrics.csv")


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def write_episode(log: EpisodeLog, out_dir, geom: RobotGeometry,
                  metrics: MetricsReport | None = None) -> Path:
    """Write all CSV logs of an episode to ``out_dir`` (created if missing)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = [("scenario", log.scenario), ("seed", log.seed), ("Ts", log.Ts),
            ("goal_reached", log.goal_reached), ("goal_time", log.goal_time),
            ("l_f", geom.l_f), ("l_r", geom.l_r), ("half_width", geom.half_width)]
    _write(out / "episode.csv", ("key", "value"), meta)

    truth = []
    for c in log.cycles:
        truth.append((c.t, "robot", 0, c.robot[0], c.robot[1], c.robot[2]))
        for i, p in enumerate(c.pedestrians):
            truth.append((c.t, "pedestrian", i, p[0], p[1], p[2]))
    _write(out / "truth.csv", ("t", "kind", "id", "x", "y", "heading"), truth)

    _write(out / "perception.csv", ("delivered_at", "stamp", "node_id", "x", "y", "yaw"),
           log.perception)

    tracks = [(c.t, t.track_id, t.position[0], t.position[1], t.yaw, t.speed, t.omega)
              for c in log.cycles for t in c.tracks]
    _write(out / "tracks.csv", ("t", "track_id", "x", "y", "yaw", "speed", "omega"), tracks)

    plan, timing = [], []
    for c in log.cycles:
        p = c.plan
        plan.append((c.t, *c.robot, *c.u, p.qp_status, *p.cost_breakdown, p.iterations,
                     p.min_predicted_clearance))
        timing.append((c.t, 1e3 * p.solve_time))
    _write(out / "plan.csv", ("t", "X", "Y", "psi", "v_f", "v_r", "delta_f", "delta_r",
                              "qp_status", "J1", "J2", "J3", "iterations",
                              "min_predicted_clearance"), plan)
    _write(out / "timing.csv", ("t", "solve_time_ms"), timing)
    if metrics is not None:
        write_metrics(metrics, out / "metrics.csv")
    return out


def write_metrics(m: MetricsReport, path) -> None:
    _write(Path(path), ("key", "value"), m.as_dict().items())


def _rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _float(s: str):
    return None if s == "" else float(s)


def read_episode(log_dir) -> tuple[EpisodeLog, RobotGeometry]:
    """Rebuild the parts of an EpisodeLog that metrics need from a log directory."""
    d = Path(log_dir)
    meta = {r["key"]: r["value"] for r in _rows(d / "episode.csv")}
    geom = RobotGeometry(float(meta["l_f"]), float(meta["l_r"]), float(meta["half_width"]))
    log = EpisodeLog(meta["scenario"], int(meta["seed"]), float(meta["Ts"]))
    log.goal_reached = meta["goal_reached"] == "true"
    log.goal_time = _float(meta["goal_time"])

    robot: dict[str, np.ndarray] = {}
    peds: dict[str, list] = {}
    order: list[str] = []
    for r in _rows(d / "truth.csv"):
        t = r["t"]
        xyz = np.array([float(r["x"]), float(r["y"]), float(r["heading"])])
        if r["kind"] == "robot":
            robot[t] = xyz
            order.append(t)
            peds.setdefault(t, [])
        else:
            peds.setdefault(t, []).append(xyz)
    tracks: dict[str, list] = {}
    for r in _rows(d / "tracks.csv"):
        tracks.setdefault(r["t"], []).append(FusedObject(
            int(r["track_id"]), HUMAN, np.array([float(r["x"]), float(r["y"])]),
            float(r["yaw"]), float(r["speed"]), float(r["omega"]), float(r["t"]),
            np.zeros((0, 3))))
    plans = {r["t"]: r for r in _rows(d / "plan.csv")}
    for t in order:
        p = plans.get(t)
        u = np.array([float(p[k]) for k in ("v_f", "v_r", "delta_f", "delta_r")]) if p else np.zeros(4)
        ped = np.array(peds[t]).reshape(-1, 3)
        log.cycles.append(CycleRecord(float(t), robot[t], u, ped, tracks.get(t, []), None,
                                      float("nan")))
    return log, geom
