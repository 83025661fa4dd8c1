"""Deterministic closed-loop simulation: scripted pedestrians, synthetic sensor
nodes with noise and latency, node-local pose estimation, central fusion and
tracking, planning, and the robot's kinematics.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .camera_geometry import PixelHeightNoise, project
from .mpc_planner import MpcPlanner, PlanResult
from .pose_estimation import (
    LidarJointMeasurement,
    default_skeleton,
    heading_from_pose,
    pose_center,
    pose_prior_from_keypoints,
    posed_joints,
    refine_pose,
)
from .scenario import NodeConfig, ScenarioConfig
from .tracking_fusion import (
    Detection,
    FusedObject,
    NodeReport,
    PersonReport,
    Tracker,
    fuse_node_reports,
)
from .vehicle_model import footprint_distance, step

logger = logging.getLogger(__name__)

WAYPOINT_TOL = 0.1
PEDESTRIAN_RADIUS = 0.25
# Offsets for deriving independent generators from the scenario seed.
PED_STREAM = 0
NODE_STREAM = 1000
TIME_EPS = 1e-9


@dataclass(frozen=True)
class Pedestrian:
    x: float
    y: float
    heading: float
    speed: float
    stature: float
    waypoints: tuple[tuple[float, float], ...]
    next_wp: int = 0
    wait: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def done(self) -> bool:
        return self.next_wp >= len(self.waypoints)

    @property
    def velocity(self) -> np.ndarray:
        if self.done or self.wait > 0:
            return np.zeros(2)
        return self.speed * np.array([np.cos(self.heading), np.sin(self.heading)])


def make_pedestrians(cfg: ScenarioConfig, rng: np.random.Generator) -> list[Pedestrian]:
    """Initial pedestrians with the scenario's per-seed position and speed jitter."""
    out = []
    pj, sj = cfg.perception.position_jitter, cfg.perception.speed_jitter
    for p in cfg.pedestrians:
        x, y = p.position
        dx, dy = rng.uniform(-pj, pj, 2) if pj > 0 else (0.0, 0.0)
        speed = p.speed * (1.0 + (rng.uniform(-sj, sj) if sj > 0 else 0.0))
        x, y = x + dx, y + dy
        heading = 0.0
        if p.waypoints:
            wx, wy = p.waypoints[0]
            if np.hypot(wx - x, wy - y) > 1e-9:
                heading = float(np.arctan2(wy - y, wx - x))
        out.append(Pedestrian(float(x), float(y), heading, float(speed), p.stature,
                              p.waypoints, 0, p.start_delay))
    return out


def step_pedestrians(peds: list[Pedestrian], dt: float) -> list[Pedestrian]:
    """Advance every pedestrian toward its current waypoint by ``speed * dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = []
    for p in peds:
        if p.wait > 0:
            out.append(replace(p, wait=max(0.0, p.wait - dt)))
            continue
        if p.done:
            out.append(p)
            continue
        wx, wy = p.waypoints[p.next_wp]
        dx, dy = wx - p.x, wy - p.y
        dist = float(np.hypot(dx, dy))
        heading = p.heading
        x, y = p.x, p.y
        if dist > 1e-12:
            heading = float(np.arctan2(dy, dx))
            move = min(p.speed * dt, dist)
            x += move * dx / dist
            y += move * dy / dist
        nxt = p.next_wp
        if np.hypot(wx - x, wy - y) <= WAYPOINT_TOL:
            nxt += 1
        out.append(replace(p, x=x, y=y, heading=heading, next_wp=nxt))
    return out


@dataclass(frozen=True)
class PersonObservation:
    """Raw sensor data for one person from one node; ``truth_index`` is for evaluation only."""

    truth_index: int
    keypoints: tuple[tuple[int, np.ndarray], ...]  # (camera index, (17, 2) pixels)
    lidar: tuple[LidarJointMeasurement, ...]


@dataclass(frozen=True)
class NodeObservation:
    node_id: int
    stamp: float
    persons: tuple[PersonObservation, ...]


def in_view(joints: np.ndarray, cam) -> tuple[bool, np.ndarray]:
    """Whether all joints project in front of the camera and inside the image."""
    pix, s = project(joints, cam.H)
    ok = bool(np.all(s > 0) and np.all(pix[:, 0] >= 0) and np.all(pix[:, 0] < cam.width)
              and np.all(pix[:, 1] >= 0) and np.all(pix[:, 1] < cam.height))
    return ok, pix


def synthesize_observations(peds: list[Pedestrian], node: NodeConfig, stamp: float,
                            rng: np.random.Generator, skeleton=None,
                            lidar_enabled: bool = True) -> NodeObservation:
    """Noisy keypoints per camera and noisy LiDAR joint fixes for each visible pedestrian."""
    skeleton = skeleton or default_skeleton()
    lidar_idx = [skeleton.index(n) for n in node.lidar_joints]
    persons = []
    for i, p in enumerate(peds):
        joints = posed_joints(p.x, p.y, p.heading, p.stature)
        kps = []
        for ci, cam in enumerate(node.cameras):
            ok, pix = in_view(joints, cam)
            if not ok:
                continue
            kps.append((ci, pix + rng.normal(0.0, node.pixel_sigma, pix.shape)))
        if not kps:
            continue
        lidar = ()
        if node.lidar and lidar_enabled:
            cov = node.lidar_sigma**2 * np.eye(3)
            noise = rng.normal(0.0, node.lidar_sigma, (len(lidar_idx), 3))
            lidar = tuple(LidarJointMeasurement(j, joints[j] + e, cov)
                          for j, e in zip(lidar_idx, noise))
        persons.append(PersonObservation(i, tuple(kps), lidar))
    return NodeObservation(node.id, stamp, tuple(persons))


def node_local_report(obs: NodeObservation, node: NodeConfig, stature_prior, sigma_zw: float,
                      skeleton) -> NodeReport:
    """What a sensor node computes on board: priors, refined pose, position and heading."""
    noise = PixelHeightNoise(node.pixel_sigma, node.pixel_sigma, sigma_zw)
    persons = []
    for po in obs.persons:
        priors = tuple(pose_prior_from_keypoints(kp, stature_prior, node.cameras[ci].H, noise,
                                                 skeleton, node.id, obs.stamp)
                       for ci, kp in po.keypoints)
        pose = refine_pose(list(priors), skeleton, po.lidar)
        persons.append(PersonReport(priors, po.lidar, pose, pose_center(pose.joints, skeleton),
                                    heading_from_pose(pose, skeleton)))
    return NodeReport(obs.node_id, obs.stamp, tuple(persons))


@dataclass(order=True)
class _Queued:
    deliver_at: float
    node_id: int
    seq: int
    item: object = field(compare=False)


class DeliveryQueue:
    """Messages become visible at ``stamp + fixed + U(0, jitter)``."""

    def __init__(self):
        self._heap: list[_Queued] = []
        self._seq = 0

    def __len__(self):
        return len(self._heap)

    def push(self, deliver_at: float, node_id: int, item) -> None:
        heapq.heappush(self._heap, _Queued(deliver_at, node_id, self._seq, item))
        self._seq += 1

    def pop_ready(self, now: float) -> list:
        out = []
        while self._heap and self._heap[0].deliver_at <= now + TIME_EPS:
            out.append(heapq.heappop(self._heap).item)
        return out


def sample_delay(node: NodeConfig, rng: np.random.Generator) -> float:
    jitter = rng.uniform(0.0, node.jitter_ms) if node.jitter_ms > 0 else 0.0
    return 1e-3 * (node.latency_ms + jitter)


def inject_latency(items, stamp: float, node: NodeConfig, rng: np.random.Generator,
                   queue: DeliveryQueue | None = None) -> DeliveryQueue:
    """Queue ``items`` (one message each) for delivery after the node's latency."""
    queue = queue if queue is not None else DeliveryQueue()
    for it in items:
        queue.push(stamp + sample_delay(node, rng), node.id, it)
    return queue


@dataclass
class CycleRecord:
    t: float
    robot: np.ndarray  # (X, Y, psi)
    u: np.ndarray  # applied input
    pedestrians: np.ndarray  # (n, 3) x, y, heading
    tracks: list[FusedObject]
    plan: PlanResult | None
    clearance: float


@dataclass
class EpisodeLog:
    scenario: str
    seed: int
    Ts: float
    cycles: list[CycleRecord] = field(default_factory=list)
    perception: list[tuple] = field(default_factory=list)  # (delivered_at, stamp, node, x, y, yaw)
    goal_reached: bool = False
    goal_time: float | None = None


def _node_rngs(cfg: ScenarioConfig) -> dict[int, np.random.Generator]:
    return {n.id: np.random.default_rng([cfg.seed, NODE_STREAM + n.id]) for n in cfg.nodes}


class PerceptionPipeline:
    """Sensor nodes plus central fusion/tracking, advanced once per cycle."""

    def __init__(self, cfg: ScenarioConfig, nodes=None, cooperative: bool = True,
                 lidar_enabled: bool = True):
        self.cfg = cfg
        self.nodes = tuple(cfg.nodes if nodes is None else nodes)
        self.cooperative = cooperative
        self.lidar_enabled = lidar_enabled
        self.skeleton = default_skeleton(cfg.perception.stature_prior[0], cfg.perception.bone_sigma)
        self.rngs = _node_rngs(cfg)
        self.queue = DeliveryQueue()
        self.tracker = Tracker(cfg.fusion)

    def capture(self, peds: list[Pedestrian], t: float) -> None:
        """Sense, run node-local estimation and queue each node's report."""
        for node in sorted(self.nodes, key=lambda n: n.id):
            rng = self.rngs[node.id]
            obs = synthesize_observations(peds, node, t, rng, self.skeleton, self.lidar_enabled)
            if not obs.persons:
                continue
            report = node_local_report(obs, node, self.cfg.perception.stature_prior,
                                       self.cfg.perception.sigma_zw, self.skeleton)
            inject_latency([report], t, node, rng, self.queue)

    def deliver(self, t: float) -> list[Detection]:
        reports = self.queue.pop_ready(t)
        return fuse_node_reports(reports, self.skeleton, self.cfg.fusion.gate_distance,
                                 self.cooperative)

    def update(self, detections: list[Detection], t: float, horizon: int) -> list[FusedObject]:
        return self.tracker.fuse_step(detections, t, horizon, self.cfg.Ts)


def robot_clearance(robot: np.ndarray, peds: list[Pedestrian], geom) -> float:
    if not peds:
        return float("inf")
    pts = np.array([[p.x, p.y] for p in peds])
    return float(np.min(footprint_distance(robot, geom, pts))) - PEDESTRIAN_RADIUS


def run_episode(cfg: ScenarioConfig, planner: MpcPlanner | None = None,
                nodes=None, lidar_enabled: bool = True) -> EpisodeLog:
    """Close the sense, fuse, plan, act loop at ``Ts`` until the goal or the time limit."""
    Ts = cfg.Ts
    planner = planner or MpcPlanner(cfg.mpc, cfg.geometry, cfg.ps)
    planner.reset()
    ref = cfg.reference
    goal = ref.goal
    peds = make_pedestrians(cfg, np.random.default_rng([cfg.seed, PED_STREAM]))
    perception = PerceptionPipeline(cfg, nodes, lidar_enabled=lidar_enabled)
    state = cfg.initial_state
    u = cfg.initial_input
    log = EpisodeLog(cfg.name, cfg.seed, Ts)
    n_cycles = int(round(cfg.duration / Ts))
    for k in range(n_cycles):
        t = k * Ts
        if k > 0:
            peds = step_pedestrians(peds, Ts)
        perception.capture(peds, t)
        dets = perception.deliver(t)
        for d in dets:
            log.perception.append((t, d.timestamp, d.node_id, float(d.position[0]),
                                   float(d.position[1]), d.yaw))
        tracks = perception.update(dets, t, cfg.mpc.Np)
        plan = planner.plan_step(state, u, ref, tracks)
        u = plan.u0
        truth = np.array([[p.x, p.y, p.heading] for p in peds]).reshape(-1, 3)
        z = state.as_array()
        log.cycles.append(CycleRecord(t, z, u.as_array(), truth, tracks, plan,
                                      robot_clearance(z, peds, cfg.geometry)))
        state = step(state, u, cfg.geometry, Ts)
        if np.hypot(state.X - goal[0], state.Y - goal[1]) <= cfg.goal_tolerance:
            log.goal_reached = True
            log.goal_time = round((k + 1) * Ts, 9)
            break
    return log
