"""Scenario files: TOML documents describing the world, robot, pedestrians and sensor nodes.

Schema (all lengths in meters, times in seconds unless the key says ``_ms``)::

    [scenario]      name, seed, duration
    [world]         path = [[x, y], ...] corner points, goal_tolerance, v_ref = [v_f, v_r],
                    path_resolution (optional, default 0.1)
    [robot]         initial_state = [X, Y, psi], initial_input = [v_f, v_r, d_f, d_r],
                    l_f, l_r, half_width
    [mpc]           any MpcParams field; matrices as 3x3 / 2x2 nested lists or diagonals
    [ps]            sigma_yy, k, weight
    [fusion]        any FusionConfig field
    [perception]    stature_prior = [mean, std], bone_sigma, sigma_zw, position_jitter, speed_jitter
    [[pedestrians]] position = [x, y], waypoints = [[x, y], ...], speed, stature, start_delay
    [[nodes]]       id, pixel_sigma, lidar, lidar_joints, lidar_sigma, latency_ms, jitter_ms
    [[nodes.cameras]] width, height and either matrix = [12 row-major numbers] or
                    position / target / focal_px (a look-at camera with the principal
                    point at the image centre)
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .camera_geometry import ProjectionMatrix
from .errors import ConfigError
from .mpc_planner import MpcParams, Reference
from .pose_estimation import COCO17
from .social_field import PsParams
from .tracking_fusion import FusionConfig
from .vehicle_model import ControlInput, RobotGeometry, RobotState

DEFAULT_LIDAR_JOINTS = ("left_shoulder", "right_shoulder", "left_hip", "right_hip")


@dataclass(frozen=True)
class CameraConfig:
    H: ProjectionMatrix
    width: int
    height: int


@dataclass(frozen=True)
class NodeConfig:
    id: int
    cameras: tuple[CameraConfig, ...]
    pixel_sigma: float = 2.0
    lidar: bool = True
    lidar_joints: tuple[str, ...] = DEFAULT_LIDAR_JOINTS
    lidar_sigma: float = 0.03
    latency_ms: float = 0.0
    jitter_ms: float = 0.0


@dataclass(frozen=True)
class PedestrianConfig:
    position: tuple[float, float]
    waypoints: tuple[tuple[float, float], ...]
    speed: float
    stature: float = 1.70
    start_delay: float = 0.0


@dataclass(frozen=True)
class PerceptionConfig:
    stature_prior: tuple[float, float] = (1.70, 0.07)
    bone_sigma: float = 0.05
    sigma_zw: float = 0.02
    position_jitter: float = 0.0
    speed_jitter: float = 0.0


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    duration: float
    path: np.ndarray  # dense (N, 3) reference poses
    v_ref: tuple[float, float]
    goal_tolerance: float
    initial_state: RobotState
    initial_input: ControlInput
    geometry: RobotGeometry
    mpc: MpcParams
    ps: PsParams
    fusion: FusionConfig
    perception: PerceptionConfig
    pedestrians: tuple[PedestrianConfig, ...]
    nodes: tuple[NodeConfig, ...]

    def __post_init__(self):
        validate(self)

    @property
    def Ts(self) -> float:
        return self.mpc.Ts

    @property
    def reference(self) -> Reference:
        return Reference(self.path, self.v_ref)

    def with_overrides(self, **kw) -> "ScenarioConfig":
        """Copy with top-level fields replaced and re-validated."""
        return replace(self, **kw)


def validate(cfg: ScenarioConfig) -> None:
    if cfg.duration <= 0:
        raise ConfigError("duration must be positive")
    if cfg.goal_tolerance <= 0:
        raise ConfigError("goal_tolerance must be positive")
    if len(cfg.path) == 0:
        raise ConfigError("reference path is empty")
    for i, p in enumerate(cfg.pedestrians):
        if p.speed <= 0:
            raise ConfigError(f"pedestrian {i}: speed must be positive")
        if p.stature <= 0:
            raise ConfigError(f"pedestrian {i}: stature must be positive")
        if p.start_delay < 0:
            raise ConfigError(f"pedestrian {i}: start_delay must be non-negative")
    ids = [n.id for n in cfg.nodes]
    if len(set(ids)) != len(ids):
        raise ConfigError("node ids must be unique")
    for n in cfg.nodes:
        if not n.cameras:
            raise ConfigError(f"node {n.id}: at least one camera is required")
        if n.pixel_sigma < 0 or n.lidar_sigma < 0:
            raise ConfigError(f"node {n.id}: noise levels must be non-negative")
        if n.latency_ms < 0 or n.jitter_ms < 0:
            raise ConfigError(f"node {n.id}: latency must be non-negative")
        bad = [j for j in n.lidar_joints if j not in COCO17]
        if bad:
            raise ConfigError(f"node {n.id}: unknown lidar joints {bad}")
    mean, std = cfg.perception.stature_prior
    if mean <= 0 or std < 0:
        raise ConfigError("stature_prior must be (positive mean, non-negative std)")


def densify_path(corners, resolution: float = 0.1) -> np.ndarray:
    """Poses every ``resolution`` meters along a polyline, heading along each segment."""
    pts = np.asarray(corners, dtype=float)
    if pts.ndim != 2 or pts.shape[1] < 2 or len(pts) == 0:
        raise ConfigError("path must be a list of [x, y] points")
    pts = pts[:, :2]
    if len(pts) == 1:
        return np.array([[pts[0, 0], pts[0, 1], 0.0]])
    out = []
    heading = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        seg = b - a
        L = float(np.hypot(*seg))
        if L < 1e-9:
            continue
        heading = float(np.arctan2(seg[1], seg[0]))
        n = max(1, int(np.ceil(L / resolution - 1e-9)))
        for t in np.arange(n) / n:
            out.append((a[0] + t * seg[0], a[1] + t * seg[1], heading))
    out.append((pts[-1, 0], pts[-1, 1], heading))
    return np.array(out)


def _matrix(value, n: int, name: str) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.shape == (n,):
        return np.diag(a)
    if a.shape == (n, n):
        return a
    raise ConfigError(f"{name} must be a length-{n} diagonal or {n}x{n} matrix")


def _known(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")


def _camera(d: dict) -> CameraConfig:
    try:
        width, height = int(d["width"]), int(d["height"])
        if "matrix" in d:
            vals = d["matrix"]
            if len(vals) != 12:
                raise ConfigError("camera matrix needs 12 row-major numbers")
            H = ProjectionMatrix.from_row_major(vals)
        else:
            H = ProjectionMatrix.look_at(d["position"], d["target"], float(d["focal_px"]),
                                         0.5 * width, 0.5 * height)
    except KeyError as e:
        raise ConfigError(f"camera is missing {e}") from None
    except ValueError as e:
        raise ConfigError(f"invalid camera: {e}") from None
    return CameraConfig(H, width, height)


def _node(d: dict) -> NodeConfig:
    _known(d, ("id", "cameras", "pixel_sigma", "lidar", "lidar_joints", "lidar_sigma",
               "latency_ms", "jitter_ms"), "nodes")
    if "id" not in d:
        raise ConfigError("node is missing id")
    cams = tuple(_camera(c) for c in d.get("cameras", []))
    return NodeConfig(
        id=int(d["id"]),
        cameras=cams,
        pixel_sigma=float(d.get("pixel_sigma", 2.0)),
        lidar=bool(d.get("lidar", True)),
        lidar_joints=tuple(d.get("lidar_joints", DEFAULT_LIDAR_JOINTS)),
        lidar_sigma=float(d.get("lidar_sigma", 0.03)),
        latency_ms=float(d.get("latency_ms", 0.0)),
        jitter_ms=float(d.get("jitter_ms", 0.0)),
    )


def _pedestrian(d: dict) -> PedestrianConfig:
    _known(d, ("position", "waypoints", "speed", "stature", "start_delay"), "pedestrians")
    try:
        pos = tuple(float(v) for v in d["position"])
        wps = tuple(tuple(float(v) for v in w) for w in d["waypoints"])
        speed = float(d["speed"])
    except KeyError as e:
        raise ConfigError(f"pedestrian is missing {e}") from None
    if len(pos) != 2 or any(len(w) != 2 for w in wps):
        raise ConfigError("pedestrian positions and waypoints are [x, y] pairs")
    return PedestrianConfig(pos, wps, speed, float(d.get("stature", 1.70)),
                            float(d.get("start_delay", 0.0)))


def _mpc(d: dict) -> MpcParams:
    names = {f.name for f in fields(MpcParams)}
    _known(d, names, "mpc")
    kw = {}
    for k, v in d.items():
        if k in ("Q",):
            kw[k] = _matrix(v, 3, k)
        elif k in ("R", "T"):
            kw[k] = _matrix(v, 2, k)
        elif k in ("u_min", "u_max", "du_min", "du_max"):
            a = np.asarray(v, dtype=float)
            if a.shape != (4,):
                raise ConfigError(f"{k} must have 4 entries")
            kw[k] = a
        elif k in ("Np", "Nc", "max_iter"):
            kw[k] = int(v)
        else:
            kw[k] = float(v)
    try:
        return MpcParams(**kw)
    except ValueError as e:
        raise ConfigError(f"invalid [mpc]: {e}") from None


def _dataclass_section(cls, d: dict, where: str):
    names = {f.name for f in fields(cls)}
    _known(d, names, where)
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{where}]: {e}") from None


def parse_scenario(doc: dict) -> ScenarioConfig:
    """Build a validated :class:`ScenarioConfig` from a parsed TOML document."""
    _known(doc, ("scenario", "world", "robot", "mpc", "ps", "fusion", "perception",
                 "pedestrians", "nodes"), "top level")
    sc = doc.get("scenario", {})
    world = doc.get("world")
    if world is None or "path" not in world:
        raise ConfigError("[world] with a path is required")
    _known(world, ("path", "goal_tolerance", "v_ref", "path_resolution"), "world")
    robot = doc.get("robot", {})
    _known(robot, ("initial_state", "initial_input", "l_f", "l_r", "half_width"), "robot")
    try:
        geom = RobotGeometry(float(robot.get("l_f", 1.2)), float(robot.get("l_r", 1.2)),
                             float(robot.get("half_width", 0.55)))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    path = densify_path(world["path"], float(world.get("path_resolution", 0.1)))
    init = robot.get("initial_state")
    state = RobotState(*(float(v) for v in init)) if init is not None else RobotState(*path[0])
    u0 = ControlInput(*(float(v) for v in robot.get("initial_input", (0.0, 0.0, 0.0, 0.0))))
    v_ref = tuple(float(v) for v in world.get("v_ref", (0.7, 0.7)))
    if len(v_ref) != 2:
        raise ConfigError("v_ref must be [v_f, v_r]")
    try:
        ps = PsParams(**doc.get("ps", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [ps]: {e}") from None
    return ScenarioConfig(
        name=str(sc.get("name", "scenario")),
        seed=int(sc.get("seed", 0)),
        duration=float(sc.get("duration", 60.0)),
        path=path,
        v_ref=v_ref,
        goal_tolerance=float(world.get("goal_tolerance", 0.3)),
        initial_state=state,
        initial_input=u0,
        geometry=geom,
        mpc=_mpc(doc.get("mpc", {})),
        ps=ps,
        fusion=_dataclass_section(FusionConfig, doc.get("fusion", {}), "fusion"),
        perception=_dataclass_section(PerceptionConfig, doc.get("perception", {}), "perception"),
        pedestrians=tuple(_pedestrian(p) for p in doc.get("pedestrians", [])),
        nodes=tuple(_node(n) for n in doc.get("nodes", [])),
    )


def load_scenario(path) -> ScenarioConfig:
    """Read and validate a scenario TOML file."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read scenario {path}: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed scenario {path}: {e}") from None
    return parse_scenario(doc)


def shipped_scenarios_dir() -> Path:
    """Directory holding the bundled hallway scenarios."""
    return Path(__file__).resolve().parent / "scenarios"
