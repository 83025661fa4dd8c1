from __future__ import annotations

import numpy as np
import pytest

from socialnav.camera_geometry import ProjectionMatrix
from socialnav.scenario import load_scenario, shipped_scenarios_dir


def random_camera(rng: np.random.Generator) -> ProjectionMatrix:
    """A ceiling-style camera looking down at a random floor point."""
    pos = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(2.5, 4.0)])
    target = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), 0.0])
    H = ProjectionMatrix.look_at(pos, target, rng.uniform(500, 1500), 960.0, 720.0)
    # arbitrary overall scale; H is only defined up to one
    return ProjectionMatrix(H.h * rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0]))


def random_visible_point(rng: np.random.Generator, H: ProjectionMatrix) -> np.ndarray:
    """A world point in front of the camera at person height."""
    h = H.h
    centre = -np.linalg.solve(h[:, :3], h[:, 3])
    while True:
        p = np.array([rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(0.0, 1.9)])
        if np.linalg.norm(p[:2] - centre[:2]) > 0.5:
            return p


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def scenario_path():
    def get(name: str):
        return shipped_scenarios_dir() / f"{name}.toml"
    return get


@pytest.fixture(scope="session")
def scenario(scenario_path):
    def get(name: str):
        return load_scenario(scenario_path(name))
    return get


def straight_reference(length: float = 40.0, v: float = 0.7):
    from socialnav.mpc_planner import Reference
    xs = np.arange(0.0, length + 1e-9, 0.1)
    return Reference(np.column_stack([xs, np.zeros_like(xs), np.zeros_like(xs)]), (v, v))


def closed_loop(planner, state, u, ref, cycles: int, humans=None):
    """Drive the nonlinear model with the planner; returns per-cycle (state, u, plan)."""
    from socialnav.vehicle_model import step
    out = []
    for k in range(cycles):
        h = humans(k) if callable(humans) else (humans or [])
        plan = planner.plan_step(state, u, ref, h)
        u_prev, u = u, plan.u0
        state = step(state, u, planner.geom, planner.params.Ts)
        out.append((state, u, u_prev, plan))
    return out


def standing_pedestrian_clearance(ps_weight: float, offset: float = 0.0, cycles: int = 300) -> tuple[float, list]:
    """Min border clearance to a pedestrian standing on the path and facing the robot."""
    from socialnav.mpc_planner import MpcParams, MpcPlanner
    from socialnav.vehicle_model import ControlInput, RobotState, footprint_distance
    planner = MpcPlanner(MpcParams(ps_weight=ps_weight))
    ped = np.array([10.0, offset, np.pi])
    traj = np.tile(ped, (planner.params.Np, 1))
    rows = closed_loop(planner, RobotState(0.0, 0.0, 0.0), ControlInput(0.7, 0.7, 0.0, 0.0),
                       straight_reference(30.0), cycles, [traj])
    clear = min(float(footprint_distance(s, planner.geom, ped[None, :2])[0]) for s, *_ in rows) - 0.25
    return clear, rows
