"""Kinematic model of a robot with independently steered and driven front and
rear wheels, its RK4 discretization, the exact Jacobians of that discrete
step, and the linearized wheel-speed (non-slip) constraint.

State is ``(X, Y, psi)``; input is ``(v_f, v_r, delta_f, delta_r)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .angles import wrap_angle
from .errors import DegenerateSideslip, SteeringOutOfRange

HALF_PI = 0.5 * np.pi


@dataclass(frozen=True)
class RobotState:
    X: float
    Y: float
    psi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.psi])

    @classmethod
    def from_array(cls, a) -> "RobotState":
        return cls(float(a[0]), float(a[1]), wrap_angle(a[2]))


@dataclass(frozen=True)
class ControlInput:
    v_f: float
    v_r: float
    delta_f: float
    delta_r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v_f, self.v_r, self.delta_f, self.delta_r])

    @classmethod
    def from_array(cls, a) -> "ControlInput":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class RobotGeometry:
    l_f: float = 1.2
    l_r: float = 1.2
    half_width: float = 0.55

    def __post_init__(self):
        if self.l_f <= 0 or self.l_r <= 0 or self.half_width <= 0:
            raise ValueError("robot dimensions must be positive")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r


@dataclass(frozen=True)
class LinearizedModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    d: np.ndarray


def _check_steer(delta_f, delta_r):
    if abs(delta_f) >= HALF_PI or abs(delta_r) >= HALF_PI:
        raise SteeringOutOfRange(f"steering ({delta_f:.4f}, {delta_r:.4f}) outside (-pi/2, pi/2)")


def sideslip(delta_f: float, delta_r: float, geom: RobotGeometry) -> float:
    """Side-slip angle of the centre of gravity."""
    _check_steer(delta_f, delta_r)
    return float(np.arctan((geom.l_r * np.tan(delta_f) + geom.l_f * np.tan(delta_r)) / geom.wheelbase))


def _input_terms(u, geom):
    """beta, v_c, yaw rate and their gradients with respect to u."""
    v_f, v_r, df, dr = u
    _check_steer(df, dr)
    L = geom.wheelbase
    tf, tr = np.tan(df), np.tan(dr)
    T = (geom.l_r * tf + geom.l_f * tr) / L
    beta = np.arctan(T)
    cb = np.cos(beta)
    if abs(cb) <= 1e-9:
        raise DegenerateSideslip("cos(beta) vanished")
    cf, cr, sf, sr = np.cos(df), np.cos(dr), np.sin(df), np.sin(dr)
    num = v_f * cf + v_r * cr
    v_c = num / (2.0 * cb)
    r = (v_f * sf - v_r * sr) / L

    dT = 1.0 / (1.0 + T * T)
    dbeta = np.array([0.0, 0.0, dT * geom.l_r / (cf * cf * L), dT * geom.l_f / (cr * cr * L)])
    dnum = np.array([cf, cr, -v_f * sf, -v_r * sr])
    dvc = dnum / (2.0 * cb) + num * np.sin(beta) / (2.0 * cb * cb) * dbeta
    dr_ = np.array([sf, -sr, v_f * cf, -v_r * cr]) / L
    return beta, v_c, r, dbeta, dvc, dr_


def state_derivative(state, u, geom: RobotGeometry) -> np.ndarray:
    beta, v_c, r, *_ = _input_terms(np.asarray(u, dtype=float), geom)
    psi = state[2]
    return np.array([v_c * np.cos(psi + beta), v_c * np.sin(psi + beta), r])


def _rk4(state, u, geom, dt, with_jacobian):
    beta, v_c, r, dbeta, dvc, dr = _input_terms(u, geom)

    def f(z):
        a = z[2] + beta
        return np.array([v_c * np.cos(a), v_c * np.sin(a), r])

    def f_jac(z):
        a = z[2] + beta
        ca, sa = np.cos(a), np.sin(a)
        fz = np.zeros((3, 3))
        fz[0, 2] = -v_c * sa
        fz[1, 2] = v_c * ca
        fu = np.vstack([ca * dvc - v_c * sa * dbeta, sa * dvc + v_c * ca * dbeta, dr])
        return fz, fu

    z0 = np.asarray(state, dtype=float)
    coef = (0.0, 0.5 * dt, 0.5 * dt, dt)
    ks, dks_z, dks_u = [], [], []
    k_prev = np.zeros(3)
    dz_prev = np.zeros((3, 3))
    du_prev = np.zeros((3, 4))
    for c in coef:
        zi = z0 + c * k_prev
        k = f(zi)
        if with_jacobian:
            fz, fu = f_jac(zi)
            dzi_z = np.eye(3) + c * dz_prev
            dzi_u = c * du_prev
            dz_prev = fz @ dzi_z
            du_prev = fz @ dzi_u + fu
            dks_z.append(dz_prev)
            dks_u.append(du_prev)
        ks.append(k)
        k_prev = k
    w = (1.0, 2.0, 2.0, 1.0)
    z1 = z0 + dt / 6.0 * sum(wi * ki for wi, ki in zip(w, ks))
    if not with_jacobian:
        return z1, None, None
    A = np.eye(3) + dt / 6.0 * sum(wi * m for wi, m in zip(w, dks_z))
    B = dt / 6.0 * sum(wi * m for wi, m in zip(w, dks_u))
    return z1, A, B


def step_array(state, u, geom: RobotGeometry, dt: float) -> np.ndarray:
    """One RK4 step on raw arrays; psi is not wrapped."""
    z1, _, _ = _rk4(np.asarray(state, dtype=float), np.asarray(u, dtype=float), geom, dt, False)
    return z1


def step(state: RobotState, u: ControlInput, geom: RobotGeometry, dt: float) -> RobotState:
    """Advance the robot by ``dt`` seconds under constant input ``u`` (RK4)."""
    return RobotState.from_array(step_array(state.as_array(), u.as_array(), geom, dt))


def linearize(state0, u0, geom: RobotGeometry, dt: float) -> LinearizedModel:
    """Affine model ``x+ = A x + B u + d`` of the discrete step, exact at (state0, u0)."""
    z0 = state0.as_array() if isinstance(state0, RobotState) else np.asarray(state0, dtype=float)
    uu = u0.as_array() if isinstance(u0, ControlInput) else np.asarray(u0, dtype=float)
    z1, A, B = _rk4(z0, uu, geom, dt, True)
    d = z1 - A @ z0 - B @ uu
    return LinearizedModel(A, B, np.eye(3), d)


def nonslip_value(u) -> float:
    """Signed wheel-speed mismatch ``v_f cos(delta_f) - v_r cos(delta_r)``."""
    u = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    return float(u[0] * np.cos(u[2]) - u[1] * np.cos(u[3]))


def nonslip_terms(u0) -> tuple[np.ndarray, float]:
    """Gradient ``E`` and offset ``g0`` so that ``E u + g0`` linearizes the mismatch at u0."""
    u = u0.as_array() if isinstance(u0, ControlInput) else np.asarray(u0, dtype=float)
    v_f, v_r, df, dr = u
    E = np.array([np.cos(df), -np.cos(dr), -v_f * np.sin(df), v_r * np.sin(dr)])
    g0 = nonslip_value(u) - float(E @ u)
    return E, g0


def footprint_distance(state, geom: RobotGeometry, points) -> np.ndarray:
    """Euclidean distance from the robot's rectangular footprint to points (..., 2); 0 inside.

    The footprint spans ``[-l_r, l_f]`` along the body axis and ``+-half_width`` across it.
    """
    z = state.as_array() if isinstance(state, RobotState) else np.asarray(state, dtype=float)
    p = np.asarray(points, dtype=float)
    c, s = np.cos(z[2]), np.sin(z[2])
    dx, dy = p[..., 0] - z[0], p[..., 1] - z[1]
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    ex = np.maximum(np.maximum(lx - geom.l_f, -geom.l_r - lx), 0.0)
    ey = np.maximum(np.abs(ly) - geom.half_width, 0.0)
    return np.hypot(ex, ey)
