"""Socially-aware MPC for the four-wheel-steered robot.

Each cycle the nonlinear model is linearized once at the current state and
previous input, states are eliminated over the prediction horizon, and the
resulting dense QP over stacked input increments is solved with OSQP. The
personal-space penalty of every tracked person enters through its local
quadratic model at the nominal (previous-input) robot rollout.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import osqp
from scipy import sparse

from .angles import wrap_angle
from .social_field import PsParams, ps_quadratic_batch, ps_value_batch
from .tracking_fusion import cvtr_trajectory
from .vehicle_model import (
    ControlInput,
    RobotGeometry,
    RobotState,
    footprint_distance,
    linearize,
    nonslip_terms,
    step_array,
)

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

KKT_TOL = 1e-6
# Field terms beyond this Mahalanobis radius (w.r.t. the wider front Gaussian) are dropped.
PS_CUTOFF = 6.0
STEER_MARGIN = 1e-6
PEDESTRIAN_RADIUS = 0.25


def _default_u_max():
    return np.array([0.7, 0.7, np.pi / 2, np.pi / 2])


def _default_du_max():
    return np.array([1.0, 1.0, np.pi / 24, np.pi / 24])


@dataclass
class MpcParams:
    """Horizon, weights and bounds. Rate bounds are per second."""

    Np: int = 20
    Nc: int = 10
    Ts: float = 0.1
    Q: np.ndarray = field(default_factory=lambda: np.diag([10.0, 10.0, 1.0]))
    R: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0]))
    T: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0]))
    u_min: np.ndarray = field(default_factory=lambda: -_default_u_max())
    u_max: np.ndarray = field(default_factory=_default_u_max)
    du_min: np.ndarray = field(default_factory=lambda: -_default_du_max())
    du_max: np.ndarray = field(default_factory=_default_du_max)
    ps_weight: float = 20.0
    nonslip_bound: float = 0.1
    max_iter: int = 20000

    def __post_init__(self):
        for name in ("Q", "R", "T", "u_min", "u_max", "du_min", "du_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.Np >= self.Nc >= 1):
            raise ValueError("need Np >= Nc >= 1")
        if self.Ts <= 0:
            raise ValueError("Ts must be positive")
        for name, shape in (("Q", (3, 3)), ("R", (2, 2)), ("T", (2, 2))):
            m = getattr(self, name)
            if m.shape != shape or np.min(np.linalg.eigvalsh(0.5 * (m + m.T))) < -1e-12:
                raise ValueError(f"{name} must be a PSD {shape} matrix")
        if np.any(self.u_min > self.u_max) or np.any(self.du_min > self.du_max):
            raise ValueError("bounds are not ordered")
        if self.ps_weight < 0:
            raise ValueError("ps_weight must be non-negative")

    @property
    def u_weight(self) -> np.ndarray:
        """Weight on (v_f, v_r, delta_f, delta_r) deviations in the input cost."""
        W = np.zeros((4, 4))
        W[:2, :2] = self.T
        W[2:, 2:] = self.R
        return W


@dataclass
class Reference:
    """Reference poses (N, 3) and wheel-speed reference (v_f_ref, v_r_ref)."""

    path: np.ndarray
    v_ref: tuple[float, float]

    def __post_init__(self):
        self.path = np.asarray(self.path, dtype=float).reshape(-1, 3)
        if len(self.path) == 0:
            raise ValueError("reference path is empty")
        seg = np.diff(self.path[:, :2], axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(self.seg_len > 1.0 + 1e-9):
            raise ValueError("consecutive reference poses must be within 1 m")
        self.arc = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.psi_unwrapped = np.unwrap(self.path[:, 2])

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    @property
    def goal(self) -> np.ndarray:
        return self.path[-1]

    def project(self, xy) -> float:
        """Arc length of the orthogonal projection of ``xy`` onto the path."""
        if len(self.path) == 1:
            return 0.0
        p = np.asarray(xy, dtype=float)[:2]
        a = self.path[:-1, :2]
        d = np.diff(self.path[:, :2], axis=0)
        L2 = np.maximum(self.seg_len**2, 1e-18)
        t = np.clip(np.einsum("ij,ij->i", p - a, d) / L2, 0.0, 1.0)
        proj = a + t[:, None] * d
        dist2 = np.sum((proj - p) ** 2, axis=1)
        k = int(np.argmin(dist2))
        return float(self.arc[k] + t[k] * self.seg_len[k])

    def interpolate(self, s) -> np.ndarray:
        """Poses at arc lengths ``s`` (clamped to the path)."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        x = np.interp(s, self.arc, self.path[:, 0])
        y = np.interp(s, self.arc, self.path[:, 1])
        psi = np.interp(s, self.arc, self.psi_unwrapped)
        return np.column_stack([x, y, wrap_angle(psi)])


@dataclass
class QP:
    P: np.ndarray
    q: np.ndarray
    M: np.ndarray
    l: np.ndarray
    u: np.ndarray
    # affine state prediction: states[k] = c[k] + S[k] z, k = 0..Np
    c: np.ndarray = None
    S: np.ndarray = None


@dataclass(eq=False)
class PlanResult:
    u0: ControlInput
    predicted_states: np.ndarray  # (Np + 1, 3)
    qp_status: str
    solve_time: float = field(compare=False)
    cost_breakdown: tuple[float, float, float] = (0.0, 0.0, 0.0)
    iterations: int = 0
    z: np.ndarray | None = field(default=None, repr=False)
    min_predicted_clearance: float = float("inf")

    def __eq__(self, other):
        if not isinstance(other, PlanResult):
            return NotImplemented
        return (self.u0 == other.u0 and self.qp_status == other.qp_status
                and self.cost_breakdown == other.cost_breakdown
                and self.iterations == other.iterations
                and np.array_equal(self.predicted_states, other.predicted_states)
                and _same_array(self.z, other.z)
                and self.min_predicted_clearance == other.min_predicted_clearance)

    def states(self) -> list[RobotState]:
        return [RobotState.from_array(z) for z in self.predicted_states]


def _same_array(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return np.array_equal(a, b)


def reference_window(ref: Reference, state: RobotState, params: MpcParams) -> np.ndarray:
    """``Np`` reference poses ahead of the robot's projection on the path."""
    s0 = ref.project((state.X, state.Y))
    v_c = 0.5 * (ref.v_ref[0] + ref.v_ref[1])
    s = s0 + v_c * params.Ts * np.arange(1, params.Np + 1)
    return ref.interpolate(s)


def reference_speeds(ref: Reference, state: RobotState, params: MpcParams) -> np.ndarray:
    """(Np, 2) wheel-speed references; zero for steps whose window pose is clamped at the path end."""
    s0 = ref.project((state.X, state.Y))
    v_c = 0.5 * (ref.v_ref[0] + ref.v_ref[1])
    s = s0 + v_c * params.Ts * np.arange(1, params.Np + 1)
    moving = (s < ref.length)[:, None]
    return np.where(moving, np.asarray(ref.v_ref, dtype=float)[None, :], 0.0)


def _input_reference(v_ref, Np: int) -> np.ndarray:
    v = np.asarray(v_ref, dtype=float)
    v = np.broadcast_to(v, (Np, 2)) if v.shape == (2,) else v.reshape(Np, 2)
    return np.column_stack([v, np.zeros((Np, 2))])


def _steer_bounds(params: MpcParams):
    u_min = params.u_min.copy()
    u_max = params.u_max.copy()
    lim = np.pi / 2 - STEER_MARGIN
    u_min[2:] = np.maximum(u_min[2:], -lim)
    u_max[2:] = np.minimum(u_max[2:], lim)
    return u_min, u_max


def _input_map(params: MpcParams) -> np.ndarray:
    """(Np, 4, 4 Nc) maps z -> u_j - u_prev; inputs beyond Nc hold the last increment sum."""
    Np, Nc = params.Np, params.Nc
    Tm = np.zeros((Np, 4, 4 * Nc))
    for j in range(Np):
        for i in range(min(j, Nc - 1) + 1):
            Tm[j, :, 4 * i:4 * i + 4] = np.eye(4)
    return Tm


def _sample_offsets(geom: RobotGeometry) -> np.ndarray:
    return np.array([0.0, 0.5 * geom.l_f, -0.5 * geom.l_r])


def _human_arrays(humans, Np: int, Ts: float) -> np.ndarray:
    """Stack per-human predictions into (Np, H, 3) rows of (x, y, theta) at t + k Ts."""
    trajs = []
    for h in humans or ():
        t = getattr(h, "trajectory", h)
        t = np.asarray(t, dtype=float).reshape(-1, 3)
        if len(t) < Np:
            if not hasattr(h, "speed"):
                raise ValueError(f"human trajectory shorter than the horizon ({len(t)} < {Np})")
            x = np.array([h.position[0], h.position[1], h.speed, h.yaw, h.omega])
            t = cvtr_trajectory(x, Np, Ts)
        trajs.append(t[:Np])
    if not trajs:
        return np.zeros((Np, 0, 3))
    return np.stack(trajs, axis=1)


def _sample_points(states: np.ndarray, geom: RobotGeometry) -> np.ndarray:
    """(..., 3 samples, 2) body-axis sample points of robot poses (..., 3)."""
    a = _sample_offsets(geom)
    psi = states[..., 2:3]
    return np.stack([states[..., 0:1] + a * np.cos(psi), states[..., 1:2] + a * np.sin(psi)], axis=-1)


def _ps_mask(humans: np.ndarray, pts: np.ndarray, ps: PsParams) -> np.ndarray:
    """True where a (step, human, sample) term is inside the cutoff radius."""
    hx = humans[:, :, None, 0]
    hy = humans[:, :, None, 1]
    th = humans[:, :, None, 2]
    dx = pts[:, None, :, 0] - hx
    dy = pts[:, None, :, 1] - hy
    d1 = np.cos(th) * dx + np.sin(th) * dy
    d2 = -np.sin(th) * dx + np.cos(th) * dy
    return d1 * d1 / ps.sigma_xx + d2 * d2 / ps.sigma_yy <= PS_CUTOFF**2


def build_qp(state: RobotState, u_prev: ControlInput, window: np.ndarray, humans,
             params: MpcParams, geom: RobotGeometry, ps: PsParams | None = None,
             v_ref=(0.0, 0.0)) -> QP:
    """Condensed QP ``min 1/2 z'Pz + q'z  s.t.  l <= Mz <= u`` over input increments.

    ``humans`` is a list of (Np, 3) predicted (x, y, theta) arrays, or fused
    objects carrying a ``trajectory``. ``v_ref`` is one (v_f, v_r) pair or an
    (Np, 2) array of per-step speed references.
    """
    ps = ps or PsParams()
    Np, Nc, Ts = params.Np, params.Nc, params.Ts
    n = 4 * Nc
    z0 = state.as_array()
    up = u_prev.as_array()
    lin = linearize(z0, up, geom, Ts)
    A, B, d = lin.A, lin.B, lin.d
    Tm = _input_map(params)

    c = np.zeros((Np + 1, 3))
    S = np.zeros((Np + 1, 3, n))
    c[0] = z0
    bu = B @ up + d
    for k in range(Np):
        c[k + 1] = A @ c[k] + bu
        S[k + 1] = A @ S[k] + B @ Tm[k]

    ref = _unwrapped_reference(window, z0[2])
    Q = params.Q
    Sk = S[1:]
    err = c[1:] - ref
    P = 2.0 * np.einsum("kai,ab,kbj->ij", Sk, Q, Sk)
    q = 2.0 * np.einsum("kai,ab,kb->i", Sk, Q, err)

    W = params.u_weight
    du0 = up[None, :] - _input_reference(v_ref, Np)
    P += 2.0 * np.einsum("kai,ab,kbj->ij", Tm, W, Tm)
    q += 2.0 * np.einsum("kai,ab,kb->i", Tm, W, du0)

    H = _human_arrays(humans, Np, Ts)
    w = params.ps_weight * ps.weight
    if H.shape[1] and w > 0:
        pts = _sample_points(c[1:], geom)  # (Np, 3, 2)
        mask = _ps_mask(H, pts, ps)
        if mask.any():
            _, g, h = ps_quadratic_batch(
                H[:, :, None, 0], H[:, :, None, 1], H[:, :, None, 2],
                pts[:, None, :, 0], pts[:, None, :, 1], ps)
            g = np.where(mask[..., None], g, 0.0).sum(axis=1)  # (Np, 3, 2)
            h = np.where(mask[..., None, None], h, 0.0).sum(axis=1)
            a = _sample_offsets(geom)
            psi = c[1:, 2]
            G = np.zeros((Np, 3, 2, 3))
            G[..., 0, 0] = 1.0
            G[..., 1, 1] = 1.0
            G[..., 0, 2] = -a[None, :] * np.sin(psi)[:, None]
            G[..., 1, 2] = a[None, :] * np.cos(psi)[:, None]
            GS = np.einsum("ksab,kbi->ksai", G, Sk)
            P += w * np.einsum("ksai,ksab,ksbj->ij", GS, h, GS)
            q += w * np.einsum("ksai,ksa->i", GS, g)

    P = 0.5 * (P + P.T)

    # constraints: rate, absolute bounds over the control horizon, non-slip
    u_min, u_max = _steer_bounds(params)
    Tc = Tm[:Nc].reshape(4 * Nc, n)
    E, g0 = nonslip_terms(up)
    s0 = float(E @ up + g0)
    Nrows = np.einsum("a,kai->ki", E, Tm[:Nc])
    M = np.vstack([np.eye(n), Tc, Nrows])
    lo = np.concatenate([
        np.tile(params.du_min * Ts, Nc),
        np.tile(u_min - up, Nc),
        np.full(Nc, -params.nonslip_bound - s0),
    ])
    hi = np.concatenate([
        np.tile(params.du_max * Ts, Nc),
        np.tile(u_max - up, Nc),
        np.full(Nc, params.nonslip_bound - s0),
    ])
    return QP(P, q, M, lo, hi, c, S)


def _unwrapped_reference(window: np.ndarray, psi0: float) -> np.ndarray:
    ref = np.asarray(window, dtype=float).copy()
    rel = np.unwrap(np.concatenate([[0.0], wrap_angle(ref[:, 2] - psi0)]))[1:]
    ref[:, 2] = psi0 + rel
    return ref


def kkt_residuals(P, q, M, l, u, z, y) -> tuple[float, float]:
    """Primal and dual infinity-norm residuals of a candidate primal/dual pair."""
    Mz = M @ z
    prim = float(np.max(np.concatenate([[0.0], Mz - u, l - Mz])))
    dual = float(np.max(np.abs(P @ z + q + M.T @ y))) if len(z) else 0.0
    return prim, dual


def solve_qp(P, q, M, l, u, warm_start=None, max_iter: int = 20000):
    """Solve the box/polytope-constrained convex QP with OSQP.

    Returns ``(z, status, iterations)`` with status ``optimal``, ``max_iter``
    or ``infeasible``. ``optimal`` is only reported when the KKT residuals are
    below ``KKT_TOL``.
    """
    P = np.asarray(P, dtype=float)
    M = np.asarray(M, dtype=float)
    if np.any(np.asarray(l) > np.asarray(u) + 1e-12):
        return np.zeros(len(q)), INFEASIBLE, 0
    solver = osqp.OSQP()
    solver.setup(sparse.triu(sparse.csc_matrix(P), format="csc"), np.asarray(q, dtype=float),
                 sparse.csc_matrix(M), np.asarray(l, dtype=float), np.asarray(u, dtype=float),
                 verbose=False, eps_abs=1e-9, eps_rel=0.0, eps_prim_inf=1e-7, eps_dual_inf=1e-7,
                 max_iter=max_iter, polishing=False, adaptive_rho=True)
    if warm_start is not None and len(warm_start) == len(q):
        solver.warm_start(x=np.asarray(warm_start, dtype=float))
    res = solver.solve(raise_error=False)
    status = str(res.info.status).lower()
    iters = int(res.info.iter)
    if "infeasible" in status and "inaccurate" not in status:
        return np.zeros(len(q)), INFEASIBLE, iters
    z = res.x
    if z is None or not np.all(np.isfinite(z)):
        return np.zeros(len(q)), MAX_ITER, iters
    prim, dual = kkt_residuals(P, q, M, l, u, z, res.y)
    if status == "solved" and prim <= KKT_TOL and dual <= KKT_TOL:
        return z, OPTIMAL, iters
    if "infeasible" in status:
        return np.zeros(len(q)), INFEASIBLE, iters
    return z, MAX_ITER, iters


def rollout(state: RobotState, inputs: np.ndarray, geom: RobotGeometry, Ts: float) -> np.ndarray:
    """Nonlinear (Np + 1, 3) state sequence under the (Np, 4) input sequence."""
    out = np.empty((len(inputs) + 1, 3))
    out[0] = state.as_array()
    for k, u in enumerate(inputs):
        out[k + 1] = step_array(out[k], u, geom, Ts)
    return out


def cost_breakdown(states: np.ndarray, inputs: np.ndarray, window: np.ndarray, humans,
                   params: MpcParams, geom: RobotGeometry, ps: PsParams,
                   v_ref) -> tuple[float, float, float]:
    """(personal space, tracking, input) costs of a predicted trajectory."""
    Np = params.Np
    H = _human_arrays(humans, Np, params.Ts)
    J1 = 0.0
    if H.shape[1]:
        pts = _sample_points(states[1:], geom)
        vals = ps_value_batch(H[:, :, None, 0], H[:, :, None, 1], H[:, :, None, 2],
                              pts[:, None, :, 0], pts[:, None, :, 1], ps)
        J1 = float(params.ps_weight * ps.weight * vals.sum())
    ref = _unwrapped_reference(window, states[0, 2])
    e = states[1:] - ref
    J2 = float(np.einsum("ka,ab,kb->", e, params.Q, e))
    du = inputs - _input_reference(v_ref, len(inputs))
    J3 = float(np.einsum("ka,ab,kb->", du, params.u_weight, du))
    return J1, J2, J3


def predicted_clearance(states: np.ndarray, humans: np.ndarray, geom: RobotGeometry,
                        radius: float = PEDESTRIAN_RADIUS) -> float:
    """Smallest footprint-to-person border distance along a predicted rollout."""
    if humans.shape[1] == 0:
        return float("inf")
    best = np.inf
    for k in range(1, len(states)):
        best = min(best, float(np.min(footprint_distance(states[k], geom, humans[k - 1, :, :2]))))
    return best - radius


def braking_input(u_prev: ControlInput, params: MpcParams) -> np.ndarray:
    """Decelerate both wheels toward zero at the rate limit, holding steering."""
    u = u_prev.as_array().copy()
    for i in (0, 1):
        dv = (params.du_max[i] if u[i] < 0 else -params.du_min[i]) * params.Ts
        u[i] -= np.sign(u[i]) * min(abs(u[i]), dv)
    u_min, u_max = _steer_bounds(params)
    return np.clip(u, u_min, u_max)


def _clip_input(u, up, params: MpcParams) -> np.ndarray:
    u = np.clip(u, up + params.du_min * params.Ts, up + params.du_max * params.Ts)
    u_min, u_max = _steer_bounds(params)
    return np.clip(u, u_min, u_max)


class MpcPlanner:
    """Stateful wrapper that warm-starts each solve from the shifted previous plan."""

    def __init__(self, params: MpcParams | None = None, geom: RobotGeometry | None = None,
                 ps: PsParams | None = None):
        self.params = params or MpcParams()
        self.geom = geom or RobotGeometry()
        self.ps = ps or PsParams()
        self._z = None

    def reset(self):
        self._z = None

    def plan_step(self, state: RobotState, u_prev: ControlInput, ref: Reference, humans=()) -> PlanResult:
        prm = self.params
        Np = prm.Np
        t0 = time.perf_counter()
        window = reference_window(ref, state, prm)
        H = _human_arrays(humans, Np, prm.Ts)
        humans_arr = [H[:, i] for i in range(H.shape[1])]
        speeds = reference_speeds(ref, state, prm)
        qp = build_qp(state, u_prev, window, humans_arr, prm, self.geom, self.ps, speeds)
        warm = None
        if self._z is not None:
            warm = np.concatenate([self._z[4:], np.zeros(4)])
        z, status, iters = solve_qp(qp.P, qp.q, qp.M, qp.l, qp.u, warm, prm.max_iter)
        up = u_prev.as_array()
        if status == OPTIMAL:
            Tm = _input_map(prm)
            inputs = up + np.einsum("kai,i->ka", Tm, z)
            inputs = np.array([_clip_input(inputs[0], up, prm)] +
                              [np.clip(v, *_steer_bounds(prm)) for v in inputs[1:]])
            self._z = z
        else:
            logger.warning("QP %s after %d iterations; braking", status, iters)
            inputs = np.tile(braking_input(u_prev, prm), (Np, 1))
            self._z = None
        solve_time = time.perf_counter() - t0
        states = rollout(state, inputs, self.geom, prm.Ts)
        costs = cost_breakdown(states, inputs, window, humans_arr, prm, self.geom, self.ps, speeds)
        return PlanResult(ControlInput.from_array(inputs[0]), states, status, solve_time, costs,
                          iters, z if status == OPTIMAL else None,
                          predicted_clearance(states, H, self.geom))


def plan_step(state: RobotState, u_prev: ControlInput, ref: Reference, humans,
              params: MpcParams | None = None, geom: RobotGeometry | None = None,
              ps: PsParams | None = None) -> PlanResult:
    """One cold-started planning cycle."""
    return MpcPlanner(params, geom, ps).plan_step(state, u_prev, ref, humans)
