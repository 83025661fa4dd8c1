"""Asymmetric personal-space field around a person and its local quadratic model.

The field is a blend of a front Gaussian (twice as long in the facing
direction) and a round rear Gaussian, switched by a steep tanh gate on the
longitudinal offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PersonPose:
    x_p: float
    y_p: float
    theta_p: float


@dataclass(frozen=True)
class PsParams:
    """Field shape. ``sigma_xx`` is derived as ``2 * sigma_yy``."""

    sigma_yy: float = 0.36  # m^2
    k: float = 100.0  # 1/m
    weight: float = 1.0

    def __post_init__(self):
        if self.sigma_yy <= 0:
            raise ValueError("sigma_yy must be positive")
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.weight < 0:
            raise ValueError("weight must be non-negative")

    @property
    def sigma_xx(self) -> float:
        return 2.0 * self.sigma_yy


def relative_position(p: PersonPose, q) -> np.ndarray:
    """Offset of ``q`` in the person's body frame (x forward, y left)."""
    c, s = np.cos(p.theta_p), np.sin(p.theta_p)
    dx = q[0] - p.x_p
    dy = q[1] - p.y_p
    return np.array([c * dx + s * dy, -s * dx + c * dy])


def gamma(d_long, k: float):
    """Front/rear blend weight, 0.5 (tanh(k d / 2) + 1)."""
    return 0.5 * (np.tanh(0.5 * k * np.asarray(d_long, dtype=float)) + 1.0)


def _field_in_body_frame(d1, d2, params: PsParams, order: int):
    """Value (and body-frame gradient / Hessian when order >= 1 / 2) for arrays d1, d2."""
    sxx, syy, k = params.sigma_xx, params.sigma_yy, params.k
    of = np.exp(-0.5 * (d1 * d1 / sxx + d2 * d2 / syy))
    orr = np.exp(-0.5 * (d1 * d1 + d2 * d2) / syy)
    th = np.tanh(0.5 * k * d1)
    g = 0.5 * (th + 1.0)
    delta = of - orr
    val = orr + g * delta
    if order == 0:
        return val, None, None
    sech2 = 1.0 - th * th
    g1 = 0.25 * k * sech2
    # gradients of the two Gaussians: -Omega * S d
    gf = np.stack([-of * d1 / sxx, -of * d2 / syy], axis=-1)
    gr = np.stack([-orr * d1 / syy, -orr * d2 / syy], axis=-1)
    gd = gf - gr
    grad = gr + g[..., None] * gd
    grad[..., 0] += g1 * delta
    if order == 1:
        return val, grad, None
    g2 = -0.25 * k * k * sech2 * th
    sf = np.array([1.0 / sxx, 1.0 / syy])
    sr = np.array([1.0 / syy, 1.0 / syy])
    sdf = np.stack([d1 / sxx, d2 / syy], axis=-1)
    sdr = np.stack([d1 / syy, d2 / syy], axis=-1)
    hf = of[..., None, None] * (sdf[..., :, None] * sdf[..., None, :] - np.diag(sf))
    hr = orr[..., None, None] * (sdr[..., :, None] * sdr[..., None, :] - np.diag(sr))
    hd = hf - hr
    hess = hr + g[..., None, None] * hd
    hess[..., 0, :] += g1[..., None] * gd
    hess[..., :, 0] += g1[..., None] * gd
    hess[..., 0, 0] += g2 * delta
    return val, grad, hess


def ps_value(p: PersonPose, q, params: PsParams) -> float:
    """Personal-space field of person ``p`` evaluated at point ``q``; in (0, 1]."""
    d = relative_position(p, q)
    val, _, _ = _field_in_body_frame(d[0], d[1], params, 0)
    return float(val)


def ps_value_batch(px, py, ptheta, qx, qy, params: PsParams) -> np.ndarray:
    """Broadcasting version of :func:`ps_value` over arrays of persons and points."""
    c, s = np.cos(ptheta), np.sin(ptheta)
    dx, dy = qx - px, qy - py
    val, _, _ = _field_in_body_frame(c * dx + s * dy, -s * dx + c * dy, params, 0)
    return val


def ps_quadratic_batch(px, py, ptheta, qx, qy, params: PsParams):
    """Value, world-frame gradient (..., 2) and convexified Hessian (..., 2, 2)."""
    c, s = np.cos(ptheta), np.sin(ptheta)
    dx, dy = qx - px, qy - py
    d1 = c * dx + s * dy
    d2 = -s * dx + c * dy
    val, gd, hd = _field_in_body_frame(d1, d2, params, 2)
    # d = R q + const with R = [[c, s], [-s, c]]; world gradient = R^T g_d
    R = np.empty(np.shape(d1) + (2, 2))
    R[..., 0, 0] = c
    R[..., 0, 1] = s
    R[..., 1, 0] = -s
    R[..., 1, 1] = c
    Rt = np.swapaxes(R, -1, -2)
    grad = np.einsum("...ij,...j->...i", Rt, gd)
    hess = Rt @ hd @ R
    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    w, V = np.linalg.eigh(hess)
    w = np.clip(w, 0.0, None)
    hess_psd = (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)
    return val, grad, hess_psd


def ps_quadratic(p: PersonPose, q_nominal, params: PsParams):
    """Exact value and gradient of the field at ``q_nominal`` plus its Hessian
    with negative eigenvalues clamped to zero."""
    val, grad, hess = ps_quadratic_batch(p.x_p, p.y_p, p.theta_p, q_nominal[0], q_nominal[1], params)
    return float(val), grad, hess


def field_grid(persons: list[PersonPose], params: PsParams, xlim, ylim, resolution: float = 0.05):
    """Summed field of ``persons`` on a regular grid; returns (X, Y, Omega) arrays."""
    xs = np.arange(xlim[0], xlim[1] + 0.5 * resolution, resolution)
    ys = np.arange(ylim[0], ylim[1] + 0.5 * resolution, resolution)
    X, Y = np.meshgrid(xs, ys)
    total = np.zeros_like(X)
    for p in persons:
        total += ps_value_batch(p.x_p, p.y_p, p.theta_p, X, Y, params)
    return X, Y, total
