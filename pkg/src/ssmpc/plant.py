"""Simulated cable-driven soft manipulator used as ground truth.

The body is a chain of ``n_links`` rigid links joined by two-axis elastic
joints.  Joint ``j`` rotates its link by ``Ry(alpha_j) @ Rx(beta_j)`` relative
to the previous link, so pure alpha bending stays in the base x-z plane and
pure beta bending in the y-z plane.  The undeformed axis is +z and gravity
acts along -y (the manipulator is mounted horizontally).

Angles are stored interleaved per joint, ``[alpha_1, beta_1, alpha_2, ...]``.
Most functions accept a leading batch dimension so that many trajectories can
be stepped at once.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernel
from .errors import InfeasibleInput, NumericBlowup

N_CABLES = 4
OBS_DIM = 6


@dataclass(frozen=True)
class PlantConfig:
    n_links: int = 6
    link_length: float = 0.094 / 6
    link_mass: float = 1.6e-3
    joint_inertia: tuple = (3.0e-4, 3.0e-4)
    joint_stiffness: tuple = (0.052, 0.04)
    cubic_stiffness: tuple = (0.2, 0.15)
    joint_damping: tuple = (1.6e-3, 1.04e-2)
    cable_radius: float = 0.0058
    gravity: float = 9.81
    tension_max: float = 2.0
    feature_offset: float = 0.001
    angle_limit: float = np.pi / 2
    tag: str = "A"

    def __post_init__(self):
        for name in ("joint_inertia", "joint_stiffness", "cubic_stiffness", "joint_damping"):
            val = tuple(float(v) for v in getattr(self, name))
            if len(val) != 2:
                raise ValueError(f"{name} must have two entries (alpha, beta)")
            object.__setattr__(self, name, val)
        if self.n_links < 2:
            raise ValueError("n_links must be >= 2")
        positive = [self.link_length, self.link_mass, self.cable_radius, self.tension_max,
                    *self.joint_inertia, *self.joint_stiffness, *self.joint_damping]
        if min(positive) <= 0:
            raise ValueError("lengths, masses, inertias, stiffnesses, damping and tension_max must be > 0")
        if min(self.cubic_stiffness) < 0 or self.gravity < 0:
            raise ValueError("cubic_stiffness and gravity must be non-negative")
        if not 0 < self.feature_offset < self.link_length:
            raise ValueError("feature_offset must lie in (0, link_length)")

    @property
    def total_length(self) -> float:
        return self.n_links * self.link_length

    @property
    def n_angles(self) -> int:
        return 2 * self.n_links

    @property
    def state_dim(self) -> int:
        return 4 * self.n_links

    def replace(self, **changes) -> "PlantConfig":
        data = asdict(self)
        data.update(changes)
        return PlantConfig(**data)

    def to_dict(self) -> dict:
        data = asdict(self)
        for k, v in data.items():
            if isinstance(v, tuple):
                data[k] = list(v)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PlantConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown plant keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PlantConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def stiffer_variant(cfg: PlantConfig, stiffness_scale=1.4, damping_scale=1.2, tag="B") -> PlantConfig:
    """Harder-material redesign: scaled linear/cubic stiffness and damping."""
    return cfg.replace(
        joint_stiffness=tuple(stiffness_scale * k for k in cfg.joint_stiffness),
        cubic_stiffness=tuple(stiffness_scale * k for k in cfg.cubic_stiffness),
        joint_damping=tuple(damping_scale * d for d in cfg.joint_damping),
        tag=tag,
    )


@dataclass
class PlantState:
    angles: np.ndarray
    rates: np.ndarray = field(default=None)

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        self.rates = np.zeros_like(self.angles) if self.rates is None else np.asarray(self.rates, dtype=float)
        if self.angles.shape != self.rates.shape:
            raise ValueError("angles and rates must have the same shape")

    @classmethod
    def zeros(cls, cfg: PlantConfig) -> "PlantState":
        return cls(np.zeros(cfg.n_angles))

    @classmethod
    def from_vector(cls, y) -> "PlantState":
        y = np.asarray(y, dtype=float)
        half = y.shape[-1] // 2
        return cls(y[..., :half].copy(), y[..., half:].copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.angles, self.rates], axis=-1)

    def within_limits(self, cfg: PlantConfig) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())) and np.all(np.abs(self.angles) <= cfg.angle_limit))


def _joint_rotations(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint ``Ry(a) Rx(b)`` and ``Ry(a)`` matrices, shape (..., n, 3, 3)."""
    a = angles[..., 0::2]
    b = angles[..., 1::2]
    ca, sa, cb, sb = np.cos(a), np.sin(a), np.cos(b), np.sin(b)
    zero, one = np.zeros_like(a), np.ones_like(a)
    rot = np.stack([
        np.stack([ca, sa * sb, sa * cb], -1),
        np.stack([zero, cb, -sb], -1),
        np.stack([-sa, ca * sb, ca * cb], -1),
    ], -2)
    ry = np.stack([
        np.stack([ca, zero, sa], -1),
        np.stack([zero, one, zero], -1),
        np.stack([-sa, zero, ca], -1),
    ], -2)
    return rot, ry


def chain_kinematics(angles: np.ndarray, cfg: PlantConfig) -> dict:
    """Forward kinematics of the whole chain.

    Returns a dict with joint positions ``q`` (..., n+1, 3), cumulative link
    frames ``frames`` (..., n+1, 3, 3) where ``frames[..., j]`` is the frame
    *before* joint j (frames[..., 0] is the base), and the per-joint ``Ry``
    factors needed for the beta axes.
    """
    angles = np.asarray(angles, dtype=float)
    batch = angles.shape[:-1]
    n = cfg.n_links
    rot, ry = _joint_rotations(angles)
    frames = np.empty(batch + (n + 1, 3, 3))
    q = np.empty(batch + (n + 1, 3))
    frames[..., 0, :, :] = np.eye(3)
    q[..., 0, :] = 0.0
    for j in range(n):
        frames[..., j + 1, :, :] = frames[..., j, :, :] @ rot[..., j, :, :]
        q[..., j + 1, :] = q[..., j, :] + cfg.link_length * frames[..., j + 1, :, 2]
    return {"q": q, "frames": frames, "ry": ry}


def gravity_torque(angles: np.ndarray, cfg: PlantConfig, kin: dict | None = None) -> np.ndarray:
    """Generalized joint torques of lumped link weights (masses at link midpoints)."""
    angles = np.asarray(angles, dtype=float)
    if cfg.gravity == 0.0:
        return np.zeros_like(angles)
    kin = chain_kinematics(angles, cfg) if kin is None else kin
    n = cfg.n_links
    q, frames = kin["q"], kin["frames"]
    centroids = 0.5 * (q[..., :-1, :] + q[..., 1:, :])
    force = np.array([0.0, -cfg.link_mass * cfg.gravity, 0.0])
    # moment of all distal weights about pivot j: sum_{i>=j} c_i x F - q_j x (n-j) F
    c_cross = np.cross(centroids, force)
    suffix = np.flip(np.cumsum(np.flip(c_cross, -2), -2), -2)
    count = (n - np.arange(n))[:, None]
    moment = suffix - np.cross(q[..., :-1, :], count * force)
    axis_alpha = frames[..., :-1, :, 1]
    axis_beta = np.einsum("...ij,...j->...i", frames[..., :-1, :, :], kin["ry"][..., :, :, 0])
    tau = np.empty_like(angles)
    tau[..., 0::2] = np.einsum("...i,...i->...", axis_alpha, moment)
    tau[..., 1::2] = np.einsum("...i,...i->...", axis_beta, moment)
    return tau


def cable_torque(tensions: np.ndarray, cfg: PlantConfig) -> np.ndarray:
    """Joint torques from the four cables; every joint sees the full moment."""
    t = np.asarray(tensions, dtype=float)
    tau_alpha = cfg.cable_radius * (t[..., 1] - t[..., 3])
    tau_beta = cfg.cable_radius * (t[..., 0] - t[..., 2])
    per_joint = np.stack([tau_alpha, tau_beta], -1)[..., None, :]
    return np.broadcast_to(per_joint, t.shape[:-1] + (cfg.n_links, 2)).reshape(t.shape[:-1] + (cfg.n_angles,))


def _axis_params(cfg: PlantConfig):
    n = cfg.n_links
    tile = lambda v: np.tile(np.asarray(v, dtype=float), n)  # noqa: E731
    return tile(cfg.joint_inertia), tile(cfg.joint_stiffness), tile(cfg.cubic_stiffness), tile(cfg.joint_damping)


def rhs(y: np.ndarray, tensions: np.ndarray, cfg: PlantConfig) -> np.ndarray:
    """Flat first-order form of the plant, ``y = [angles, rates]`` (batched)."""
    y = np.asarray(y, dtype=float)
    tensions = np.asarray(tensions, dtype=float)
    if not np.all(np.isfinite(y)):
        raise NumericBlowup()
    if np.any(tensions < 0):
        raise InfeasibleInput("infeasible input: negative tension")
    m = cfg.n_angles
    theta, omega = y[..., :m], y[..., m:]
    if np.any(np.abs(theta) > 2 * cfg.angle_limit):
        raise NumericBlowup("numeric blowup: joint angle far outside limits")
    inertia, k1, k3, damp = _axis_params(cfg)
    tau = -k1 * theta - k3 * theta**3 - damp * omega + cable_torque(tensions, cfg)
    tau = tau + gravity_torque(theta, cfg)
    return np.concatenate([omega, tau / inertia], axis=-1)


def plant_derivative(state: PlantState, tensions, cfg: PlantConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(rates, accelerations)`` of the manipulator."""
    dy = rhs(state.to_vector(), tensions, cfg)
    return dy[..., : cfg.n_angles], dy[..., cfg.n_angles:]


def rk4_step(f: Callable[[np.ndarray], np.ndarray], y: np.ndarray, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``y' = f(y)``."""
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_rk4(state: PlantState, tensions, dt: float, cfg: PlantConfig) -> PlantState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.asarray(tensions, dtype=float)
    y = rk4_step(lambda s: rhs(s, u, cfg), state.to_vector(), dt)
    if not np.all(np.isfinite(y)):
        raise NumericBlowup()
    return PlantState.from_vector(y)


def advance(y: np.ndarray, tensions, duration: float, cfg: PlantConfig, dt_inner: float = 1e-3,
            compiled: bool = True) -> np.ndarray:
    """Hold ``tensions`` over ``duration`` using RK4 substeps (batched flat state).

    The compiled kernel and the numpy path implement the same equations; the
    numpy one is kept as the readable reference.
    """
    steps = max(1, int(round(duration / dt_inner)))
    h = duration / steps
    u = np.asarray(tensions, dtype=float)
    if np.any(u < 0):
        raise InfeasibleInput("infeasible input: negative tension")
    y = np.asarray(y, dtype=float)
    if compiled:
        yb = np.ascontiguousarray(np.atleast_2d(y))
        ub = np.ascontiguousarray(np.broadcast_to(u, yb.shape[:1] + u.shape[-1:]))
        out = _kernel.advance_batch(yb, ub, h, steps, _kernel_params(cfg))
        out = out.reshape(y.shape)
        if not np.all(np.isfinite(out)) or np.any(np.abs(out[..., : cfg.n_angles]) > 2 * cfg.angle_limit):
            raise NumericBlowup()
        return out
    f = lambda s: rhs(s, u, cfg)  # noqa: E731
    for _ in range(steps):
        y = rk4_step(f, y, h)
    if not np.all(np.isfinite(y)):
        raise NumericBlowup()
    return y


def _kernel_params(cfg: PlantConfig) -> np.ndarray:
    return np.array([cfg.n_links, cfg.link_length, cfg.link_mass, cfg.gravity, cfg.cable_radius,
                     *cfg.joint_inertia, *cfg.joint_stiffness, *cfg.cubic_stiffness, *cfg.joint_damping])


def observe_angles(angles: np.ndarray, cfg: PlantConfig) -> np.ndarray:
    """Stacked feature points ``[p1, p2]`` (..., 6) for (batched) joint angles."""
    kin = chain_kinematics(angles, cfg)
    tip = kin["q"][..., -1, :]
    axis = kin["frames"][..., -1, :, 2]
    return np.concatenate([tip, tip - cfg.feature_offset * axis], axis=-1)


def observe(state: PlantState, cfg: PlantConfig) -> np.ndarray:
    return observe_angles(state.angles, cfg)


def energy(state: PlantState, cfg: PlantConfig) -> float:
    """Kinetic + elastic (quadratic and quartic) + gravitational energy."""
    inertia, k1, k3, _ = _axis_params(cfg)
    th, om = state.angles, state.rates
    total = 0.5 * np.sum(inertia * om**2) + np.sum(0.5 * k1 * th**2 + 0.25 * k3 * th**4)
    if cfg.gravity:
        q = chain_kinematics(th, cfg)["q"]
        centroids = 0.5 * (q[:-1] + q[1:])
        total += cfg.link_mass * cfg.gravity * np.sum(centroids[:, 1])
    return float(total)


def equilibrium(cfg: PlantConfig, tensions=None, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    """Static equilibrium joint angles under constant tensions (Newton on the torque balance)."""
    u = np.zeros(N_CABLES) if tensions is None else np.asarray(tensions, dtype=float)
    _, k1, k3, _ = _axis_params(cfg)
    theta = np.zeros(cfg.n_angles)
    eps = 1e-7

    def residual(th):
        return -k1 * th - k3 * th**3 + cable_torque(u, cfg) + gravity_torque(th, cfg)

    for _ in range(max_iter):
        r = residual(theta)
        if np.max(np.abs(r)) < tol:
            break
        jac = np.empty((theta.size, theta.size))
        for i in range(theta.size):
            d = np.zeros_like(theta)
            d[i] = eps
            jac[:, i] = (residual(theta + d) - residual(theta - d)) / (2 * eps)
        theta = theta - np.linalg.solve(jac, r)
    return theta


def equilibrium_observable(cfg: PlantConfig) -> np.ndarray:
    return observe_angles(equilibrium(cfg), cfg)
