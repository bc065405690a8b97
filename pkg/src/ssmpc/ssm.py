"""Polynomial reduced dynamics on the slow spectral submanifold.

The surrogate has three parts, all fitted by ridge regression:

* autonomous reduced dynamics ``xdot = R1 x + R_poly(x)``,
* a control matrix ``C_r`` added on top, ``xdot = r(x, u) = R1 x + R_poly(x) + C_r u``,
* a map from (centered) observables to reduced coordinates,
  ``x = V0 z + V_poly(z)``.

Internally observables are centered on the equilibrium observable and
multiplied by ``obs_scale`` (1000, i.e. millimetres) so that polynomial
features and the default ridge weight act on O(1) numbers.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from math import comb
from pathlib import Path

import numpy as np

from . import datagen as dg
from .errors import (DimensionMismatch, IllPosed, InsufficientSamples, PredictionBlowup, Unidentifiable,
                     UnstableLinearPart)

log = logging.getLogger(__name__)

MONOMIAL_ORDER = "graded-lex-v1"
SCHEMA_VERSION = 1


@lru_cache(maxsize=None)
def monomial_indices(dim: int, lo: int, hi: int) -> np.ndarray:
    """Index table of monomials of total degree lo..hi in graded-lex order.

    Row ``f`` lists the variable indices multiplied together, padded with
    ``dim`` (a slot that evaluates to one).  For dim 2, degree 2 this gives
    ``x0*x0, x0*x1, x1*x1``.
    """
    rows = []
    for deg in range(lo, hi + 1):
        for combo in itertools.combinations_with_replacement(range(dim), deg):
            rows.append(list(combo) + [dim] * (hi - deg))
    table = np.array(rows, dtype=int).reshape(len(rows), hi)
    table.setflags(write=False)
    return table


def n_monomials(dim: int, lo: int, hi: int) -> int:
    return sum(comb(dim + k - 1, k) for k in range(lo, hi + 1))


def monomial_exponents(dim: int, lo: int, hi: int) -> np.ndarray:
    idx = monomial_indices(dim, lo, hi)
    exps = np.zeros((idx.shape[0], dim), dtype=int)
    for f, row in enumerate(idx):
        for i in row:
            if i < dim:
                exps[f, i] += 1
    return exps


def _extended(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((1,) + x.shape[1:])], axis=0)


def poly_features(x, hi: int, lo: int = 2) -> np.ndarray:
    """All monomials of ``x`` with total degree ``lo..hi`` (graded-lex order).

    ``x`` may be a vector (dim,) or a matrix of column samples (dim, K).
    """
    x = np.asarray(x, dtype=float)
    if hi < lo:
        return np.zeros((0,) + x.shape[1:])
    idx = monomial_indices(x.shape[0], lo, hi)
    return np.prod(_extended(x)[idx], axis=1)


def poly_features_jacobian(x, hi: int, lo: int = 2) -> np.ndarray:
    """Derivative of :func:`poly_features` w.r.t. ``x``: (n_feat, dim[, K])."""
    x = np.asarray(x, dtype=float)
    dim = x.shape[0]
    idx = monomial_indices(dim, lo, hi)
    if idx.shape[0] == 0:
        return np.zeros((0, dim) + x.shape[1:])
    vals = _extended(x)[idx]  # (n_feat, hi, ...)
    jac = np.zeros((idx.shape[0], dim + 1) + x.shape[1:])
    rows = np.arange(idx.shape[0])
    for p in range(idx.shape[1]):
        others = np.prod(np.delete(vals, p, axis=1), axis=1)
        np.add.at(jac, (rows, idx[:, p]), others)
    return jac[:, :dim]


@dataclass
class PolyMap:
    """Linear combination of monomial features: ``coef @ poly_features(x)``."""

    input_dim: int
    lo: int
    hi: int
    coef: np.ndarray

    def __post_init__(self):
        self.coef = np.ascontiguousarray(np.atleast_2d(np.asarray(self.coef, dtype=float)))
        expected = n_monomials(self.input_dim, self.lo, self.hi)
        if self.coef.shape[1] != expected:
            raise DimensionMismatch(f"dimension mismatch: {self.coef.shape[1]} coefficients, {expected} monomials")

    def __call__(self, x):
        return self.coef @ poly_features(x, self.hi, self.lo)

    def jacobian(self, x):
        jf = poly_features_jacobian(x, self.hi, self.lo)
        return np.einsum("of,fd...->od...", self.coef, jf)

    def to_dict(self):
        return {"input_dim": self.input_dim, "degrees": [self.lo, self.hi], "coef": self.coef.tolist()}

    @classmethod
    def from_dict(cls, d):
        lo, hi = d["degrees"]
        coef = np.array(d["coef"], dtype=float).reshape(len(d["coef"]), n_monomials(d["input_dim"], lo, hi))
        return cls(d["input_dim"], lo, hi, coef)


# -- regression building blocks -------------------------------------------

_CENTRAL = {
    2: (1, np.array([-1 / 2, 0, 1 / 2])),
    4: (2, np.array([1 / 12, -2 / 3, 0, 2 / 3, -1 / 12])),
    6: (3, np.array([-1 / 60, 3 / 20, -3 / 4, 0, 3 / 4, -3 / 20, 1 / 60])),
}


def estimate_derivatives(X, dt: float, trim: int = 2, order: int = 6) -> np.ndarray:
    """Time derivative of uniformly sampled columns ``X`` (dim, T).

    Central differences of the requested order wherever the stencil fits,
    falling back to lower-order central stencils near the ends and one-sided
    second-order differences at the first/last sample.  ``trim`` samples are
    dropped at each end of the result.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = X.shape[1]
    if T < 3:
        raise InsufficientSamples(f"insufficient samples: derivative needs >= 3, got {T}")
    if T <= 2 * trim:
        raise InsufficientSamples(f"insufficient samples: {T} samples cannot be trimmed by {trim}")
    D = np.empty_like(X)
    D[:, 0] = (-3 * X[:, 0] + 4 * X[:, 1] - X[:, 2]) / (2 * dt)
    D[:, -1] = (3 * X[:, -1] - 4 * X[:, -2] + X[:, -3]) / (2 * dt)
    filled = np.zeros(T, dtype=bool)
    filled[[0, -1]] = True
    for o in sorted(k for k in _CENTRAL if k <= order)[::-1]:
        half, w = _CENTRAL[o]
        if T <= 2 * half:
            continue
        acc = sum(w[i] * X[:, i: T - 2 * half + i] for i in range(2 * half + 1) if w[i] != 0.0)
        sel = np.arange(half, T - half)
        todo = ~filled[sel]
        D[:, sel[todo]] = acc[:, todo] / dt
        filled[sel] = True
    return D[:, trim: T - trim] if trim else D


def euler_targets(X, dt: float, trim: int = 2) -> np.ndarray:
    """Forward differences ``(x[k+1] - x[k]) / dt`` aligned with ``x[k]``.

    These are the regression targets that make a forward-Euler step at ``dt``
    reproduce the training samples exactly; the last sample has no target and
    is dropped along with ``trim`` samples at each end.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = X.shape[1]
    if T < 2 + 2 * trim:
        raise InsufficientSamples(f"insufficient samples: {T}")
    D = (X[:, 1:] - X[:, :-1]) / dt
    return D[:, trim: T - 1 - trim]


def ridge_solve(Phi: np.ndarray, Y: np.ndarray, lam: float) -> np.ndarray:
    """Coefficients ``W`` minimising ``||Y - W Phi||^2 + lam ||W||^2``.

    ``Phi`` is (p, M) regressors, ``Y`` is (q, M) targets.  Solved through the
    regularised normal equations.
    """
    G = Phi @ Phi.T
    if lam > 0:
        G = G + lam * np.eye(G.shape[0])
    rhs = Phi @ Y.T
    if lam == 0:
        cond = np.linalg.cond(G) if G.size else 0.0
        if not np.isfinite(cond) or cond > 1e15:
            raise IllPosed(f"ill-posed: normal matrix singular (cond={cond:.2e})")
    try:
        W = np.linalg.solve(G, rhs).T
    except np.linalg.LinAlgError as exc:
        raise IllPosed("ill-posed: normal matrix singular") from exc
    return W


def normal_equation_residual(Phi, Y, W, lam) -> float:
    """Relative norm of the ridge gradient at ``W`` (zero at the optimum)."""
    grad = (W @ Phi - Y) @ Phi.T + lam * W
    scale = np.linalg.norm(Y @ Phi.T) + np.finfo(float).tiny
    return float(np.linalg.norm(grad) / scale)


def fit_reduced_dynamics(X, Xdot, n_r: int = 3, lam: float = 1e-6, check_stability: bool = True):
    """Ridge fit of ``Xdot = R1 X + R_poly(X)``; returns ``(R1, R_poly)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xdot = np.atleast_2d(np.asarray(Xdot, dtype=float))
    n = X.shape[0]
    if Xdot.shape != X.shape:
        raise DimensionMismatch("X and Xdot must have the same shape")
    Phi = np.vstack([X, poly_features(X, n_r)])
    if X.shape[1] < Phi.shape[0]:
        raise InsufficientSamples(f"insufficient samples: {X.shape[1]} samples for {Phi.shape[0]} regressors")
    W = ridge_solve(Phi, Xdot, lam)
    R1 = W[:, :n]
    R_poly = PolyMap(n, 2, n_r, W[:, n:])
    if check_stability:
        eig = np.linalg.eigvals(R1)
        if np.max(eig.real) >= 0:
            raise UnstableLinearPart(eig)
    return R1, R_poly


def fit_control_matrix(X, Xdot, U, R1, R_poly: PolyMap, lam: float = 1e-6) -> np.ndarray:
    """Least squares for ``C_r`` on the residual of the frozen autonomous part."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[1] != X.shape[1]:
        raise DimensionMismatch("U and X must have the same number of samples")
    if np.max(np.var(U, axis=1)) <= 1e-14 * max(1.0, float(np.max(np.abs(U))) ** 2):
        raise Unidentifiable("unidentifiable control matrix: input sequence has zero variance")
    resid = np.asarray(Xdot, dtype=float) - R1 @ X - R_poly(X)
    return ridge_solve(U, resid, lam)


def fit_observable_map(Z, X, n_v: int = 3, lam: float = 1e-6):
    """Ridge fit of ``x = V0 z + V_poly(z)`` (no constant term); returns ``(V0, V_poly)``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if Z.shape[1] != X.shape[1]:
        raise DimensionMismatch("Z and X must have the same number of samples")
    p = Z.shape[0]
    Phi = np.vstack([Z, poly_features(Z, n_v)])
    if Z.shape[1] < Phi.shape[0]:
        raise InsufficientSamples(f"insufficient samples: {Z.shape[1]} samples for {Phi.shape[0]} regressors")
    W = ridge_solve(Phi, X, lam)
    return W[:, :p], PolyMap(p, 2, n_v, W[:, p:])


# -- the fitted model ----------------------------------------------------------

@dataclass
class SsmModel:
    basis: dg.ProjectionBasis
    R1: np.ndarray
    R_poly: PolyMap
    C_r: np.ndarray
    V0: np.ndarray
    V_poly: PolyMap
    equilibrium_observable: np.ndarray
    dt_train: float
    ridge_lambda: float
    obs_scale: float = 1e3
    delay: int = 1
    train_radius: float = 1.0

    kind = "ssm"

    def __post_init__(self):
        # contiguous float copies make evaluation bit-identical after a file round-trip
        for name in ("R1", "C_r", "V0", "equilibrium_observable"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=float))
        n = self.basis.n
        if self.R1.shape != (n, n) or self.C_r.shape[0] != n or self.V0.shape[0] != n:
            raise DimensionMismatch("inconsistent SSM model dimensions")
        if np.max(np.linalg.eigvals(self.R1).real) >= 0:
            raise UnstableLinearPart(np.linalg.eigvals(self.R1))

    @property
    def n(self) -> int:
        return self.basis.n

    @property
    def m(self) -> int:
        return self.C_r.shape[1]

    @property
    def dt(self) -> float:
        return self.dt_train

    def cost_weight(self) -> np.ndarray:
        """Identity in reduced coordinates, expressed in metres (undoes ``obs_scale``)."""
        return np.eye(self.n) / self.obs_scale**2

    # coordinates ----------------------------------------------------------
    def scale_observable(self, z) -> np.ndarray:
        """Raw observables (..., 6) in metres -> centered, scaled columns (6, ...)."""
        z = np.asarray(z, dtype=float)
        return np.moveaxis((z - self.equilibrium_observable) * self.obs_scale, -1, 0)

    def obs_to_reduced(self, zc) -> np.ndarray:
        """``v_z``: centered, scaled observable columns (6, ...) -> reduced (n, ...)."""
        zc = np.asarray(zc, dtype=float)
        return np.tensordot(self.V0, zc, axes=1) + self.V_poly(zc)

    def encode(self, z) -> np.ndarray:
        """Raw observable(s) (..., 6) -> reduced state(s) (..., n)."""
        return np.moveaxis(self.obs_to_reduced(self.scale_observable(z)), 0, -1)

    def decode(self, x) -> np.ndarray:
        """Reduced state(s) (..., n) -> raw observable(s) (..., 6) through the linear basis."""
        x = np.asarray(x, dtype=float)
        lift = x @ self.basis.modes[:6].T
        return lift / self.obs_scale + self.equilibrium_observable

    # dynamics -------------------------------------------------------------
    def rhs(self, x, u) -> np.ndarray:
        """``r(x, u)``; accepts column batches (n, K) with inputs (m, K)."""
        x = np.asarray(x, dtype=float)
        return self.R1 @ x + self.R_poly(x) + self.C_r @ np.asarray(u, dtype=float)

    def rhs_jacobians(self, x, u=None):
        """``(dr/dx, dr/du)`` at one point."""
        x = np.asarray(x, dtype=float)
        return self.R1 + self.R_poly.jacobian(x), self.C_r

    def step(self, x, u, dt=None) -> np.ndarray:
        dt = self.dt_train if dt is None else dt
        return np.asarray(x, dtype=float) + self.rhs(x, u) * dt

    def step_jacobians(self, x, u, dt=None):
        dt = self.dt_train if dt is None else dt
        fx, fu = self.rhs_jacobians(x, u)
        return np.eye(self.n) + dt * fx, dt * fu

    def predict(self, z0, u_seq, dt=None) -> np.ndarray:
        """Raw observable prediction (steps+1, 6) from a raw initial observable."""
        zc = (np.asarray(z0, dtype=float) - self.equilibrium_observable)
        _, Z = predict_open_loop(self, zc, u_seq, dt)
        return Z

    # persistence ------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": "ssm",
            "schema_version": SCHEMA_VERSION,
            "monomial_order": MONOMIAL_ORDER,
            "n": self.n,
            "delay": self.delay,
            "dt_train": self.dt_train,
            "ridge_lambda": self.ridge_lambda,
            "obs_scale": self.obs_scale,
            "train_radius": self.train_radius,
            "equilibrium_observable": self.equilibrium_observable.tolist(),
            "basis": {
                "modes": self.basis.modes.tolist(),
                "singular_values": self.basis.singular_values.tolist(),
                "energy_fraction": self.basis.energy_fraction,
            },
            "R1": self.R1.tolist(),
            "R_poly": self.R_poly.to_dict(),
            "C_r": self.C_r.tolist(),
            "V0": self.V0.tolist(),
            "V_poly": self.V_poly.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SsmModel":
        if d.get("kind") != "ssm":
            raise ValueError(f"not an SSM model file (kind={d.get('kind')!r})")
        if d.get("monomial_order") != MONOMIAL_ORDER:
            raise ValueError(f"unsupported monomial order {d.get('monomial_order')!r}")
        b = d["basis"]
        basis = dg.ProjectionBasis(np.array(b["modes"]), np.array(b["singular_values"]), b["energy_fraction"])
        return cls(
            basis=basis,
            R1=np.array(d["R1"], dtype=float).reshape(d["n"], d["n"]),
            R_poly=PolyMap.from_dict(d["R_poly"]),
            C_r=np.array(d["C_r"], dtype=float),
            V0=np.array(d["V0"], dtype=float),
            V_poly=PolyMap.from_dict(d["V_poly"]),
            equilibrium_observable=np.array(d["equilibrium_observable"], dtype=float),
            dt_train=d["dt_train"],
            ridge_lambda=d["ridge_lambda"],
            obs_scale=d["obs_scale"],
            delay=d["delay"],
            train_radius=d["train_radius"],
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def reduced_rhs(model: SsmModel, x, u) -> np.ndarray:
    return model.rhs(x, u)


def predict_open_loop(model: SsmModel, z0, u_sequence, dt=None, steps=None):
    """Forward-Euler rollout of the reduced dynamics from a centered observable.

    ``z0`` is the observable minus the equilibrium observable, in metres.
    Returns ``(X, Z)``: reduced states (steps+1, n) and raw observable
    predictions (steps+1, 6).
    """
    dt = model.dt_train if dt is None else dt
    if abs(dt - model.dt_train) > 1e-12:
        raise ValueError(f"dt {dt} does not match the training sample period {model.dt_train}")
    u_sequence = np.atleast_2d(np.asarray(u_sequence, dtype=float))
    steps = len(u_sequence) if steps is None else steps
    if len(u_sequence) < steps:
        raise DimensionMismatch("input sequence shorter than the requested number of steps")
    zc = np.asarray(z0, dtype=float) * model.obs_scale
    X = np.empty((steps + 1, model.n))
    X[0] = model.obs_to_reduced(zc)
    limit = 1e3 * model.train_radius
    for k in range(steps):
        X[k + 1] = model.step(X[k], u_sequence[k], dt)
        if not np.all(np.isfinite(X[k + 1])) or np.linalg.norm(X[k + 1]) > limit:
            raise PredictionBlowup(f"prediction blowup at step {k + 1}")
    return X, model.decode(X)


# -- training pipeline ---------------------------------------------------------

def _prepared(ts: dg.TrajectorySet, eq: np.ndarray, scale: float):
    return [dg.Trajectory(t.times, (t.observables - eq) * scale, t.inputs) for t in ts]


def _recorded_equilibrium(decay: dg.TrajectorySet) -> np.ndarray:
    if decay.equilibrium is not None:
        return np.asarray(decay.equilibrium, dtype=float)
    return np.mean([t.observables[-1] for t in decay], axis=0)


def train_ssm(decay: dg.TrajectorySet, actuated: dg.TrajectorySet | None = None, n: int = 3, delay: int = 1,
              n_r: int = 3, n_v: int = 1, lam: float = 1e-6, obs_scale: float = 1e3, trim: int = 2,
              min_energy: float = 0.95, targets: str = "euler", map_lambda: float | None = 100.0) -> SsmModel:
    """Basis, autonomous dynamics, control matrix and observable map, in that order.

    ``targets`` picks the derivative estimate used as regression target:
    ``"euler"`` (forward differences, consistent with the forward-Euler
    discretization used for prediction and control) or ``"central"``
    (:func:`estimate_derivatives`).  ``map_lambda`` is the ridge weight of
    the observable map; ``None`` reuses ``lam``.

    The map defaults are a linear map (``n_v=1``) with a heavy ridge weight.
    Velocity is not recoverable from a single observable sample, and a
    flexible, lightly regularized map invents velocity from the small
    difference between the two tracked points, which spoils rollouts that
    start away from rest.
    """
    if targets == "euler":
        def pair(X):
            return X[:, trim: X.shape[1] - 1 - trim], euler_targets(X, dt, trim)
    elif targets == "central":
        def pair(X):
            return X[:, trim: X.shape[1] - trim], estimate_derivatives(X, dt, trim)
    else:
        raise ValueError(f"unknown derivative targets {targets!r}")
    if decay.kind != "decay":
        raise ValueError("the basis and autonomous dynamics are learned from decay data")
    dt = decay.dt
    eq = _recorded_equilibrium(decay)
    dec = _prepared(decay, eq, obs_scale)
    snaps = [dg.delay_embed(t, delay, i) for i, t in enumerate(dec)]
    basis = dg.svd_modes(snaps, n)
    if basis.energy_fraction < min_energy:
        log.warning("%d modes capture only %.3f of the snapshot energy", n, basis.energy_fraction)

    Xs, Xdots, Zs, Xz = [], [], [], []
    for t, s in zip(dec, snaps):
        X = dg.project(s, basis)
        Xk, Xd = pair(X)
        Xs.append(Xk)
        Xdots.append(Xd)
        Zs.append(t.observables[s.time_index].T)
        Xz.append(X)
    R1, R_poly = fit_reduced_dynamics(np.hstack(Xs), np.hstack(Xdots), n_r, lam)

    if actuated is not None:
        if actuated.kind != "actuated":
            raise ValueError("control matrix needs actuated data")
        act = _prepared(actuated, eq, obs_scale)
        Xa, Xda, Ua = [], [], []
        for t in act:
            s = dg.delay_embed(t, delay)
            X = dg.project(s, basis)
            U = t.inputs[s.time_index].T
            Xk, Xd = pair(X)
            Xa.append(Xk)
            Xda.append(Xd)
            Ua.append(U[:, trim: trim + Xk.shape[1]])
            Zs.append(t.observables[s.time_index].T)
            Xz.append(X)
        C_r = fit_control_matrix(np.hstack(Xa), np.hstack(Xda), np.hstack(Ua), R1, R_poly, lam)
    else:
        C_r = np.zeros((n, 4))

    V0, V_poly = fit_observable_map(np.hstack(Zs), np.hstack(Xz), n_v, lam if map_lambda is None else map_lambda)
    radius = float(max(np.max(np.linalg.norm(X, axis=0)) for X in Xz))
    return SsmModel(basis, R1, R_poly, C_r, V0, V_poly, eq, dt, lam, obs_scale, delay, radius)


def load_model(path):
    """Load any model file (SSM, Koopman or constant-curvature) by its kind tag."""
    data = json.loads(Path(path).read_text())
    kind = data.get("kind")
    if kind == "ssm":
        return SsmModel.from_dict(data)
    from . import baselines
    if kind == "koopman":
        return baselines.KoopmanModel.from_dict(data)
    if kind == "cc":
        return baselines.CcModel.from_dict(data)
    raise ValueError(f"unknown model kind {kind!r}")
