"""Multiple-shooting MPC solved by a warm-started, iteration-capped SQP.

Any model exposing ``n``, ``m``, ``dt``, ``encode``, ``step``,
``step_jacobians`` and ``cost_weight`` can be controlled.  Each SQP
iteration linearizes the shooting constraints around the current iterate,
condenses the state steps out of the QP and solves the remaining box-bounded
QP in the input steps with a primal active-set method.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import plant as pl
from .datagen import Trajectory

log = logging.getLogger(__name__)

CONVERGED = "converged"
ITER_CAPPED = "iter-capped"
FALLBACK = "infeasible-fallback"


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 25
    dt: float = 0.02
    Q: np.ndarray | None = None  # None: the model's own cost_weight()
    terminal_factor: float = 10.0
    Q_f: np.ndarray | None = None  # None: terminal_factor * Q
    u_reg: float = 1e-3  # errors are in metres, so 1 N^2 of tension costs as much as (31.6 mm)^2
    u_min: tuple = (0.0, 0.0, 0.0, 0.0)
    u_max: tuple = (2.0, 2.0, 2.0, 2.0)
    sqp_max_iter: int = 3
    warm_start: bool = True
    qp_tolerance: float = 1e-8
    trust_step_max: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if np.any(np.asarray(self.u_min) > np.asarray(self.u_max)):
            raise ValueError("u_min must not exceed u_max")
        for name in ("Q", "Q_f"):
            M = getattr(self, name)
            if M is not None:
                M = np.asarray(M, dtype=float)
                if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) < -1e-12:
                    raise ValueError(f"{name} must be symmetric positive semidefinite")
        if self.trust_step_max <= 0:
            raise ValueError("trust_step_max must be positive")

    @classmethod
    def for_plant(cls, cfg: pl.PlantConfig, **kw) -> "MpcConfig":
        kw.setdefault("u_max", (cfg.tension_max,) * pl.N_CABLES)
        return cls(**kw)

    def weights(self, model):
        Q = model.cost_weight() if self.Q is None else np.asarray(self.Q, dtype=float)
        Qf = self.terminal_factor * Q if self.Q_f is None else np.asarray(self.Q_f, dtype=float)
        return Q, Qf

    def replace(self, **kw) -> "MpcConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            d[k] = np.asarray(v).tolist() if isinstance(v, (np.ndarray, tuple)) else v
        return d


@dataclass
class MpcProblem:
    model: object
    x0: np.ndarray
    x_ref: np.ndarray  # (N+1, n)
    u_min: np.ndarray
    u_max: np.ndarray

    @property
    def horizon(self) -> int:
        return self.x_ref.shape[0] - 1

    @property
    def n_state_vars(self) -> int:
        return self.horizon * self.model.n

    @property
    def n_input_vars(self) -> int:
        return self.horizon * self.model.m


@dataclass
class MpcSolution:
    u_seq: np.ndarray  # (N, m)
    x_seq: np.ndarray  # (N+1, n), x_seq[0] = x0
    objective: float
    iterations: int
    kkt_residual: float
    status: str
    active_set: np.ndarray | None = None


def build_problem(model, z_current, z_ref_window, cfg: MpcConfig) -> MpcProblem:
    """Map the measurement and the reference window into the model's coordinates."""
    z_ref_window = np.atleast_2d(np.asarray(z_ref_window, dtype=float))
    if z_ref_window.shape[0] < cfg.horizon + 1:
        raise ValueError(f"reference window too short: {z_ref_window.shape[0]} < {cfg.horizon + 1}")
    x0 = np.asarray(model.encode(np.asarray(z_current, dtype=float)), dtype=float)
    x_ref = np.asarray(model.encode(z_ref_window[: cfg.horizon + 1]), dtype=float)
    return MpcProblem(model, x0, x_ref, np.asarray(cfg.u_min, dtype=float), np.asarray(cfg.u_max, dtype=float))


# -- box-constrained QP -----------------------------------------------------------

class QpFailure(RuntimeError):
    pass


def box_qp(H, g, lo, hi, active=None, tol=1e-12, max_iter=None):
    """Primal active-set solver for ``min 1/2 d'Hd + g'd`` with ``lo <= d <= hi``.

    ``H`` must be positive definite.  ``active`` optionally seeds the working
    set with +1/-1 markers (upper/lower bound) for every coordinate, 0 for
    free.  Returns ``(d, active)``.
    """
    n = g.size
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi + 1e-15):
        raise QpFailure("empty box")
    max_iter = 10 * n + 10 if max_iter is None else max_iter
    W = np.zeros(n, dtype=int) if active is None else np.array(active, dtype=int)
    # make the seed consistent with the box (degenerate bounds are always fixed)
    W[lo >= hi] = -1
    d = np.where(W > 0, hi, np.where(W < 0, lo, 0.0))
    d = np.clip(d, lo, hi)
    for _ in range(max_iter):
        free = W == 0
        fixed = ~free
        target = d.copy()
        target[fixed] = np.where(W[fixed] > 0, hi[fixed], lo[fixed])
        if free.any():
            Hff = H[np.ix_(free, free)]
            rhs = -(g[free] + H[np.ix_(free, fixed)] @ target[fixed])
            try:
                c = np.linalg.cholesky(Hff)
            except np.linalg.LinAlgError as exc:
                raise QpFailure("reduced Hessian not positive definite") from exc
            target[free] = np.linalg.solve(c.T, np.linalg.solve(c, rhs))
        step = target - d
        # ratio test on free variables
        alpha, block = 1.0, -1
        for i in np.flatnonzero(free & (np.abs(step) > 0)):
            if step[i] > 0 and target[i] > hi[i]:
                a = (hi[i] - d[i]) / step[i]
            elif step[i] < 0 and target[i] < lo[i]:
                a = (lo[i] - d[i]) / step[i]
            else:
                continue
            if a < alpha:
                alpha, block = a, i
        d = d + alpha * step
        if block >= 0:
            W[block] = 1 if step[block] > 0 else -1
            d[block] = hi[block] if W[block] > 0 else lo[block]
            continue
        d = np.clip(d, lo, hi)
        grad = H @ d + g
        # multipliers: at a lower bound grad must be >= 0, at an upper bound <= 0
        viol = np.where(W < 0, -grad, np.where(W > 0, grad, 0.0))
        viol[lo >= hi] = 0.0
        worst = int(np.argmax(viol))
        if viol[worst] <= tol * max(1.0, np.max(np.abs(g))):
            return d, W
        W[worst] = 0
    raise QpFailure("active-set iteration limit reached")


# -- SQP ------------------------------------------------------------------------

def _rollout(model, x0, U):
    X = np.empty((U.shape[0] + 1, model.n))
    X[0] = x0
    for k in range(U.shape[0]):
        X[k + 1] = model.step(X[k], U[k])
    return X


def _objective(X, U, x_ref, Q, Qf, u_reg):
    E = X - x_ref
    val = np.einsum("ki,ij,kj->", E[:-1], Q, E[:-1]) + E[-1] @ Qf @ E[-1]
    return float(val + u_reg * np.sum(U * U))


def _condense(model, X, U, x0):
    """Linearize the shooting constraints; returns (Su, sc, defects).

    ``dx_{k+1} = A_k dx_k + B_k du_k + c_k`` with ``c_k = f(x_k, u_k) - x_{k+1}``
    and ``dx_0 = x0 - X_0``; stacked ``dx_{1..N} = Su du + sc``.
    """
    N, m = U.shape
    n = model.n
    A = np.empty((N, n, n))
    B = np.empty((N, n, m))
    c = np.empty((N, n))
    for k in range(N):
        A[k], B[k] = model.step_jacobians(X[k], U[k])
        c[k] = model.step(X[k], U[k]) - X[k + 1]
    Su = np.zeros((N, n, N, m))
    sc = np.empty((N, n))
    prev = x0 - X[0]
    for k in range(N):
        if k:
            Su[k, :, :k] = np.einsum("ij,jbm->ibm", A[k], Su[k - 1, :, :k])
        Su[k, :, k] = B[k]
        prev = A[k] @ prev + c[k]
        sc[k] = prev
    return Su.reshape(N * n, N * m), sc, c


def sqp_solve(problem: MpcProblem, cfg: MpcConfig, warm_start: MpcSolution | None = None) -> MpcSolution:
    model = problem.model
    N, n, m = problem.horizon, model.n, model.m
    Q, Qf = cfg.weights(model)
    x_ref = problem.x_ref
    umin, umax = problem.u_min, problem.u_max
    Wblk = np.zeros((N, n, N, n))
    for k in range(N):
        Wblk[k, :, k] = Q if k < N - 1 else Qf
    Wm = Wblk.reshape(N * n, N * n)

    active = None
    if warm_start is not None:
        U = np.vstack([warm_start.u_seq[1:], warm_start.u_seq[-1:]])
        X = np.vstack([problem.x0, warm_start.x_seq[2:], warm_start.x_seq[-1:]])
        if warm_start.active_set is not None:
            act = warm_start.active_set.reshape(N, m)
            active = np.vstack([act[1:], act[-1:]]).ravel()
    else:
        U = np.zeros((N, m))
        U = np.clip(U, umin, umax)
        X = _rollout(model, problem.x0, U)
    U = np.clip(U, umin, umax)

    status, kkt, iters = ITER_CAPPED, np.inf, 0
    while True:
        Su, sc, defects = _condense(model, X, U, problem.x0)
        e = (X[1:] - x_ref[1:]).ravel() + sc.ravel()
        H = 2 * (Su.T @ Wm @ Su + cfg.u_reg * np.eye(N * m))
        g = 2 * (Su.T @ Wm @ e + cfg.u_reg * U.ravel())
        # KKT residual of the current iterate: shooting defects and projected gradient
        ub = U.ravel()
        lo_b, hi_b = np.tile(umin, N), np.tile(umax, N)
        pg = np.where(ub <= lo_b, np.minimum(g, 0.0), g)
        pg = np.where(ub >= hi_b, np.maximum(pg, 0.0), pg)
        # stationarity is measured as an input-step equivalent (gradient over curvature)
        stat = float(np.max(np.abs(pg))) / max(float(np.max(np.diag(H))), 1e-300)
        kkt = max(float(np.max(np.abs(defects), initial=0.0)), stat)
        if kkt < cfg.qp_tolerance:
            status = CONVERGED
            break
        if iters >= cfg.sqp_max_iter:
            status = ITER_CAPPED
            break
        lo = np.maximum(lo_b - ub, -cfg.trust_step_max)
        hi = np.minimum(hi_b - ub, cfg.trust_step_max)
        du, active = box_qp(H, g, lo, hi, active)
        iters += 1
        dx = (Su @ du + sc.ravel()).reshape(N, n)
        U = np.clip(U + du.reshape(N, m), umin, umax)
        X = np.vstack([problem.x0, X[1:] + dx])
    obj = _objective(X, U, x_ref, Q, Qf, cfg.u_reg)
    return MpcSolution(U, X, obj, iters, kkt, status, active)


# -- receding horizon --------------------------------------------------------------

@dataclass
class StepLog:
    u: np.ndarray
    iterations: int
    status: str
    solve_time: float
    kkt_residual: float


class Controller:
    """Stateful receding-horizon controller (one per control loop)."""

    def __init__(self, model, cfg: MpcConfig):
        if abs(cfg.dt - model.dt) > 1e-12:
            raise ValueError(f"controller dt {cfg.dt} differs from the model's {model.dt}")
        self.model = model
        self.cfg = cfg
        self.solution: MpcSolution | None = None
        self.last_input = np.clip(np.zeros(model.m), cfg.u_min, cfg.u_max)

    def reset(self):
        self.solution = None
        self.last_input = np.clip(np.zeros(self.model.m), self.cfg.u_min, self.cfg.u_max)

    def step(self, z_measured, z_ref_window) -> tuple[np.ndarray, StepLog]:
        cfg = self.cfg
        t0 = time.perf_counter()
        try:
            problem = build_problem(self.model, z_measured, z_ref_window, cfg)
            warm = self.solution if cfg.warm_start else None
            # far from the training data a rollout can overflow; the finiteness check below handles it
            with np.errstate(over="ignore", invalid="ignore"):
                sol = sqp_solve(problem, cfg, warm)
            if not np.all(np.isfinite(sol.u_seq)) or not np.all(np.isfinite(sol.x_seq)):
                raise QpFailure("non-finite iterate")
            self.solution = sol
            u, iters, status, kkt = sol.u_seq[0], sol.iterations, sol.status, sol.kkt_residual
        except (QpFailure, np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
            log.warning("MPC fallback: %s", exc)
            self.solution = None
            u, iters, status, kkt = self.last_input, 0, FALLBACK, np.inf
        u = np.clip(u, cfg.u_min, cfg.u_max)
        self.last_input = u
        return u, StepLog(u, iters, status, time.perf_counter() - t0, kkt)


def mpc_step(controller: Controller, z_measured, z_ref_window):
    """Functional wrapper around :meth:`Controller.step`."""
    return controller.step(z_measured, z_ref_window)


# -- closed loop -------------------------------------------------------------------

CSV_HEADER = ["t", "err_m", "u1", "u2", "u3", "u4", "iters", "status", "solve_time_s"]


@dataclass
class TrackingResult:
    times: np.ndarray
    errors: np.ndarray
    inputs: np.ndarray
    iterations: np.ndarray
    statuses: list
    solve_times: np.ndarray
    meta: dict = field(default_factory=dict)
    observables: np.ndarray | None = None

    def __len__(self):
        return self.times.size

    @property
    def completed(self) -> bool:
        return not self.meta.get("aborted", False)

    def window(self, start_time: float = 0.0) -> np.ndarray:
        return self.times >= start_time - 1e-12

    def summary(self, start_time: float = 0.0) -> dict:
        w = self.window(start_time)
        err = self.errors[w] if w.any() else self.errors
        st = self.solve_times
        return {
            "mean_error_mm": float(np.mean(err) * 1e3),
            "max_error_mm": float(np.max(err) * 1e3),
            "window_start_s": float(start_time),
            "steps": int(len(self)),
            "solve_time_p50_ms": float(np.percentile(st, 50) * 1e3),
            "solve_time_p95_ms": float(np.percentile(st, 95) * 1e3),
            "solve_time_max_ms": float(np.max(st) * 1e3),
            "solve_time_total_s": float(np.sum(st)),
            "iterations_median": float(np.median(self.iterations)),
            "iterations_mean": float(np.mean(self.iterations)),
            "status_counts": {s: self.statuses.count(s) for s in sorted(set(self.statuses))},
            "completed": self.completed,
        }

    def to_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for k in range(len(self)):
                w.writerow([repr(float(self.times[k])), repr(float(self.errors[k])),
                            *[repr(float(v)) for v in self.inputs[k]], int(self.iterations[k]),
                            self.statuses[k], repr(float(self.solve_times[k]))])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrackingResult":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if rows[0] != CSV_HEADER:
            raise ValueError(f"unexpected tracking CSV header in {path}")
        body = rows[1:]
        col = lambda j: np.array([float(r[j]) for r in body])  # noqa: E731
        return cls(col(0), col(1), np.column_stack([col(j) for j in range(2, 6)]),
                   np.array([int(r[6]) for r in body]), [r[7] for r in body], col(8))

    def save_summary(self, path, start_time: float = 0.0):
        data = {"summary": self.summary(start_time), "meta": self.meta}
        Path(path).write_text(json.dumps(data, indent=2) + "\n")


def closed_loop_run(plant_cfg: pl.PlantConfig, controller: Controller, reference: Trajectory,
                    duration: float, dt_inner: float = 1e-3, initial_state=None) -> TrackingResult:
    """Track ``reference`` (observable trajectory) on the simulated plant.

    The plant starts at rest in its equilibrium unless ``initial_state``
    (angles + rates) is given.  Tensions are held for one control period and
    integrated with RK4 at ``dt_inner``.
    """
    cfg = controller.cfg
    dt = cfg.dt
    steps = int(round(duration / dt))
    need = steps + 1 + cfg.horizon
    ref = reference.observables
    if len(ref) < need:
        raise ValueError(f"reference too short: {len(ref)} samples, need {need} (duration + horizon)")
    if abs(reference.dt - dt) > 1e-9:
        raise ValueError("reference sample period must equal the control period")
    if initial_state is None:
        eq = pl.equilibrium(plant_cfg)
        y = np.concatenate([eq, np.zeros_like(eq)])
    else:
        y = np.asarray(initial_state, dtype=float).copy()
    times, errs, us, its, sts, sol_t, obs = [], [], [], [], [], [], []
    aborted = None
    for k in range(steps + 1):
        z = pl.observe_angles(y[: plant_cfg.n_angles], plant_cfg)
        u, info = controller.step(z, ref[k: k + cfg.horizon + 1])
        times.append(k * dt)
        errs.append(float(np.linalg.norm(z[:3] - ref[k, :3])))
        us.append(u)
        its.append(info.iterations)
        sts.append(info.status)
        sol_t.append(info.solve_time)
        obs.append(z)
        if k == steps:
            break
        try:
            y = pl.advance(y[None, :], u[None, :], dt, plant_cfg, dt_inner)[0]
        except Exception as exc:  # plant blowup: keep the partial log
            aborted = str(exc)
            log.error("closed loop aborted at t=%.3f: %s", k * dt, exc)
            break
    meta = {"model": getattr(controller.model, "kind", "?"), "plant_tag": plant_cfg.tag,
            "duration": duration, "warm_start": cfg.warm_start}
    if aborted:
        meta["aborted"] = aborted
    return TrackingResult(np.array(times), np.array(errs), np.array(us), np.array(its), sts,
                          np.array(sol_t), meta, np.array(obs))
