"""Comparison models: a Fourier-lifted linear Koopman model and a constant-curvature model.

Both expose the same duck-typed interface as :class:`ssmpc.ssm.SsmModel`
(``n``, ``m``, ``dt``, ``encode``, ``decode``, ``step``, ``step_jacobians``,
``cost_weight``, ``predict``) so the MPC layer does not care which one it runs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datagen as dg
from .errors import DimensionMismatch, IllPosed, Unidentifiable
from .ssm import ridge_solve

LIFT_DIM = 10
N_FOURIER = 2


# -- Koopman / EDMD --------------------------------------------------------------

def fourier_lift(z, omegas) -> np.ndarray:
    """``[z; sin(w1.z); cos(w1.z); sin(w2.z); cos(w2.z)]`` for centered ``z``.

    ``z`` is (6,) or a batch (..., 6); ``omegas`` is (2, 6).
    """
    z = np.asarray(z, dtype=float)
    phase = z @ np.asarray(omegas, dtype=float).T
    feats = np.stack([np.sin(phase), np.cos(phase)], axis=-1).reshape(z.shape[:-1] + (-1,))
    return np.concatenate([z, feats], axis=-1)


def fourier_lift_jacobian(z, omegas) -> np.ndarray:
    """d lift / d z at a single centered observable: (10, 6)."""
    z = np.asarray(z, dtype=float)
    omegas = np.asarray(omegas, dtype=float)
    phase = omegas @ z
    rows = [np.eye(z.size)]
    for w, p in zip(omegas, phase):
        rows.append(np.cos(p) * w[None, :])
        rows.append(-np.sin(p) * w[None, :])
    return np.vstack(rows)


def lift_frequencies(Z: np.ndarray, n_freq: int = N_FOURIER) -> np.ndarray:
    """Leading right singular directions of the sample matrix, scaled by pi / (2 radius).

    ``Z`` holds centered observables as rows.  The scaling keeps the phase
    of every training sample inside [-pi/2, pi/2].
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    _, _, vt = np.linalg.svd(Z, full_matrices=False)
    vt = dg._fix_signs(vt[:n_freq].T).T
    radius = float(np.max(np.linalg.norm(Z, axis=1)))
    if radius == 0:
        raise IllPosed("ill-posed: training observables have zero spread")
    return vt * (np.pi / (2 * radius))


@dataclass
class KoopmanModel:
    """Linear model ``psi+ = A psi + B u`` on Fourier-lifted observables.

    Internally observables are centered on ``equilibrium_observable`` and
    scaled by ``obs_scale`` exactly like the SSM model, so MPC weights are in
    comparable units.
    """

    omegas: np.ndarray
    A: np.ndarray
    B: np.ndarray
    equilibrium_observable: np.ndarray
    dt_train: float
    ridge_lambda: float = 1e-6
    obs_scale: float = 1e3

    kind = "koopman"

    def __post_init__(self):
        self.omegas = np.ascontiguousarray(self.omegas, dtype=float)
        self.A = np.ascontiguousarray(self.A, dtype=float)
        self.B = np.ascontiguousarray(self.B, dtype=float)
        self.equilibrium_observable = np.ascontiguousarray(self.equilibrium_observable, dtype=float)
        p = 6 + 2 * self.omegas.shape[0]
        if self.A.shape != (p, p) or self.B.shape[0] != p:
            raise DimensionMismatch(f"dimension mismatch: A {self.A.shape}, B {self.B.shape}, lift {p}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def dt(self) -> float:
        return self.dt_train

    def cost_weight(self) -> np.ndarray:
        """Penalize only the six raw observable coordinates of the lift (in metres)."""
        w = np.zeros(self.n)
        w[:6] = 1.0 / self.obs_scale**2
        return np.diag(w)

    def lift(self, zc) -> np.ndarray:
        return fourier_lift(zc, self.omegas)

    def encode(self, z) -> np.ndarray:
        zc = (np.asarray(z, dtype=float) - self.equilibrium_observable) * self.obs_scale
        return self.lift(zc)

    def decode(self, psi) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        return psi[..., :6] / self.obs_scale + self.equilibrium_observable

    def step(self, psi, u, dt=None) -> np.ndarray:
        return self.A @ np.asarray(psi, dtype=float) + self.B @ np.asarray(u, dtype=float)

    def step_jacobians(self, psi=None, u=None, dt=None):
        return self.A, self.B

    def predict(self, z0, u_seq, dt=None) -> np.ndarray:
        u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
        psi = np.empty((len(u_seq) + 1, self.n))
        psi[0] = self.encode(z0)
        for k, u in enumerate(u_seq):
            psi[k + 1] = self.step(psi[k], u)
        return self.decode(psi)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "schema_version": 1,
            "lift": "fourier-v1",
            "omegas": self.omegas.tolist(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "equilibrium_observable": self.equilibrium_observable.tolist(),
            "dt_train": self.dt_train,
            "ridge_lambda": self.ridge_lambda,
            "obs_scale": self.obs_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KoopmanModel":
        if d.get("kind") != cls.kind:
            raise ValueError(f"not a Koopman model file (kind={d.get('kind')!r})")
        return cls(np.array(d["omegas"]), np.array(d["A"]), np.array(d["B"]),
                   np.array(d["equilibrium_observable"]), d["dt_train"], d["ridge_lambda"], d["obs_scale"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def fit_lifted_linear(Psi: np.ndarray, Psi_next: np.ndarray, U: np.ndarray, lam: float = 1e-6):
    """Ridge least squares for ``Psi_next = A Psi + B U`` (samples as columns)."""
    Psi = np.atleast_2d(np.asarray(Psi, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if Psi.shape[1] != U.shape[1] or Psi_next.shape != Psi.shape:
        raise DimensionMismatch("lifted pairs and inputs must be aligned")
    W = ridge_solve(np.vstack([Psi, U]), np.asarray(Psi_next, dtype=float), lam)
    p = Psi.shape[0]
    return W[:, :p], W[:, p:]


def fit_edmd(trajectories: dg.TrajectorySet, lam: float = 1e-6, obs_scale: float = 1e3,
             equilibrium=None, n_freq: int = N_FOURIER, omegas=None) -> KoopmanModel:
    """EDMD with control on consecutive lifted pairs of actuated trajectories.

    ``omegas`` fixes the lift frequencies (in centered, scaled units); by
    default they come from :func:`lift_frequencies` on the training data.
    """
    if trajectories.kind != "actuated":
        raise ValueError("EDMD needs actuated trajectories")
    if equilibrium is None:
        equilibrium = trajectories.equilibrium
    if equilibrium is None:
        equilibrium = np.mean([t.observables[0] for t in trajectories], axis=0)
    eq = np.asarray(equilibrium, dtype=float)
    centered = [(t.observables - eq) * obs_scale for t in trajectories]
    if omegas is None:
        omegas = lift_frequencies(np.vstack(centered), n_freq)
    P, Pn, U = [], [], []
    for zc, t in zip(centered, trajectories):
        psi = fourier_lift(zc, omegas)
        P.append(psi[:-1].T)
        Pn.append(psi[1:].T)
        U.append(t.inputs[:-1].T)
    A, B = fit_lifted_linear(np.hstack(P), np.hstack(Pn), np.hstack(U), lam)
    return KoopmanModel(omegas, A, B, eq, trajectories.dt, lam, obs_scale)


# -- constant curvature -----------------------------------------------------------

def _arc_offsets(kappa, s):
    """Planar offset ``(1 - cos ks)/k`` and axial ``sin(ks)/k`` with the k -> 0 limit."""
    kappa = np.asarray(kappa, dtype=float)
    small = np.abs(kappa * s) < 1e-6
    ks = kappa * s
    safe = np.where(small, 1.0, kappa)
    rho = np.where(small, kappa * s * s / 2 - kappa**3 * s**4 / 24, (1 - np.cos(ks)) / safe)
    axial = np.where(small, s - kappa**2 * s**3 / 6, np.sin(ks) / safe)
    return rho, axial


def cc_forward_kinematics(k_alpha, k_beta, arc_length: float) -> np.ndarray:
    """Tip position of a constant-curvature arc; vectorized over curvature arrays."""
    k_alpha = np.asarray(k_alpha, dtype=float)
    k_beta = np.asarray(k_beta, dtype=float)
    kappa = np.hypot(k_alpha, k_beta)
    phi = np.arctan2(k_beta, k_alpha)
    rho, axial = _arc_offsets(kappa, arc_length)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), axial], axis=-1)


def cc_kinematics_jacobian(k_alpha: float, k_beta: float, arc_length: float, eps: float = 1e-7) -> np.ndarray:
    """d tip / d (k_alpha, k_beta) by central differences; (3, 2)."""
    cols = []
    for d in (np.array([eps, 0.0]), np.array([0.0, eps])):
        hi = cc_forward_kinematics(k_alpha + d[0], k_beta + d[1], arc_length)
        lo = cc_forward_kinematics(k_alpha - d[0], k_beta - d[1], arc_length)
        cols.append((hi - lo) / (2 * eps))
    return np.stack(cols, axis=1)


def cc_curvature_from_tip(tip, arc_length: float, tol: float = 1e-9) -> np.ndarray:
    """Invert :func:`cc_forward_kinematics` from the planar tip offset.

    Bisection on the bend magnitude over the monotone branch of
    ``rho(k) = (1 - cos kL)/k``; the bend plane is ``atan2(y, x)``.  Works on
    a single tip (3,) or a batch (..., 3) and returns (..., 2).
    """
    tip = np.asarray(tip, dtype=float)
    rho = np.hypot(tip[..., 0], tip[..., 1])
    phi = np.arctan2(tip[..., 1], tip[..., 0])
    lo = np.zeros_like(rho)
    hi = np.full_like(rho, 2.3311 / arc_length)  # rho(k) peaks at kL ~ 2.3311
    rho_max = _arc_offsets(hi, arc_length)[0]
    rho = np.minimum(rho, rho_max)
    n_iter = int(np.ceil(np.log2(max(hi.max(initial=1.0), 1.0) / tol))) + 1
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        below = _arc_offsets(mid, arc_length)[0] < rho
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    kappa = 0.5 * (lo + hi)
    return np.stack([kappa * np.cos(phi), kappa * np.sin(phi)], axis=-1)


@dataclass
class CcModel:
    """Constant-curvature kinematics driven by a first-order curvature lag.

    ``kappa+ = kappa + a (G u - kappa)`` with ``a = 1 - exp(-dt / tau)``, the
    exact zero-order-hold discretization of ``tau kappa' = G u - kappa``.
    No gravity offset is modeled: that is the intended structural mismatch
    of this baseline on a sagging plant.
    """

    gain: np.ndarray
    time_constant: float
    arc_length: float
    dt_train: float
    feature_offset: float = 0.001
    obs_scale: float = 1e3

    kind = "cc"

    def __post_init__(self):
        self.gain = np.ascontiguousarray(self.gain, dtype=float)
        if self.gain.shape[0] != 2:
            raise DimensionMismatch("CC gain must have two rows (k_alpha, k_beta)")
        if not self.time_constant > 0:
            raise ValueError("time_constant must be positive")

    @property
    def n(self) -> int:
        return 2

    @property
    def m(self) -> int:
        return self.gain.shape[1]

    @property
    def dt(self) -> float:
        return self.dt_train

    @property
    def lag(self) -> float:
        return float(1.0 - np.exp(-self.dt_train / self.time_constant))

    def cost_weight(self) -> np.ndarray:
        """Curvature weight equivalent to tip displacement in metres (small-bend slope L^2/2)."""
        return (self.arc_length**2 / 2) ** 2 * np.eye(2)

    def encode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return cc_curvature_from_tip(z[..., :3], self.arc_length)

    def decode(self, kappa) -> np.ndarray:
        kappa = np.asarray(kappa, dtype=float)
        p1 = cc_forward_kinematics(kappa[..., 0], kappa[..., 1], self.arc_length)
        p2 = cc_forward_kinematics(kappa[..., 0], kappa[..., 1], self.arc_length - self.feature_offset)
        return np.concatenate([p1, p2], axis=-1)

    def step(self, kappa, u, dt=None) -> np.ndarray:
        a = self.lag
        return np.asarray(kappa, dtype=float) + a * (self.gain @ np.asarray(u, dtype=float) - kappa)

    def step_jacobians(self, kappa=None, u=None, dt=None):
        a = self.lag
        return (1 - a) * np.eye(2), a * self.gain

    def predict(self, z0, u_seq, dt=None) -> np.ndarray:
        u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
        k = np.empty((len(u_seq) + 1, 2))
        k[0] = self.encode(z0)
        for i, u in enumerate(u_seq):
            k[i + 1] = self.step(k[i], u)
        return self.decode(k)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "schema_version": 1,
            "gain": self.gain.tolist(),
            "time_constant": self.time_constant,
            "arc_length": self.arc_length,
            "dt_train": self.dt_train,
            "feature_offset": self.feature_offset,
            "obs_scale": self.obs_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CcModel":
        if d.get("kind") != cls.kind:
            raise ValueError(f"not a constant-curvature model file (kind={d.get('kind')!r})")
        return cls(np.array(d["gain"]), d["time_constant"], d["arc_length"], d["dt_train"],
                   d["feature_offset"], d["obs_scale"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def fit_cc_params(trajectories: dg.TrajectorySet, arc_length: float, feature_offset: float = 0.001) -> CcModel:
    """Curvatures from measured tips, then a joint least-squares fit of lag and gain.

    Per-sample curvatures come from :func:`cc_curvature_from_tip`.  The lag
    model ``dk = -a k + H u`` is linear in ``(a, H)`` so one least-squares
    problem over both curvature components gives the shared lag ``a`` and
    ``H``; then ``G = H / a`` and ``tau = -dt / log(1 - a)``.
    """
    if trajectories.kind != "actuated":
        raise ValueError("the constant-curvature fit needs actuated trajectories")
    dt = trajectories.dt
    K, Kn, U = [], [], []
    for t in trajectories:
        kap = cc_curvature_from_tip(t.observables[:, :3], arc_length)
        K.append(kap[:-1])
        Kn.append(kap[1:])
        U.append(t.inputs[:-1])
    K, Kn, U = np.vstack(K), np.vstack(Kn), np.vstack(U)
    if np.max(np.var(U, axis=0)) <= 1e-14 * max(1.0, float(np.max(np.abs(U))) ** 2):
        raise Unidentifiable("unidentifiable: zero-variance inputs, gain cannot be fitted")
    m = U.shape[1]
    # unknowns: [a, H[0, :], H[1, :]]
    rows = len(K)
    M = np.zeros((2 * rows, 1 + 2 * m))
    M[:rows, 0] = -K[:, 0]
    M[rows:, 0] = -K[:, 1]
    M[:rows, 1:1 + m] = U
    M[rows:, 1 + m:] = U
    rhs = np.concatenate([Kn[:, 0] - K[:, 0], Kn[:, 1] - K[:, 1]])
    sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    a = float(sol[0])
    if not 0 < a < 1:
        raise Unidentifiable(f"unidentifiable: fitted lag factor {a:.3g} outside (0, 1)")
    H = sol[1:].reshape(2, m)
    tau = -dt / np.log(1 - a)
    return CcModel(H / a, float(tau), arc_length, dt, feature_offset)
