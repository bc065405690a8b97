"""Training corpora, delay embedding and the SVD projection basis."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plant as pl
from .errors import DimensionMismatch, InfeasibleInput, InsufficientSamples, NumericBlowup, RankDeficient

log = logging.getLogger(__name__)

DT_SAMPLE = 0.02
DT_INNER = 1e-3
DECAY_AMPLITUDES = (0.01, 0.02, 0.03)


@dataclass
class Trajectory:
    times: np.ndarray
    observables: np.ndarray
    inputs: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.observables = np.atleast_2d(np.asarray(self.observables, dtype=float))
        if self.inputs is not None:
            self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if self.observables.shape[0] != self.times.size:
            raise DimensionMismatch("observables and times must have matching lengths")
        if self.inputs is not None and self.inputs.shape[0] != self.times.size:
            raise DimensionMismatch("inputs and times must have matching lengths")
        if self.times.size > 1:
            steps = np.diff(self.times)
            if np.any(steps <= 0) or np.ptp(steps) > 1e-9:
                raise ValueError("times must be strictly increasing and uniformly spaced")

    def __len__(self):
        return self.times.size

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def slice(self, start: int, stop: int | None = None) -> "Trajectory":
        u = None if self.inputs is None else self.inputs[start:stop]
        return Trajectory(self.times[start:stop], self.observables[start:stop], u)


@dataclass
class TrajectorySet:
    trajectories: list
    kind: str
    plant_tag: str = "A"
    dt: float = DT_SAMPLE
    seed: int | None = None
    equilibrium: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("a TrajectorySet must not be empty")
        if self.kind not in ("decay", "actuated"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        has_inputs = {t.inputs is not None for t in self.trajectories}
        if has_inputs != {self.kind == "actuated"}:
            raise ValueError("decay sets carry no inputs, actuated sets must carry inputs")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]


def _simulate_batch(y0: np.ndarray, inputs: np.ndarray, cfg: pl.PlantConfig,
                    dt: float = DT_SAMPLE, dt_inner: float = DT_INNER) -> np.ndarray:
    """Simulate a batch of trajectories with zero-order-hold inputs.

    ``y0`` is (B, state_dim) and ``inputs`` (B, T, 4); returns observables
    (B, T, 6) sampled at the start of every hold interval.
    """
    n_batch, n_steps, _ = inputs.shape
    obs = np.empty((n_batch, n_steps, pl.OBS_DIM))
    y = np.array(y0, dtype=float)
    for k in range(n_steps):
        obs[:, k] = pl.observe_angles(y[:, : cfg.n_angles], cfg)
        if k + 1 < n_steps:
            y = pl.advance(y, inputs[:, k], dt, cfg, dt_inner)
    return obs


def decay_initial_angles(cfg: pl.PlantConfig, n_init: int = 18, seed: int = 0,
                         amplitudes=DECAY_AMPLITUDES) -> np.ndarray:
    """Initial joint displacements: bend directions x amplitudes, jittered by ``seed``."""
    rng = np.random.default_rng(seed)
    eq = pl.equilibrium(cfg)
    out = []
    n_amp = len(amplitudes)
    n_dir = max(1, -(-n_init // n_amp))
    for k in range(n_dir):
        phi = 2 * np.pi * k / n_dir + rng.uniform(-0.2, 0.2)
        weights = rng.uniform(0.5, 1.5, cfg.n_links)
        for amp in amplitudes:
            disp = np.empty(cfg.n_angles)
            disp[0::2] = amp * weights * np.cos(phi)
            disp[1::2] = amp * weights * np.sin(phi)
            out.append(eq + disp)
    angles = np.array(out[:n_init])
    if np.any(np.abs(angles) > cfg.angle_limit):
        raise ValueError("initial displacement outside joint limits")
    return angles


def gen_decay_trajectories(cfg: pl.PlantConfig, n_init: int = 18, duration: float = 5.0, seed: int = 0,
                           dt: float = DT_SAMPLE, initial_angles=None, amplitudes=DECAY_AMPLITUDES) -> TrajectorySet:
    """Unforced decays from ``n_init`` seeded displacements around the equilibrium, at rest."""
    if initial_angles is None:
        initial_angles = decay_initial_angles(cfg, n_init, seed, amplitudes)
    initial_angles = np.atleast_2d(initial_angles)
    n_steps = int(round(duration / dt)) + 1
    y0 = np.concatenate([initial_angles, np.zeros_like(initial_angles)], axis=1)
    inputs = np.zeros((len(y0), n_steps, pl.N_CABLES))
    try:
        obs = _simulate_batch(y0, inputs, cfg, dt)
    except NumericBlowup as exc:
        raise NumericBlowup(f"numeric blowup while generating decay trajectories (batch of {len(y0)})") from exc
    times = np.arange(n_steps) * dt
    trajs = [Trajectory(times, o) for o in obs]
    return TrajectorySet(trajs, "decay", cfg.tag, dt, seed, pl.equilibrium_observable(cfg))


def raised_sine_inputs(amplitude: float, period: float, times: np.ndarray, phases=None,
                       ramp: float = 0.5) -> np.ndarray:
    """Raised-sine tension per cable (T, 4) with a smoothstep start-up envelope.

    ``phases`` defaults to a quarter-period stagger across the four cables.
    """
    if phases is None:
        phases = np.arange(pl.N_CABLES) * np.pi / 2
    s = np.clip(times / ramp, 0.0, 1.0) if ramp > 0 else np.ones_like(times)
    envelope = s * s * (3 - 2 * s)
    wave = 0.5 * (1 - np.cos(2 * np.pi * times[:, None] / period - np.asarray(phases)[None, :]))
    return amplitude * envelope[:, None] * wave


def gen_actuated_trajectories(cfg: pl.PlantConfig, amplitudes=(0.04, 0.08, 0.12), periods=(0.6, 1.2, 2.5, 5.0),
                              duration: float = 8.0, seed: int = 0, dt: float = DT_SAMPLE) -> TrajectorySet:
    """Periodic actuation for every amplitude x period pair, starting at equilibrium.

    Cable phases are staggered by a quarter period plus a seeded jitter of up
    to +-60 degrees, so antagonistic pairs are not exactly in anti-phase and
    the common-mode tension varies (otherwise it is constant per trajectory
    and aliases with a bias).
    """
    amplitudes = [float(a) for a in amplitudes]
    if any(a < 0 or a > cfg.tension_max for a in amplitudes):
        raise InfeasibleInput("infeasible input: amplitude outside [0, tension_max]")
    rng = np.random.default_rng(seed)
    n_steps = int(round(duration / dt)) + 1
    times = np.arange(n_steps) * dt
    eq = pl.equilibrium(cfg)
    combos = [(a, p) for a in amplitudes for p in periods]
    inputs = np.empty((len(combos), n_steps, pl.N_CABLES))
    for i, (a, p) in enumerate(combos):
        phases = np.arange(pl.N_CABLES) * np.pi / 2 + rng.uniform(-np.pi / 3, np.pi / 3, pl.N_CABLES)
        inputs[i] = raised_sine_inputs(a, p, times, phases)
    y0 = np.tile(np.concatenate([eq, np.zeros_like(eq)]), (len(combos), 1))
    obs = _simulate_batch(y0, inputs, cfg, dt)
    trajs = [Trajectory(times, o, u) for o, u in zip(obs, inputs)]
    meta = {"amplitudes": amplitudes, "periods": [float(p) for p in periods]}
    return TrajectorySet(trajs, "actuated", cfg.tag, dt, seed, pl.observe_angles(eq, cfg), meta)


@dataclass
class EmbeddedSnapshot:
    columns: np.ndarray
    delay: int
    time_index: np.ndarray
    traj_index: int = 0

    @property
    def dim(self) -> int:
        return self.columns.shape[0]


def delay_embed(traj: Trajectory | np.ndarray, d: int = 1, traj_index: int = 0) -> EmbeddedSnapshot:
    """Stack ``[z(k+d); z(k+d-1); ...; z(k)]`` (newest first) as columns."""
    z = traj.observables if isinstance(traj, Trajectory) else np.atleast_2d(np.asarray(traj, dtype=float))
    length = z.shape[0]
    if d < 0:
        raise ValueError("delay must be non-negative")
    if length <= d:
        raise InsufficientSamples(f"insufficient samples: need more than {d}, got {length}")
    n_cols = length - d
    blocks = [z[d - lag: d - lag + n_cols].T for lag in range(d + 1)]
    return EmbeddedSnapshot(np.vstack(blocks), d, np.arange(d, length), traj_index)


@dataclass
class ProjectionBasis:
    modes: np.ndarray
    singular_values: np.ndarray
    energy_fraction: float

    def __post_init__(self):
        self.modes = np.ascontiguousarray(self.modes, dtype=float)
        self.singular_values = np.asarray(self.singular_values, dtype=float)

    @property
    def n(self) -> int:
        return self.modes.shape[1]

    @property
    def dim(self) -> int:
        return self.modes.shape[0]


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def svd_modes(snapshots, n: int = 3) -> ProjectionBasis:
    """Leading ``n`` left singular vectors of the concatenated snapshot columns.

    No mean is subtracted: observables are expected to be centered on the
    equilibrium already.
    """
    if isinstance(snapshots, EmbeddedSnapshot):
        snapshots = [snapshots]
    dims = {s.dim for s in snapshots}
    if len(dims) != 1:
        raise DimensionMismatch("all snapshots must share the same dimension")
    data = np.hstack([s.columns for s in snapshots])
    if data.shape[1] < n:
        raise RankDeficient(f"rank deficient: {data.shape[1]} columns for {n} modes")
    u, s, _ = np.linalg.svd(data, full_matrices=False)
    tol = s[0] * max(data.shape) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    if n > rank:
        raise RankDeficient(f"rank deficient: requested {n} modes, data rank {rank}")
    energy = float(np.sum(s[:n] ** 2) / np.sum(s**2))
    return ProjectionBasis(_fix_signs(u[:, :n]), s, energy)


def project(snapshot: EmbeddedSnapshot | np.ndarray, basis: ProjectionBasis) -> np.ndarray:
    """Reduced coordinates ``X = V^T T`` (n, columns)."""
    cols = snapshot.columns if isinstance(snapshot, EmbeddedSnapshot) else np.asarray(snapshot, dtype=float)
    if cols.shape[0] != basis.dim:
        raise DimensionMismatch(f"dimension mismatch: snapshot {cols.shape[0]} vs basis {basis.dim}")
    return basis.modes.T @ cols


def center(traj: Trajectory, equilibrium: np.ndarray) -> Trajectory:
    return Trajectory(traj.times, traj.observables - equilibrium, traj.inputs)


# -- persistence -----------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x)) if np.isfinite(x) else str(x)


def save_trajectory_set(ts: TrajectorySet, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, traj in enumerate(ts.trajectories):
        name = f"traj_{i:03d}.csv"
        header = ["t"] + [f"z{j + 1}" for j in range(pl.OBS_DIM)]
        if traj.inputs is not None:
            header += [f"u{j + 1}" for j in range(pl.N_CABLES)]
        with open(directory / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(len(traj)):
                row = [traj.times[k], *traj.observables[k]]
                if traj.inputs is not None:
                    row += list(traj.inputs[k])
                writer.writerow([_fmt(v) for v in row])
        files.append(name)
    manifest = {
        "kind": ts.kind,
        "seed": ts.seed,
        "plant_tag": ts.plant_tag,
        "dt": ts.dt,
        "equilibrium": None if ts.equilibrium is None else [float(v) for v in ts.equilibrium],
        "files": files,
        "meta": ts.meta,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_trajectory_set(directory) -> TrajectorySet:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    trajs = []
    for name in manifest["files"]:
        with open(directory / name, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
        n_obs = pl.OBS_DIM
        inputs = body[:, 1 + n_obs:] if len(header) > 1 + n_obs else None
        trajs.append(Trajectory(body[:, 0], body[:, 1:1 + n_obs], inputs))
    eq = manifest.get("equilibrium")
    return TrajectorySet(trajs, manifest["kind"], manifest["plant_tag"], manifest["dt"], manifest["seed"],
                         None if eq is None else np.array(eq), manifest.get("meta", {}))
