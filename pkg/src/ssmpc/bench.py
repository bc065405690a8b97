"""Tracking benchmark: reference synthesis, controller comparison, reports.

A benchmark run is a pure function of its :class:`BenchConfig`.  Training
data, held-out data and the plant are all generated from the configured
seed, and the three controllers share the plant, reference, horizon, bounds
and input weight.  Only the ``solve_time_s`` column of the tracking CSVs
depends on the machine.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import datagen as dg
from . import mpc
from . import plant as pl
from . import ssm
from .errors import PredictionBlowup

log = logging.getLogger(__name__)

CONTROLLERS = ("SSM-MPC", "LK-MPC", "CC-MPC")
MODEL_KINDS = {"SSM-MPC": "ssm", "LK-MPC": "koopman", "CC-MPC": "cc"}
CC_OVER_SSM_MIN = 1.5
MATCHED_BUDGET = 1.6


def _unit(v) -> tuple:
    v = np.asarray(v, dtype=float)
    nrm = np.linalg.norm(v)
    if v.shape != (3,) or nrm == 0:
        raise ValueError("directions must be non-zero 3-vectors")
    return tuple(float(c) for c in v / nrm)


@dataclass(frozen=True)
class ReferenceSpec:
    """Respiration plus heartbeat tip motion around the equilibrium.

    Amplitudes are in metres, frequencies in Hz and phases in radians.
    Directions are normalized on construction.
    """
    resp_amplitude: float = 3e-3
    resp_frequency: float = 0.25
    resp_direction: tuple = (1.0, 1.0, 0.0)
    resp_phase: float = 0.0
    card_amplitude: float = 0.5e-3
    card_frequency: float = 1.2
    card_direction: tuple = (1.0, -1.0, 0.0)
    card_phase: float = 0.0
    duration: float = 16.0
    transient_periods: float = 2.0

    def __post_init__(self):
        if self.resp_frequency <= 0 or self.card_frequency <= 0:
            raise ValueError("reference frequencies must be positive")
        if self.resp_amplitude < 0 or self.card_amplitude < 0:
            raise ValueError("reference amplitudes must be non-negative")
        if self.duration <= 0 or self.transient_periods < 0:
            raise ValueError("duration must be positive and transient_periods non-negative")
        object.__setattr__(self, "resp_direction", _unit(self.resp_direction))
        object.__setattr__(self, "card_direction", _unit(self.card_direction))

    @property
    def steady_state_start(self) -> float:
        """Start of the scoring window: the first respiratory periods are transient."""
        return self.transient_periods / self.resp_frequency

    def offset(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        resp = self.resp_amplitude * np.sin(2 * np.pi * self.resp_frequency * t + self.resp_phase)
        card = self.card_amplitude * np.sin(2 * np.pi * self.card_frequency * t + self.card_phase)
        return np.multiply.outer(resp, self.resp_direction) + np.multiply.outer(card, self.card_direction)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def make_reference(spec: ReferenceSpec, equilibrium, dt: float = dg.DT_SAMPLE, lookahead: int = 0) -> dg.Trajectory:
    """Observable reference: both tracked points follow the same tip offset.

    ``equilibrium`` is either the 3-vector tip position or the full 6-vector
    equilibrium observable; with only the tip, the second point is placed on
    the tip as well.  The trajectory has ``duration/dt + 1 + lookahead``
    samples so a controller can preview ``lookahead`` steps past the end.
    """
    eq = np.asarray(equilibrium, dtype=float)
    if eq.shape == (3,):
        eq = np.concatenate([eq, eq])
    if eq.shape != (6,):
        raise ValueError("equilibrium must be a tip 3-vector or a 6-vector observable")
    n = int(round(spec.duration / dt)) + 1 + int(lookahead)
    t = np.arange(n) * dt
    off = spec.offset(t)
    return dg.Trajectory(t, np.hstack([eq[:3] + off, eq[3:] + off]))


@dataclass(frozen=True)
class TrainSettings:
    """Data generation and fitting options shared by all three models."""
    n_modes: int = 3
    delay: int = 1
    n_r: int = 3
    n_v: int = 1
    ridge_lambda: float = 1e-6
    map_lambda: float = 100.0
    koopman_lambda: float = 1e-6
    decay_count: int = 18
    decay_duration: float = 5.0
    actuated_amplitudes: tuple = (0.04, 0.08, 0.12)
    actuated_periods: tuple = (0.6, 1.2, 2.5, 5.0)
    actuated_duration: float = 8.0
    heldout_amplitudes: tuple = (0.06, 0.1)
    heldout_periods: tuple = (0.9, 3.0)
    heldout_decay_count: int = 6
    heldout_seed_offset: int = 7
    prediction_horizon: float = 2.0

    def __post_init__(self):
        for name in ("actuated_amplitudes", "actuated_periods", "heldout_amplitudes", "heldout_periods"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class BenchConfig:
    plant: pl.PlantConfig = field(default_factory=pl.PlantConfig)
    mpc: mpc.MpcConfig | None = None  # None: MpcConfig.for_plant(plant)
    reference: ReferenceSpec = field(default_factory=ReferenceSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    seed: int = 0

    def mpc_config(self) -> mpc.MpcConfig:
        return mpc.MpcConfig.for_plant(self.plant) if self.mpc is None else self.mpc

    def to_dict(self) -> dict:
        return {"plant": self.plant.to_dict(), "mpc": self.mpc_config().to_dict(),
                "reference": self.reference.to_dict(), "train": self.train.to_dict(), "seed": self.seed}

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **kw) -> "BenchConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(kw)
        return BenchConfig(**data)


_SECTIONS = {"plant": pl.PlantConfig, "mpc": mpc.MpcConfig, "reference": ReferenceSpec, "train": TrainSettings}


def config_from_flat(flat: dict) -> BenchConfig:
    """Build a config from flat ``section.field`` keys (plus ``seed``).

    Example: ``{"seed": 3, "plant.joint_damping": [0.002, 0.01],
    "mpc.horizon": 20, "reference.duration": 12}``.  Unknown keys raise.
    """
    parts = {name: {} for name in _SECTIONS}
    seed = 0
    for key, value in flat.items():
        if key == "seed":
            seed = int(value)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ValueError(f"unknown config key {key!r}")
        known = {f.name for f in fields(_SECTIONS[section])}
        if name not in known:
            raise ValueError(f"unknown config key {key!r}")
        parts[section][name] = tuple(value) if isinstance(value, list) else value
    plant = pl.PlantConfig(**parts["plant"])
    mpc_cfg = mpc.MpcConfig.for_plant(plant, **parts["mpc"]) if parts["mpc"] else None
    return BenchConfig(plant, mpc_cfg, ReferenceSpec(**parts["reference"]), TrainSettings(**parts["train"]), seed)


def load_config(path) -> BenchConfig:
    path = Path(path)
    try:
        flat = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(flat, dict):
        raise ValueError(f"config {path} must hold a flat JSON object")
    return config_from_flat(flat)


# ----------------------------------------------------------------------------
# data and models

@dataclass
class Datasets:
    decay: dg.TrajectorySet
    actuated: dg.TrajectorySet
    heldout_actuated: dg.TrajectorySet
    heldout_decay: dg.TrajectorySet


def generate_datasets(cfg: BenchConfig) -> Datasets:
    tr, p, seed = cfg.train, cfg.plant, cfg.seed
    vseed = seed + tr.heldout_seed_offset
    return Datasets(
        dg.gen_decay_trajectories(p, n_init=tr.decay_count, duration=tr.decay_duration, seed=seed),
        dg.gen_actuated_trajectories(p, tr.actuated_amplitudes, tr.actuated_periods, tr.actuated_duration, seed=seed),
        dg.gen_actuated_trajectories(p, tr.heldout_amplitudes, tr.heldout_periods, tr.actuated_duration, seed=vseed),
        dg.gen_decay_trajectories(p, n_init=tr.heldout_decay_count, duration=tr.decay_duration, seed=vseed),
    )


def train_models(cfg: BenchConfig, data: Datasets) -> dict:
    """Fit the SSM, Koopman and constant-curvature models on the same data."""
    tr = cfg.train
    return {
        "SSM-MPC": ssm.train_ssm(data.decay, data.actuated, n=tr.n_modes, delay=tr.delay, n_r=tr.n_r,
                                 n_v=tr.n_v, lam=tr.ridge_lambda, map_lambda=tr.map_lambda),
        "LK-MPC": bl.fit_edmd(data.actuated, lam=tr.koopman_lambda),
        "CC-MPC": bl.fit_cc_params(data.actuated, cfg.plant.total_length, cfg.plant.feature_offset),
    }


def tip_nrmse(pred, true) -> float:
    """Tip-position RMSE normalized by the RMS spread of the true tip."""
    pred, true = np.asarray(pred), np.asarray(true)
    err = np.sum((pred[:, :3] - true[:, :3]) ** 2, axis=1)
    spread = np.sum((true[:, :3] - true[:, :3].mean(axis=0)) ** 2, axis=1)
    return float(np.sqrt(np.mean(err) / np.mean(spread)))


def open_loop_windows(model, trajectories, steps: int, per_trajectory: int | None = None) -> list[float]:
    """NRMSE of back-to-back ``steps``-long predictions along each trajectory.

    Every window starts from the recorded observable and replays the
    recorded inputs (zeros for unforced data), so all models see identical
    initial states and input sequences.  ``per_trajectory`` keeps only the
    first few windows of each trajectory.
    """
    scores = []
    for t in trajectories:
        for start in list(range(0, len(t) - steps, steps))[:per_trajectory]:
            u = t.inputs[start: start + steps] if t.inputs is not None else np.zeros((steps, pl.N_CABLES))
            try:
                pred = model.predict(t.observables[start], u)
                scores.append(tip_nrmse(pred, t.observables[start: start + steps + 1]))
            except (ArithmeticError, PredictionBlowup, np.linalg.LinAlgError) as exc:
                log.warning("open-loop prediction failed: %s", exc)
                scores.append(float("inf"))
    return scores


def evaluate_open_loop(model, data: Datasets, horizon: float) -> dict:
    steps = int(round(horizon / data.heldout_actuated.dt))
    act = open_loop_windows(model, data.heldout_actuated, steps)
    # a decay has settled after the first window, where the tiny spread makes NRMSE meaningless
    dec = open_loop_windows(model, data.heldout_decay, steps, per_trajectory=1)
    return {"actuated_nrmse_mean": float(np.mean(act)), "actuated_nrmse_max": float(np.max(act)),
            "decay_nrmse_mean": float(np.mean(dec)), "decay_nrmse_max": float(np.max(dec)),
            "windows": len(act) + len(dec), "horizon_s": horizon}


# ----------------------------------------------------------------------------
# report

@dataclass
class BenchmarkReport:
    plant_tag: str
    config_digest: str
    controllers: dict = field(default_factory=dict)  # name -> summary (or {"error": ...})
    open_loop: dict = field(default_factory=dict)  # name -> NRMSE figures
    extras: dict = field(default_factory=dict)
    runtime_s: float = 0.0
    runs: dict = field(default_factory=dict, compare=False, repr=False)  # name -> TrackingResult

    def mean_error(self, name: str) -> float:
        entry = self.controllers.get(name, {})
        return float(entry.get("mean_error_mm", np.inf))

    def ordering_holds(self) -> bool:
        """SSM below LK below CC, and CC at least 1.5 times SSM."""
        s, k, c = (self.mean_error(n) for n in CONTROLLERS)
        return bool(s < k < c and c >= CC_OVER_SSM_MIN * s)

    def inputs_within_bounds(self, u_min, u_max) -> bool:
        return all(np.all(r.inputs >= np.asarray(u_min)) and np.all(r.inputs <= np.asarray(u_max))
                   for r in self.runs.values())

    def to_dict(self) -> dict:
        return {"plant_tag": self.plant_tag, "config_digest": self.config_digest, "controllers": self.controllers,
                "open_loop": self.open_loop, "extras": self.extras, "runtime_s": self.runtime_s}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkReport":
        return cls(d["plant_tag"], d["config_digest"], d.get("controllers", {}), d.get("open_loop", {}),
                   d.get("extras", {}), float(d.get("runtime_s", 0.0)))


def _track(cfg: BenchConfig, model, name: str, report: BenchmarkReport, plant_cfg=None, key=None):
    plant_cfg = cfg.plant if plant_cfg is None else plant_cfg
    key = name if key is None else key
    mcfg = cfg.mpc_config()
    ref = make_reference(cfg.reference, pl.equilibrium_observable(plant_cfg), mcfg.dt, mcfg.horizon)
    try:
        run = mpc.closed_loop_run(plant_cfg, mpc.Controller(model, mcfg), ref, cfg.reference.duration)
    except Exception as exc:  # recorded per controller; the report is still written
        log.error("%s failed: %s", key, exc)
        report.controllers[key] = {"error": f"{type(exc).__name__}: {exc}", "config_digest": cfg.digest()}
        return None
    summary = run.summary(cfg.reference.steady_state_start)
    summary["config_digest"] = cfg.digest()
    report.controllers[key] = summary
    report.runs[key] = run
    return run


def run_benchmark(cfg: BenchConfig | str | Path | None = None, models: dict | None = None,
                  data: Datasets | None = None, open_loop: bool = True) -> BenchmarkReport:
    """Three-way tracking comparison plus held-out open-loop accuracy."""
    if cfg is None:
        cfg = BenchConfig()
    elif not isinstance(cfg, BenchConfig):
        cfg = load_config(cfg)
    t0 = time.perf_counter()
    if models is None or (open_loop and data is None):
        data = generate_datasets(cfg) if data is None else data
    if models is None:
        models = train_models(cfg, data)
    report = BenchmarkReport(cfg.plant.tag, cfg.digest())
    for name in CONTROLLERS:
        if name in models:
            _track(cfg, models[name], name, report)
            if open_loop:
                report.open_loop[name] = evaluate_open_loop(models[name], data, cfg.train.prediction_horizon)
    report.extras["steady_state_start_s"] = cfg.reference.steady_state_start
    report.extras["ordering_holds"] = report.ordering_holds()
    report.runtime_s = time.perf_counter() - t0
    return report


def run_design_agnostic(cfg: BenchConfig | None = None, variant_b: pl.PlantConfig | None = None):
    """Retrain the SSM controller per plant variant and cross-test the models.

    Returns ``(report_a, report_b)``.  Each report holds the matched
    ``SSM-MPC`` run and a ``SSM-MPC cross`` run using the other variant's
    model on this variant's plant.
    """
    cfg = BenchConfig() if cfg is None else cfg
    cfg_b = cfg.replace(plant=pl.stiffer_variant(cfg.plant) if variant_b is None else variant_b)
    t0 = time.perf_counter()
    models, reports = {}, {}
    for tag, c in (("A", cfg), ("B", cfg_b)):
        data = generate_datasets(c)
        tr = c.train
        models[tag] = ssm.train_ssm(data.decay, data.actuated, n=tr.n_modes, delay=tr.delay, n_r=tr.n_r,
                                    n_v=tr.n_v, lam=tr.ridge_lambda, map_lambda=tr.map_lambda)
        reports[tag] = BenchmarkReport(c.plant.tag, c.digest())
    for tag, other, c in (("A", "B", cfg), ("B", "A", cfg_b)):
        _track(c, models[tag], "SSM-MPC", reports[tag])
        _track(c, models[other], "SSM-MPC", reports[tag], key="SSM-MPC cross")
    base = reports["A"].mean_error("SSM-MPC")
    for r in reports.values():
        matched, cross = r.mean_error("SSM-MPC"), r.mean_error("SSM-MPC cross")
        r.extras.update({"baseline_error_mm": base, "matched_over_baseline": matched / base,
                         "within_budget": bool(matched <= MATCHED_BUDGET * base), "beats_cross": bool(matched < cross)})
        r.runtime_s = time.perf_counter() - t0
    return reports["A"], reports["B"]


def design_agnostic_holds(report_a: BenchmarkReport, report_b: BenchmarkReport) -> bool:
    return all(r.extras.get("within_budget") and r.extras.get("beats_cross") for r in (report_a, report_b))


# ----------------------------------------------------------------------------
# export

def _slug(name: str) -> str:
    return name.lower().replace("-", "_").replace(" ", "_")


def export_report(report: BenchmarkReport, directory, plot: bool = True) -> list[Path]:
    """Write ``summary.json``, one tracking CSV per run and an SVG error plot."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "summary.json"]
        written[0].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        for name, run in report.runs.items():
            written.append(run.to_csv(out / f"{_slug(name)}.csv"))
        if plot and report.runs:
            written.append(plot_errors(report, out / "tracking_error.svg"))
    except OSError as exc:
        raise OSError(f"cannot export report to {out}: {exc}") from exc
    return written


def load_report(path) -> BenchmarkReport:
    """Reload a report from ``summary.json`` (or the directory holding it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    return BenchmarkReport.from_dict(json.loads(path.read_text()))


def plot_errors(report: BenchmarkReport, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 3.5))
    for name, run in report.runs.items():
        ax.plot(run.times, run.errors * 1e3, lw=1, label=name)
    start = report.extras.get("steady_state_start_s")
    if start:
        ax.axvline(start, color="0.6", ls="--", lw=0.8)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("tip error [mm]")
    ax.set_title(f"plant {report.plant_tag}")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
