import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmpc import datagen as dg
from ssmpc import plant as pl
from ssmpc.errors import DimensionMismatch, InfeasibleInput, InsufficientSamples, RankDeficient

CFG = pl.PlantConfig()


def tip_speed(traj):
    return np.linalg.norm(np.diff(traj.observables[:, :3], axis=0), axis=1) / traj.dt


def test_decay_set_count_and_determinism(datasets):
    dec = datasets.decay
    assert len(dec) == 18 and dec.kind == "decay"
    again = dg.gen_decay_trajectories(CFG, n_init=18, seed=0)
    assert all(np.array_equal(a.observables, b.observables) for a, b in zip(dec, again))


def test_decay_from_equilibrium_is_constant():
    ts = dg.gen_decay_trajectories(CFG, duration=1.0, initial_angles=pl.equilibrium(CFG))
    z = ts[0].observables
    assert np.max(np.abs(z - z[0])) < 1e-12


def test_decays_settle(datasets):
    per_second = int(round(1.0 / datasets.decay.dt))
    for traj in datasets.decay:
        v = tip_speed(traj)
        assert np.mean(v[-per_second:]) < 0.01 * np.mean(v[:per_second])


def test_zero_amplitude_actuation_holds_equilibrium():
    ts = dg.gen_actuated_trajectories(CFG, amplitudes=(0.0,), periods=(1.0,), duration=1.0)
    z = ts[0].observables
    assert np.all(ts[0].inputs == 0)
    assert np.max(np.abs(z - pl.equilibrium_observable(CFG))) < 1e-12


def test_actuated_inputs_within_bounds(datasets):
    for traj in datasets.actuated:
        assert np.all(traj.inputs >= 0) and np.all(traj.inputs <= CFG.tension_max)
    with pytest.raises(InfeasibleInput):
        dg.gen_actuated_trajectories(CFG, amplitudes=(CFG.tension_max + 0.1,), periods=(1.0,), duration=0.5)


def test_larger_amplitude_moves_tip_further():
    ts = dg.gen_actuated_trajectories(CFG, amplitudes=(0.05, 0.1), periods=(1.5,), duration=4.0, seed=3)
    eq = pl.equilibrium_observable(CFG)
    peaks = [np.max(np.linalg.norm(t.observables[:, :3] - eq[:3], axis=1)) for t in ts]
    assert peaks[1] > peaks[0]


def test_raised_sine_profile():
    t = np.arange(0, 4, 0.02)
    u = dg.raised_sine_inputs(0.3, 1.0, t)
    assert u.shape == (t.size, 4)
    assert np.all(u >= 0) and np.all(u <= 0.3 + 1e-15)
    assert np.all(u[0] == 0)


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        dg.Trajectory([0, 0.02, 0.05], np.zeros((3, 6)))
    with pytest.raises(DimensionMismatch):
        dg.Trajectory([0, 0.02], np.zeros((3, 6)))
    with pytest.raises(ValueError):
        dg.TrajectorySet([], "decay")
    with pytest.raises(ValueError):
        dg.TrajectorySet([dg.Trajectory([0, 0.02], np.zeros((2, 6)))], "actuated")


def test_delay_embed_counting_and_order():
    z = np.arange(18, dtype=float).reshape(3, 6)
    s = dg.delay_embed(z, 1)
    assert s.columns.shape == (12, 2)
    assert np.array_equal(s.columns[:, 0], np.concatenate([z[1], z[0]]))  # newest first
    assert np.array_equal(s.time_index, [1, 2])
    assert np.array_equal(dg.delay_embed(z, 0).columns, z.T)
    const = dg.delay_embed(np.ones((5, 6)), 2)
    assert np.all(const.columns == const.columns[:, :1])
    with pytest.raises(InsufficientSamples):
        dg.delay_embed(z, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 3))
def test_delay_embed_shift_consistency(length, d):
    if length <= d:
        return
    z = np.random.default_rng(length).normal(size=(length, 6))
    cols = dg.delay_embed(z, d).columns
    assert cols.shape == (6 * (d + 1), length - d)
    if cols.shape[1] > 1:
        # column k+1 minus its newest block equals column k minus its oldest block
        assert np.array_equal(cols[6:, 1:], cols[:-6, :-1])


def test_svd_recovers_known_subspace():
    rng = np.random.default_rng(0)
    basis, _ = np.linalg.qr(rng.normal(size=(12, 3)))
    data = basis @ rng.normal(size=(3, 200))
    b = dg.svd_modes(dg.EmbeddedSnapshot(data, 1, np.arange(200)), 3)
    assert b.energy_fraction == pytest.approx(1.0, abs=1e-10)
    cosines = np.linalg.svd(basis.T @ b.modes, compute_uv=False)
    assert np.max(np.arccos(np.clip(cosines, -1, 1))) < 1e-8


def test_svd_basis_properties():
    rng = np.random.default_rng(1)
    T = rng.normal(size=(12, 80))
    snap = dg.EmbeddedSnapshot(T, 1, np.arange(80))
    full = dg.svd_modes(snap, 12)
    assert full.energy_fraction == pytest.approx(1.0, abs=1e-12)
    b = dg.svd_modes(snap, 3)
    assert np.allclose(b.modes.T @ b.modes, np.eye(3), atol=1e-10)
    assert np.all(np.diff(b.singular_values) <= 0)
    resid = np.linalg.norm(T - b.modes @ dg.project(snap, b)) ** 2 / np.linalg.norm(T) ** 2
    assert resid == pytest.approx(1 - b.energy_fraction, abs=1e-10)
    with pytest.raises(RankDeficient):
        dg.svd_modes(dg.EmbeddedSnapshot(T[:, :2], 1, np.arange(2)), 3)


def test_svd_signs_are_fixed():
    rng = np.random.default_rng(2)
    T = rng.normal(size=(12, 40))
    a = dg.svd_modes(dg.EmbeddedSnapshot(T, 1, np.arange(40)), 3)
    b = dg.svd_modes(dg.EmbeddedSnapshot(T.copy(), 1, np.arange(40)), 3)
    assert np.array_equal(a.modes, b.modes)
    idx = np.argmax(np.abs(a.modes), axis=0)
    assert np.all(a.modes[idx, range(3)] > 0)


def test_project_with_identity_basis_and_exact_lift():
    T = np.random.default_rng(3).normal(size=(12, 10))
    eye = dg.ProjectionBasis(np.eye(12)[:, :4], np.ones(12), 1.0)
    assert np.array_equal(dg.project(T, eye), T[:4])
    exact = dg.svd_modes(dg.EmbeddedSnapshot(T[:, :3] @ np.ones((3, 10)), 1, np.arange(10)), 1)
    cols = T[:, :3] @ np.ones((3, 10))
    assert np.allclose(exact.modes @ dg.project(cols, exact), cols, atol=1e-12)
    with pytest.raises(DimensionMismatch):
        dg.project(np.zeros((6, 3)), eye)


def test_three_modes_capture_most_energy(ssm_model):
    assert ssm_model.basis.energy_fraction >= 0.95


def test_trajectory_set_round_trip_is_bit_exact(tmp_path, datasets):
    for ts in (datasets.decay, datasets.actuated):
        sub = dg.TrajectorySet(ts.trajectories[:3], ts.kind, ts.plant_tag, ts.dt, ts.seed, ts.equilibrium, ts.meta)
        back = dg.load_trajectory_set(dg.save_trajectory_set(sub, tmp_path / ts.kind))
        assert back.kind == sub.kind and back.seed == sub.seed and back.dt == sub.dt
        assert np.array_equal(back.equilibrium, sub.equilibrium)
        for a, b in zip(sub, back):
            assert np.array_equal(a.times, b.times) and np.array_equal(a.observables, b.observables)
            assert (a.inputs is None and b.inputs is None) or np.array_equal(a.inputs, b.inputs)
    header = (tmp_path / "actuated" / "traj_000.csv").read_text().splitlines()[0]
    assert header == "t,z1,z2,z3,z4,z5,z6,u1,u2,u3,u4"
