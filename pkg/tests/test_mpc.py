import numpy as np
import pytest

from ssmpc import baselines as bl
from ssmpc import bench
from ssmpc import mpc
from ssmpc import plant as pl

from test_ssm import central_fd

N_H = 12


def linear_model(seed=0):
    """A stable 10-state, 4-input linear model in the Koopman container."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(10, 10))
    A *= 0.95 / np.max(np.abs(np.linalg.eigvals(A)))
    B = rng.normal(size=(10, 4))
    omegas = rng.normal(size=(2, 6))
    return bl.KoopmanModel(omegas, A, B, np.zeros(6), 0.02)


def linear_problem(model, seed=1, bound=1e3):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=model.n)
    x_ref = rng.normal(size=(N_H + 1, model.n))
    return mpc.MpcProblem(model, x0, x_ref, np.full(4, -bound), np.full(4, bound))


def wide_cfg(**kw):
    base = dict(horizon=N_H, Q=np.eye(10), u_reg=0.1, u_min=(-1e3,) * 4, u_max=(1e3,) * 4,
                trust_step_max=1e6, qp_tolerance=1e-10)
    base.update(kw)
    return mpc.MpcConfig(**base)


def riccati_tracking(A, B, Q, Qf, R, x0, x_ref):
    """Finite-horizon LQ tracking via the backward Riccati recursion.

    Value functions are kept as x'Px - 2p'x (constants dropped), minimized
    stage by stage, then the optimal policy is rolled forward.
    """
    N = x_ref.shape[0] - 1
    P, p = Qf, Qf @ x_ref[N]
    gains = []
    for k in range(N - 1, -1, -1):
        G = R + B.T @ P @ B
        K = np.linalg.solve(G, B.T @ P @ A)
        kff = np.linalg.solve(G, B.T @ p)
        gains.append((K, kff))
        P, p = Q + A.T @ P @ A - A.T @ P @ B @ K, Q @ x_ref[k] + A.T @ p - A.T @ P @ B @ kff
    gains.reverse()
    x, U = x0, []
    for K, kff in gains:
        u = -K @ x + kff
        U.append(u)
        x = A @ x + B @ u
    return np.array(U)


def lq_objective(A, B, Q, Qf, R, x0, x_ref, U):
    X = [x0]
    for u in U:
        X.append(A @ X[-1] + B @ u)
    E = np.array(X) - x_ref
    return sum(e @ Q @ e for e in E[:-1]) + E[-1] @ Qf @ E[-1] + sum(u @ R @ u for u in U)


# -- box QP --------------------------------------------------------------------

def test_box_qp_unconstrained_and_clamped():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(6, 6))
    H = M @ M.T + 6 * np.eye(6)
    g = rng.normal(size=6)
    d, W = mpc.box_qp(H, g, np.full(6, -1e9), np.full(6, 1e9))
    assert np.allclose(d, np.linalg.solve(H, -g), atol=1e-12) and np.all(W == 0)
    # separable case: the box solution is the clipped unconstrained one
    Hd = np.diag(np.arange(1.0, 7.0))
    d, _ = mpc.box_qp(Hd, g * 5, -np.ones(6) * 0.3, np.ones(6) * 0.3)
    assert np.allclose(d, np.clip(-g * 5 / np.arange(1.0, 7.0), -0.3, 0.3), atol=1e-14)


def test_box_qp_kkt_conditions():
    rng = np.random.default_rng(1)
    for _ in range(20):
        M = rng.normal(size=(8, 8))
        H = M @ M.T + 0.5 * np.eye(8)
        g = rng.normal(size=8) * 3
        lo, hi = -rng.uniform(0, 1, 8), rng.uniform(0, 1, 8)
        d, _ = mpc.box_qp(H, g, lo, hi)
        grad = H @ d + g
        assert np.all(d >= lo) and np.all(d <= hi)
        interior = (d > lo + 1e-12) & (d < hi - 1e-12)
        assert np.allclose(grad[interior], 0, atol=1e-9)
        assert np.all(grad[np.isclose(d, lo)] >= -1e-9)
        assert np.all(grad[np.isclose(d, hi)] <= 1e-9)


def test_box_qp_rejects_empty_box_and_indefinite_hessian():
    with pytest.raises(mpc.QpFailure):
        mpc.box_qp(np.eye(2), np.zeros(2), np.ones(2), np.zeros(2))
    with pytest.raises(mpc.QpFailure):
        mpc.box_qp(-np.eye(2), np.ones(2), -np.ones(2), np.ones(2))


# -- SQP -------------------------------------------------------------------------

def test_sqp_matches_riccati_oracle():
    model = linear_model()
    prob = linear_problem(model)
    cfg = wide_cfg()
    sol = mpc.sqp_solve(prob, cfg)
    Q, Qf = cfg.weights(model)
    R = cfg.u_reg * np.eye(4)
    U = riccati_tracking(model.A, model.B, Q, Qf, R, prob.x0, prob.x_ref)
    assert np.max(np.abs(sol.u_seq - U)) < 1e-6
    ref_obj = lq_objective(model.A, model.B, Q, Qf, R, prob.x0, prob.x_ref, U)
    assert abs(sol.objective - ref_obj) < 1e-6 * max(1.0, abs(ref_obj))
    assert sol.status == mpc.CONVERGED and sol.iterations == 1


def test_zero_problem_has_zero_solution():
    model = linear_model()
    prob = mpc.MpcProblem(model, np.zeros(10), np.zeros((N_H + 1, 10)), np.zeros(4), np.full(4, 2.0))
    sol = mpc.sqp_solve(prob, wide_cfg())
    assert np.allclose(sol.u_seq, 0, atol=1e-12) and abs(sol.objective) < 1e-12


def test_fully_constrained_inputs():
    model = linear_model()
    c = np.array([0.3, 0.1, 0.7, 0.2])
    prob = linear_problem(model)
    prob.u_min, prob.u_max = c.copy(), c.copy()
    sol = mpc.sqp_solve(prob, wide_cfg())
    assert np.all(sol.u_seq == c)
    X = [prob.x0]
    for _ in range(N_H):
        X.append(model.step(X[-1], c))
    assert np.allclose(sol.x_seq, np.array(X), atol=1e-10)


def test_argmin_is_invariant_to_cost_scaling():
    model = linear_model()
    prob = linear_problem(model)
    a = mpc.sqp_solve(prob, wide_cfg(u_reg=0.0))
    b = mpc.sqp_solve(prob, wide_cfg(u_reg=0.0, Q=2 * np.eye(10)))
    assert np.max(np.abs(a.u_seq - b.u_seq)) < 1e-8
    c = mpc.sqp_solve(prob, wide_cfg(u_reg=0.2, Q=2 * np.eye(10)))
    d = mpc.sqp_solve(prob, wide_cfg())
    assert np.max(np.abs(c.u_seq - d.u_seq)) < 1e-8


def test_nonlinear_sqp_closes_shooting_defects(ssm_model):
    cfg = mpc.MpcConfig(horizon=N_H, sqp_max_iter=20, qp_tolerance=1e-9)
    eq = ssm_model.equilibrium_observable
    ref = eq + np.outer(np.linspace(0, 1, N_H + 1), [1e-3, 1e-3, 0, 1e-3, 1e-3, 0])
    sol = mpc.sqp_solve(mpc.build_problem(ssm_model, eq, ref, cfg), cfg)
    X = [sol.x_seq[0]]
    for u in sol.u_seq:
        X.append(ssm_model.step(X[-1], u))
    assert sol.status == mpc.CONVERGED
    assert np.max(np.abs(np.array(X) - sol.x_seq)) < 1e-7
    assert np.all(sol.u_seq >= 0) and np.all(sol.u_seq <= 2.0)


def test_converged_solution_satisfies_kkt_with_active_bounds():
    model = linear_model()
    prob = linear_problem(model, bound=0.5)
    prob.u_min = np.zeros(4)
    cfg = wide_cfg(u_min=(0.0,) * 4, u_max=(0.5,) * 4)
    sol = mpc.sqp_solve(prob, cfg)
    assert sol.status == mpc.CONVERGED and sol.kkt_residual < cfg.qp_tolerance
    Q, Qf = cfg.weights(model)
    R = cfg.u_reg * np.eye(4)

    def J(u_flat):
        return lq_objective(model.A, model.B, Q, Qf, R, prob.x0, prob.x_ref, u_flat.reshape(-1, 4))

    u = sol.u_seq.ravel()
    grad = central_fd(J, u, eps=1e-4)  # exact up to rounding for a quadratic
    at_lo, at_hi = u <= 0.0, u >= 0.5
    free = ~(at_lo | at_hi)
    scale = np.max(np.abs(grad))
    assert at_lo.any() and at_hi.any() and free.any()
    assert np.all((u >= 0) & (u <= 0.5))
    assert np.max(np.abs(grad[free])) < 1e-6 * scale
    assert np.all(grad[at_lo] > -1e-6 * scale) and np.all(grad[at_hi] < 1e-6 * scale)


def test_iteration_cap_is_reported(ssm_model):
    cfg = mpc.MpcConfig(horizon=N_H, sqp_max_iter=1, qp_tolerance=1e-14)
    eq = ssm_model.equilibrium_observable
    ref = eq + np.outer(np.ones(N_H + 1), [3e-3, 3e-3, 0, 3e-3, 3e-3, 0])
    sol = mpc.sqp_solve(mpc.build_problem(ssm_model, eq, ref, cfg), cfg)
    assert sol.status == mpc.ITER_CAPPED and sol.iterations == 1


# -- problem construction --------------------------------------------------------

def test_build_problem_at_equilibrium(ssm_model):
    cfg = mpc.MpcConfig(horizon=N_H)
    eq = ssm_model.equilibrium_observable
    prob = mpc.build_problem(ssm_model, eq, np.tile(eq, (N_H + 5, 1)), cfg)
    assert np.all(prob.x0 == 0) and np.all(prob.x_ref == 0)
    assert prob.x_ref.shape == (N_H + 1, 3)
    assert prob.n_state_vars == N_H * ssm_model.n and prob.n_input_vars == N_H * 4
    with pytest.raises(ValueError):
        mpc.build_problem(ssm_model, eq, np.tile(eq, (N_H, 1)), cfg)


def test_build_problem_uses_observable_map(ssm_model):
    cfg = mpc.MpcConfig(horizon=3)
    rng = np.random.default_rng(3)
    window = ssm_model.equilibrium_observable + rng.normal(scale=1e-3, size=(4, 6))
    prob = mpc.build_problem(ssm_model, window[0], window, cfg)
    assert np.allclose(prob.x_ref, [ssm_model.encode(z) for z in window], atol=0)


def test_config_validation():
    with pytest.raises(ValueError):
        mpc.MpcConfig(horizon=0)
    with pytest.raises(ValueError):
        mpc.MpcConfig(u_min=(1, 0, 0, 0), u_max=(0, 1, 1, 1))
    with pytest.raises(ValueError):
        mpc.MpcConfig(Q=-np.eye(3))


# -- controller --------------------------------------------------------------------

def test_controller_inputs_always_within_bounds(ssm_model):
    cfg = mpc.MpcConfig(horizon=10)
    ctrl = mpc.Controller(ssm_model, cfg)
    rng = np.random.default_rng(4)
    eq = ssm_model.equilibrium_observable
    for i in range(1000):
        if i % 50 == 0:
            ctrl.reset()
        z = eq + rng.normal(scale=rng.choice([1e-4, 2e-3, 2e-2]), size=6)
        ref = eq + rng.normal(scale=3e-3, size=(11, 6))
        u, info = mpc.mpc_step(ctrl, z, ref)
        assert np.all(u >= 0.0) and np.all(u <= 2.0), info.status


def test_controller_fixed_point_at_equilibrium(ssm_model):
    ctrl = mpc.Controller(ssm_model, mpc.MpcConfig(horizon=10))
    eq = ssm_model.equilibrium_observable
    ref = np.tile(eq, (11, 1))
    outs = [ctrl.step(eq, ref)[0] for _ in range(5)]
    assert all(np.array_equal(o, outs[0]) for o in outs)
    assert np.max(outs[0]) < 1e-9


def test_controller_falls_back_on_qp_failure(ssm_model, monkeypatch):
    ctrl = mpc.Controller(ssm_model, mpc.MpcConfig(horizon=10))
    eq = ssm_model.equilibrium_observable
    ctrl.last_input = np.array([0.5, 0.1, 3.0, 0.2])

    def broken(*a, **k):
        raise mpc.QpFailure("forced")

    monkeypatch.setattr(mpc, "sqp_solve", broken)
    u, info = ctrl.step(eq, np.tile(eq, (11, 1)))
    assert info.status == mpc.FALLBACK
    assert np.array_equal(u, [0.5, 0.1, 2.0, 0.2])
    assert ctrl.solution is None


def test_controller_rejects_mismatched_sample_time(ssm_model):
    with pytest.raises(ValueError):
        mpc.Controller(ssm_model, mpc.MpcConfig(dt=0.01))


# -- closed loop -------------------------------------------------------------------

def test_equilibrium_hold_regulation(ssm_model):
    cfg = pl.PlantConfig()
    mcfg = mpc.MpcConfig.for_plant(cfg)
    spec = bench.ReferenceSpec(resp_amplitude=0.0, card_amplitude=0.0, duration=2.0)
    ref = bench.make_reference(spec, pl.equilibrium_observable(cfg), mcfg.dt, mcfg.horizon)
    run = mpc.closed_loop_run(cfg, mpc.Controller(ssm_model, mcfg), ref, spec.duration)
    assert np.mean(run.errors) < 1e-5
    assert run.completed and len(run) == 101


def test_reference_too_short_is_rejected(ssm_model):
    cfg = pl.PlantConfig()
    mcfg = mpc.MpcConfig.for_plant(cfg)
    spec = bench.ReferenceSpec(duration=1.0)
    ref = bench.make_reference(spec, pl.equilibrium_observable(cfg), mcfg.dt)
    with pytest.raises(ValueError):
        mpc.closed_loop_run(cfg, mpc.Controller(ssm_model, mcfg), ref, spec.duration)


def test_tracking_csv_round_trip(tmp_path, bench_report):
    run = bench_report.runs["SSM-MPC"]
    assert len(run) == int(round(16.0 / 0.02)) + 1
    back = mpc.TrackingResult.from_csv(run.to_csv(tmp_path / "run.csv"))
    assert np.array_equal(back.times, run.times) and np.array_equal(back.errors, run.errors)
    assert np.array_equal(back.inputs, run.inputs) and back.statuses == run.statuses
    assert np.array_equal(back.iterations, run.iterations)
    assert len((tmp_path / "run.csv").read_text().splitlines()) == len(run) + 1
