"""Command-line entry point (``ssmpc``).

Every subcommand accepts ``--config`` (a flat JSON object with
``section.field`` keys, see :func:`ssmpc.bench.config_from_flat`),
``--seed`` (overrides the config seed) and ``--out`` (output directory).

Exit codes: 0 success, 2 benchmark property violated, 1 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, datagen as dg, mpc, plant as pl, ssm
from . import baselines as bl

log = logging.getLogger("ssmpc")

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2


def _config(args) -> bench.BenchConfig:
    cfg = bench.load_config(args.config) if args.config else bench.BenchConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print(data):
    print(json.dumps(data, indent=2, sort_keys=True))


def cmd_gen_decay(args) -> int:
    cfg = _config(args)
    ts = dg.gen_decay_trajectories(cfg.plant, n_init=cfg.train.decay_count, duration=cfg.train.decay_duration,
                                   seed=cfg.seed)
    dg.save_trajectory_set(ts, _out(args))
    print(f"wrote {len(ts.trajectories)} decay trajectories to {args.out}")
    return EXIT_OK


def cmd_gen_actuated(args) -> int:
    cfg = _config(args)
    tr = cfg.train
    ts = dg.gen_actuated_trajectories(cfg.plant, tr.actuated_amplitudes, tr.actuated_periods,
                                      tr.actuated_duration, seed=cfg.seed)
    dg.save_trajectory_set(ts, _out(args))
    print(f"wrote {len(ts.trajectories)} actuated trajectories to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    tr = cfg.train
    if args.actuated is None:
        raise ValueError("--actuated is required")
    actuated = dg.load_trajectory_set(args.actuated)
    if args.kind == "ssm":
        if args.decay is None:
            raise ValueError("the SSM model needs --decay data")
        model = ssm.train_ssm(dg.load_trajectory_set(args.decay), actuated, n=tr.n_modes, delay=tr.delay,
                              n_r=tr.n_r, n_v=tr.n_v, lam=tr.ridge_lambda, map_lambda=tr.map_lambda)
    elif args.kind == "koopman":
        model = bl.fit_edmd(actuated, lam=tr.koopman_lambda)
    else:
        model = bl.fit_cc_params(actuated, cfg.plant.total_length, cfg.plant.feature_offset)
    path = _out(args) / f"{args.kind}_model.json"
    model.save(path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_eval_openloop(args) -> int:
    data = dg.load_trajectory_set(args.data)
    steps = int(round(args.horizon / data.dt))
    results = {}
    for path in args.model:
        model = ssm.load_model(path)
        scores = bench.open_loop_windows(model, data, steps)
        results[str(path)] = {"kind": model.kind, "nrmse_mean": float(sum(scores) / len(scores)),
                              "nrmse_max": float(max(scores)), "windows": len(scores)}
    (_out(args) / "openloop.json").write_text(json.dumps(results, indent=2) + "\n")
    _print(results)
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _config(args)
    model = ssm.load_model(args.model)
    mcfg = cfg.mpc_config()
    ref = bench.make_reference(cfg.reference, pl.equilibrium_observable(cfg.plant), mcfg.dt, mcfg.horizon)
    run = mpc.closed_loop_run(cfg.plant, mpc.Controller(model, mcfg), ref, cfg.reference.duration)
    out = _out(args)
    run.to_csv(out / "tracking.csv")
    run.save_summary(out / "tracking_summary.json", cfg.reference.steady_state_start)
    _print(run.summary(cfg.reference.steady_state_start))
    return EXIT_OK if run.completed else EXIT_ERROR


def cmd_bench(args) -> int:
    report = bench.run_benchmark(_config(args))
    bench.export_report(report, _out(args))
    _print({k: v.get("mean_error_mm", v.get("error")) for k, v in report.controllers.items()})
    if not report.ordering_holds():
        log.error("tracking-error ordering violated")
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_design_agnostic(args) -> int:
    report_a, report_b = bench.run_design_agnostic(_config(args))
    out = _out(args)
    for tag, r in (("A", report_a), ("B", report_b)):
        bench.export_report(r, out / tag)
    _print({tag: r.extras | {k: v.get("mean_error_mm") for k, v in r.controllers.items()}
            for tag, r in (("A", report_a), ("B", report_b))})
    if not bench.design_agnostic_holds(report_a, report_b):
        log.error("design-agnostic property violated")
        return EXIT_VIOLATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat JSON config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ssmpc", description="Reduced-order model predictive control benchmark")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-decay", parents=[common], help="simulate unforced decays").set_defaults(func=cmd_gen_decay)
    sub.add_parser("gen-actuated", parents=[common], help="simulate forced runs").set_defaults(func=cmd_gen_actuated)

    p = sub.add_parser("train", parents=[common], help="fit a model")
    p.add_argument("kind", choices=["ssm", "koopman", "cc"])
    p.add_argument("--decay", type=Path, help="decay trajectory directory")
    p.add_argument("--actuated", type=Path, help="actuated trajectory directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-openloop", parents=[common], help="open-loop NRMSE on recorded data")
    p.add_argument("--model", type=Path, nargs="+", required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--horizon", type=float, default=2.0, help="prediction window in seconds")
    p.set_defaults(func=cmd_eval_openloop)

    p = sub.add_parser("track", parents=[common], help="closed-loop tracking with one model")
    p.add_argument("--model", type=Path, required=True)
    p.set_defaults(func=cmd_track)

    sub.add_parser("bench", parents=[common], help="three-way benchmark").set_defaults(func=cmd_bench)
    sub.add_parser("design-agnostic", parents=[common],
                   help="retrain per plant variant").set_defaults(func=cmd_design_agnostic)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
