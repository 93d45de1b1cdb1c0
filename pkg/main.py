import argparse
import os
import sys

from dotenv import load_dotenv

load_dotenv()

from channel import dump_channels, load_channels
from conic_kernel import SolverSettings
from isac_errors import (
    InitializationError,
    IsacError,
    ScenarioSchemaError,
    ScenarioValidationError,
    SubproblemInfeasibleError,
)
from orchestrator import BCD_EPSILON, BCD_MAX_ITERS, SWEEP_CONCURRENCY, BaselineSpec, run_baseline, run_bcd, sweep
from pipeline_log import PipelineLogger, set_log_level, ts_print
from results_io import (
    RESULTS_DIR,
    build_manifest,
    load_trajectory_csv,
    plot_data,
    write_infeasibility,
    write_manifest,
    write_run_results,
    write_trend,
)
from scenario import load_scenario, validate_kinematics, with_overrides
from trajectory_rl import DdpgConfig, save_checkpoint
from trajectory_rl import with_overrides as ddpg_overrides

# --- CONFIGURABLE CONSTANTS ---
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_NO_INPUT = 66
RUN_MODES = ("proposed", "twobf", "bfwot", "random_policy", "beamforming_only")


class UsageExitParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=str, default=None, help="Scenario JSON file")
    common.add_argument("--seed", type=int, default=None, help="Overrides the scenario rng_seed")
    common.add_argument("--out", type=str, default=RESULTS_DIR, help="Results directory")
    common.add_argument("--mode", type=str, choices=RUN_MODES, default="proposed")
    common.add_argument("--log-level", type=str, choices=["DEBUG", "INFO", "WARNING", "ERROR"], default="INFO")

    solve = argparse.ArgumentParser(add_help=False)
    solve.add_argument("--bcd-iters", type=int, default=BCD_MAX_ITERS)
    solve.add_argument("--eps-outer", type=float, default=BCD_EPSILON)
    solve.add_argument("--episodes", type=int, default=None, help="DDPG training episodes")
    solve.add_argument("--gamma", type=float, default=None, help="DDPG discount")
    solve.add_argument("--tau-soft", type=float, default=None, help="Target-network soft-update rate")
    solve.add_argument("--penalty", type=float, default=None, help="Constraint-violation penalty (default: auto)")
    solve.add_argument("--replay-channels", type=str, default=None, help="Channel dump to replay NLoS draws from")
    solve.add_argument("--dump-channels", action="store_true", help="Write channels.json next to the results")
    solve.add_argument("--dump-subproblems", action="store_true", help="Write every conic subproblem as text")

    parser = UsageExitParser(prog="isac", description="Multi-UAV ISAC beamforming and trajectory toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=UsageExitParser)
    run_parser = sub.add_parser("run", parents=[common, solve], help="Proposed BCD or a baseline on one scenario")
    run_parser.set_defaults(handler=cmd_run, subparser=run_parser)
    sweep_parser = sub.add_parser("sweep", parents=[common, solve], help="Trend table over CRB threshold or power")
    sweep_parser.add_argument("--axis", type=str, choices=["crb", "pmax"], required=True)
    sweep_parser.add_argument("--values", type=float, nargs="*", default=[])
    sweep_parser.add_argument("--concurrency", type=int, default=SWEEP_CONCURRENCY)
    sweep_parser.set_defaults(handler=cmd_sweep, subparser=sweep_parser)
    plot_parser = sub.add_parser("plotdata", parents=[common], help="Plot-ready CSVs from a results directory")
    plot_parser.set_defaults(handler=cmd_plotdata, subparser=plot_parser)
    validate_parser = sub.add_parser("validate", parents=[common], help="Check a scenario and optionally a trajectory")
    validate_parser.add_argument("--trajectory", type=str, default=None, help="Trajectory CSV (slot, uav, x, y, H)")
    validate_parser.set_defaults(handler=cmd_validate, subparser=validate_parser)
    return parser


def _load(args, parser):
    if not args.scenario:
        parser.error("--scenario is required")
    if not os.path.exists(args.scenario):
        ts_print(f"❌ Critical: {args.scenario} not found.", level="ERROR")
        raise FileNotFoundError(args.scenario)
    cfg = load_scenario(args.scenario)
    overrides = {}
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
        cfg = with_overrides(cfg, rng_seed=args.seed)
    PipelineLogger.log_event("SCENARIO_LOADED", {"path": args.scenario, "uavs": cfg.uav_count, "slots": cfg.slot_count})
    return cfg, overrides


def _ddpg_config(args, overrides):
    updates = {"episodes": args.episodes, "gamma": args.gamma, "tau_soft": args.tau_soft, "penalty": args.penalty}
    overrides.update({k: v for k, v in updates.items() if v is not None})
    return ddpg_overrides(DdpgConfig(), **updates)


def _settings(args):
    return SolverSettings(dump_dir=os.path.join(args.out, "subproblems") if args.dump_subproblems else None)


def _execute(cfg, args, ddpg, settings, replay):
    kwargs = dict(bcd_iters=args.bcd_iters, eps_outer=args.eps_outer, ddpg=ddpg, settings=settings, replay=replay)
    if args.mode in ("proposed", "beamforming_only"):
        return run_bcd(cfg, mode=args.mode, **kwargs)
    return run_baseline(BaselineSpec(args.mode), cfg, **kwargs)


def cmd_run(args, parser) -> int:
    cfg, overrides = _load(args, parser)
    ddpg = _ddpg_config(args, overrides)
    settings = _settings(args)
    replay = load_channels(args.replay_channels) if args.replay_channels else None
    manifest = build_manifest(
        "run",
        args.scenario,
        cfg.rng_seed,
        overrides=overrides,
        solver=settings.as_dict(),
        ddpg=ddpg.as_dict(),
        mode=args.mode,
        bcd_iters=args.bcd_iters,
        eps_outer=args.eps_outer,
        replay_channels=args.replay_channels,
    )
    write_manifest(manifest, args.out)
    PipelineLogger.log_event("RUN_START", manifest)
    try:
        report = _execute(cfg, args, ddpg, settings, replay)
    except (SubproblemInfeasibleError, InitializationError) as e:
        path = write_infeasibility(e, args.out)
        PipelineLogger.log_event("RUN_ERROR", {"kind": type(e).__name__, "error": str(e), "report": path})
        ts_print(f"❌ Infeasible: {e} (details in {path})", level="ERROR")
        return EXIT_INFEASIBLE

    written = write_run_results(report, args.out)
    if args.dump_channels:
        path = os.path.join(args.out, "channels.json")
        dump_channels(report.channels, path)
        written.append(path)
    if report.agent is not None:
        path = os.path.join(args.out, "policy.pt")
        save_checkpoint(report.agent, path)
        written.append(path)

    summary = {
        "mode": report.mode,
        "outer_iterations": len(report.iterations),
        "sum_rate_bits": report.sum_rate,
        "min_crb_margin": report.min_crb_margin,
        "min_energy_margin_j": report.energy.min_margin,
        "stop_reason": report.stop_reason,
        "files": written,
    }
    PipelineLogger.log_event("RUN_SUMMARY", summary)
    ts_print("🏁 [RUN SUMMARY]")
    ts_print(f"✅ Mode: {report.mode} ({report.stop_reason})")
    ts_print(f"🔁 Outer iterations: {len(report.iterations)} (best {report.best_iteration})")
    ts_print(f"📶 Sum rate: {report.sum_rate:.4f} bits")
    ts_print(f"🎯 Min CRB margin: {report.min_crb_margin:.3e} rad^2")
    ts_print(f"🔋 Min energy margin: {report.energy.min_margin:.1f} J")
    ts_print(f"💾 Files written: {len(written)} in {args.out}")
    return EXIT_OK


def cmd_sweep(args, parser) -> int:
    if not args.values:
        parser.error("--values needs at least one value")
    cfg, overrides = _load(args, parser)
    ddpg = _ddpg_config(args, overrides)
    settings = _settings(args)
    replay = load_channels(args.replay_channels) if args.replay_channels else None
    mode = args.mode if args.mode in ("proposed", "beamforming_only") else "proposed"
    manifest = build_manifest(
        "sweep",
        args.scenario,
        cfg.rng_seed,
        overrides=overrides,
        solver=settings.as_dict(),
        ddpg=ddpg.as_dict(),
        axis=args.axis,
        values=list(args.values),
        mode=mode,
    )
    write_manifest(manifest, args.out)
    PipelineLogger.log_event("RUN_START", manifest)
    try:
        table, _ = sweep(
            cfg,
            args.axis,
            args.values,
            concurrency=args.concurrency,
            bcd_iters=args.bcd_iters,
            eps_outer=args.eps_outer,
            mode=mode,
            ddpg=ddpg,
            settings=settings,
            replay=replay,
        )
    except ValueError as e:
        parser.error(str(e))
    path = write_trend(table, args.out)
    feasible = int((table["status"] == "ok").sum())
    PipelineLogger.log_event("RUN_SUMMARY", {"axis": args.axis, "points": len(table), "feasible": feasible, "file": path})
    ts_print("🏁 [RUN SUMMARY]")
    ts_print(f"✅ Feasible points: {feasible}/{len(table)}")
    ts_print(f"💾 Trend table: {path}")
    return EXIT_OK if feasible else EXIT_INFEASIBLE


def cmd_plotdata(args, parser) -> int:
    try:
        paths, warnings = plot_data(args.out)
    except FileNotFoundError as e:
        ts_print(f"❌ Critical: results missing in {args.out}: {e}", level="ERROR")
        return EXIT_NO_INPUT
    for warning in warnings:
        ts_print(f"⚠️ {warning}", level="WARNING")
    ts_print(f"✅ Plot data written: {', '.join(paths)}")
    return EXIT_OK


def cmd_validate(args, parser) -> int:
    cfg, _ = _load(args, parser)
    ts_print(f"✅ Scenario {args.scenario} is valid ({cfg.uav_count} UAVs, {cfg.user_count} users, {cfg.target_count} targets)")
    if args.trajectory:
        if not os.path.exists(args.trajectory):
            ts_print(f"❌ Critical: {args.trajectory} not found.", level="ERROR")
            return EXIT_NO_INPUT
        residuals = validate_kinematics(load_trajectory_csv(args.trajectory, cfg), cfg)
        for name, value in residuals.as_dict().items():
            ts_print(f"   {name}: {value:.3e}")
        if not residuals.feasible():
            ts_print("❌ Trajectory breaks the kinematic limits", level="ERROR")
            return EXIT_DATA
        ts_print("✅ Trajectory satisfies the kinematic limits")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    set_log_level(args.log_level)
    handler, command = args.handler, args.subparser
    try:
        return handler(args, command)
    except FileNotFoundError as e:
        ts_print(f"❌ Missing input: {e}", level="ERROR")
        return EXIT_NO_INPUT
    except (ScenarioSchemaError, ScenarioValidationError) as e:
        PipelineLogger.log_event("RUN_ERROR", {"kind": type(e).__name__, "error": str(e)})
        ts_print(f"❌ Invalid scenario: {e}", level="ERROR")
        return EXIT_DATA
    except IsacError as e:
        PipelineLogger.log_event("RUN_ERROR", {"kind": type(e).__name__, "error": str(e)})
        ts_print(f"❌ {type(e).__name__}: {e}", level="ERROR")
        return EXIT_ERROR
    except Exception as e:
        PipelineLogger.log_event("RUN_ERROR", {"kind": type(e).__name__, "error": str(e)})
        ts_print(f"❌ Unexpected error: {e}", level="ERROR")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
