"""Command-line entry point of the brownout MoE simulator.

Subcommands:
    route           plan one layer's brownout routing from per-expert token counts
    distill         train the united experts of a layer
    simulate        run a serving simulation and write records/thresholds/report
    md1             M/D/1 mean response time
    speedup         Amdahl speedup
    analyze         summarise a records.csv file (optionally export per-second P90 series)
    generate-trace  write a workload trace CSV from an experiment document
    sweep           static-threshold throughput sweep over (way, threshold) points

JSON results go to stdout; logs and errors go to stderr. Exit codes: 0 on
success, 1 for domain and validation errors, 2 for usage and I/O errors.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from .brownout_router import BrownoutConfig, ExpertAssignment, plan_brownout, plan_stats, plan_to_dict
from .config import (
    SimulationDocument,
    build_layer,
    build_trace,
    configure_logging,
    get_config,
    load_layer,
    load_simulation_document,
    save_layer,
)
from .errors import BrownoutError
from .queue_analytics import (
    MD1Params,
    SpeedupQuery,
    amdahl_speedup,
    md1_response_time,
    md1_utilisation,
    md1_waiting_time,
    simulate_md1,
)
from .serve_sim import ControllerConfig, SweepPoint, run_simulation, sweep
from .trace_io import (
    analyze_records,
    latency_series,
    mean_thresholds,
    read_records_csv,
    read_thresholds_csv,
    write_series_csv,
    write_simulation_outputs,
)
from .united_distill import DistillConfig, distill_layer, synthetic_tokens
from .workload import RateSchedule, Request, generate_trace, read_trace_csv, write_trace_csv

# Configure logging to stderr only (never stdout - corrupts JSON/CSV command output)
logging.basicConfig(stream=sys.stderr, level=logging.INFO)
logger = logging.getLogger("brownout-moe.cli")

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Flag combination that argparse cannot express."""


def create_error_response(message: str, details: Optional[Dict[str, Any]] = None) -> str:
    """Create standardized error response."""
    error_text = f"Error: {message}"

    if details:
        error_text += f"\nDetails:\n{json.dumps(details, indent=2, default=str)}"

    return error_text


def create_success_response(data: Any) -> str:
    """Create standardized success response (JSON document)."""
    return json.dumps(data, indent=2, default=str)


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from None


def _sweep_points(text: str) -> List[SweepPoint]:
    points: List[SweepPoint] = []
    for part in text.split(","):
        if not part.strip():
            continue
        way, sep, threshold = part.partition(":")
        if not sep:
            raise argparse.ArgumentTypeError(f"sweep point '{part}' must look like way:threshold")
        try:
            points.append(SweepPoint(way=int(way), threshold=float(threshold)))
        except (ValueError, ValidationError):
            raise argparse.ArgumentTypeError(f"invalid sweep point '{part}'") from None
    return points


def cmd_route(args: argparse.Namespace) -> Dict[str, Any]:
    counts: List[int] = args.counts
    m = args.m if args.m is not None else len(counts)
    if len(counts) != m:
        raise UsageError(f"--counts has {len(counts)} entries but --m is {m}")
    config = BrownoutConfig(way=args.k, threshold=args.threshold, use_full_brownout=args.strategy == "full")
    assignments = [ExpertAssignment.of_count(i, count) for i, count in enumerate(counts)]
    plan = plan_brownout(assignments, m, config)
    result = plan_to_dict(plan, plan_stats(plan, m))
    result["strategy"] = config.strategy.value
    return result


def cmd_distill(args: argparse.Namespace, env: Dict[str, Any]) -> Dict[str, Any]:
    if args.layer is not None:
        layer = load_layer(args.layer)
    else:
        document = load_simulation_document(args.config)
        layer = build_layer(document, args.config.parent)
    cfg = DistillConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        tolerance=args.tolerance,
    )
    tokens = synthetic_tokens(args.tokens, layer.d, args.seed)
    workers = args.max_workers if args.max_workers is not None else env["max_workers"]
    distilled, reports = distill_layer(layer, tokens, cfg, max_workers=workers)
    if args.out is not None:
        save_layer(distilled, args.out)
    return {
        "groups": [
            {
                "group_id": r.group_id,
                "member_expert_ids": r.member_expert_ids,
                "initial_loss": r.loss_curve[0][1],
                "final_loss": r.final_loss,
                "lower_bound": r.lower_bound,
                "epochs_run": r.epochs_run,
            }
            for r in reports
        ],
        "layer_out": str(args.out) if args.out is not None else None,
    }


def _document_with_overrides(document: SimulationDocument, args: argparse.Namespace) -> SimulationDocument:
    if args.controller is None and args.threshold is None:
        return document
    data = document.controller.model_dump()
    if args.controller is not None:
        data["mode"] = args.controller
    if args.threshold is not None:
        data["threshold"] = args.threshold
    return document.model_copy(update={"controller": ControllerConfig.model_validate(data)})


def cmd_simulate(args: argparse.Namespace, env: Dict[str, Any]) -> Dict[str, Any]:
    document = _document_with_overrides(load_simulation_document(args.config), args)
    base_dir = args.config.parent
    trace = read_trace_csv(args.trace) if args.trace is not None else build_trace(document, base_dir)
    result = run_simulation(trace, document.to_sim_config(), build_layer(document, base_dir))
    out_dir = args.out if args.out is not None else Path(env["output_dir"])
    paths = write_simulation_outputs(result, out_dir)
    report = result.report
    return {
        "requests": report.requests_total,
        "throughput": report.throughput,
        "prefill_p90": report.prefill.p90,
        "decode_p90": report.decode.p90,
        "prefill_violation_rate": report.prefill.violation_rate,
        "decode_violation_rate": report.decode.violation_rate,
        "files": {name: str(path) for name, path in paths.items()},
    }


def cmd_md1(args: argparse.Namespace) -> Dict[str, Any]:
    params = MD1Params(lam=args.lam, tau=args.tau)
    result: Dict[str, Any] = {
        "lambda": params.lam,
        "tau": params.tau,
        "utilisation": md1_utilisation(params),
        "waiting_time": md1_waiting_time(params),
        "response_time": md1_response_time(params),
    }
    if args.simulate:
        result["simulated_response_time"] = simulate_md1(params.lam, params.tau, args.simulate, args.seed)
    return result


def cmd_speedup(args: argparse.Namespace) -> Dict[str, Any]:
    query = SpeedupQuery(alpha=args.alpha, k_factor=args.k)
    return {"alpha": query.alpha, "k": query.k_factor, "speedup": amdahl_speedup(query)}


def cmd_analyze(args: argparse.Namespace) -> Dict[str, Any]:
    records = read_records_csv(args.records)
    summary = analyze_records(records, args.prefill_slo, args.decode_slo)
    if args.thresholds is not None:
        means = mean_thresholds(read_thresholds_csv(args.thresholds))
        summary = summary.model_copy(update={"controller_mean_threshold": means})
    result = summary.model_dump(mode="json")
    if args.series is not None:
        points = latency_series(records)
        write_series_csv(points, args.series)
        result["series_out"] = str(args.series)
        result["series_points"] = len(points)
    return result


def cmd_generate_trace(args: argparse.Namespace) -> Dict[str, Any]:
    document = load_simulation_document(args.config)
    if args.seed is not None:
        document = document.model_copy(
            update={"workload": document.workload.model_copy(update={"seed": args.seed})}
        )
    trace = build_trace(document, args.config.parent)
    write_trace_csv(trace, args.out)
    return {"requests": len(trace), "out": str(args.out)}


def cmd_sweep(args: argparse.Namespace, env: Dict[str, Any]) -> Dict[str, Any]:
    document = load_simulation_document(args.config)
    base_dir = args.config.parent
    cfg = document.to_sim_config()
    layer = build_layer(document, base_dir)
    workers = args.max_workers if args.max_workers is not None else env["max_workers"]

    runs: List[Dict[str, Any]] = []
    traces: List[Tuple[Optional[float], List[Request]]] = []
    if args.rates:
        horizon = document.workload.schedule().horizon or args.duration
        in_dist, out_dist = document.workload.distributions(document.engine.max_seq_len)
        for rate in args.rates:
            schedule = RateSchedule.from_tuples([(0.0, horizon, rate)])
            traces.append((rate, generate_trace(schedule, in_dist, out_dist, document.workload.seed, cfg.max_seq_len)))
    else:
        traces.append((None, build_trace(document, base_dir)))

    for rate, trace in traces:
        for result in sweep(trace, cfg, args.points, max_workers=workers, layer=layer):
            runs.append({"rate": rate, **result.model_dump()})

    out_dir = args.out if args.out is not None else Path(env["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "sweep.json"
    out_path.write_text(json.dumps(runs, indent=2), encoding="utf-8")
    logger.info(f"Wrote {len(runs)} sweep results to {out_path}")
    return {"runs": runs, "out": str(out_path)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brownout-sim", description="Brownout MoE serving simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    route = sub.add_parser("route", help="Plan brownout routing for per-expert token counts")
    route.add_argument("--counts", type=_int_list, required=True, help="Comma-separated token counts per expert")
    route.add_argument("--m", type=int, default=None, help="Number of experts (default: number of counts)")
    route.add_argument("--k", type=int, required=True, help="Way: original experts per united expert")
    route.add_argument("--threshold", type=float, required=True)
    route.add_argument("--strategy", choices=["full", "partial"], default="partial")

    distill = sub.add_parser("distill", help="Distill the united experts of a layer")
    source = distill.add_mutually_exclusive_group(required=True)
    source.add_argument("--layer", type=Path, help="Layer JSON file")
    source.add_argument("--config", type=Path, help="Experiment document whose model section defines the layer")
    distill.add_argument("--tokens", type=int, default=1024, help="Synthetic training tokens")
    distill.add_argument("--epochs", type=int, default=500)
    distill.add_argument("--lr", type=float, default=0.05)
    distill.add_argument("--batch-size", type=int, default=64)
    distill.add_argument("--tolerance", type=float, default=0.0)
    distill.add_argument("--seed", type=int, default=0)
    distill.add_argument("--max-workers", type=int, default=None)
    distill.add_argument("--out", type=Path, default=None, help="Write the distilled layer JSON here")

    simulate = sub.add_parser("simulate", help="Run a serving simulation")
    simulate.add_argument("--config", type=Path, required=True)
    simulate.add_argument("--trace", type=Path, default=None, help="Replay this trace CSV instead of generating one")
    simulate.add_argument("--out", type=Path, default=None, help="Output directory (default BROWNOUT_OUTPUT_DIR)")
    simulate.add_argument("--controller", choices=["off", "static", "salc"], default=None)
    simulate.add_argument("--threshold", type=float, default=None, help="Static threshold override")

    md1 = sub.add_parser("md1", help="M/D/1 mean response time")
    md1.add_argument("--lambda", dest="lam", type=float, required=True)
    md1.add_argument("--tau", type=float, required=True)
    md1.add_argument("--simulate", type=int, default=0, help="Also simulate this many arrivals")
    md1.add_argument("--seed", type=int, default=0)

    speedup = sub.add_parser("speedup", help="Amdahl speedup")
    speedup.add_argument("--alpha", type=float, required=True)
    speedup.add_argument("--k", type=float, required=True)

    analyze = sub.add_parser("analyze", help="Summarise a records.csv file")
    analyze.add_argument("--records", type=Path, required=True)
    analyze.add_argument("--prefill-slo", type=float, default=0.25)
    analyze.add_argument("--decode-slo", type=float, default=0.15)
    analyze.add_argument("--thresholds", type=Path, default=None, help="thresholds.csv of the same run")
    analyze.add_argument("--series", type=Path, default=None, help="Write the per-second P90 series CSV here")

    generate = sub.add_parser("generate-trace", help="Write a workload trace CSV")
    generate.add_argument("--config", type=Path, required=True)
    generate.add_argument("--out", type=Path, required=True)
    generate.add_argument("--seed", type=int, default=None)

    sweep_cmd = sub.add_parser("sweep", help="Static-threshold throughput sweep")
    sweep_cmd.add_argument("--config", type=Path, required=True)
    sweep_cmd.add_argument("--points", type=_sweep_points, required=True, help="way:threshold,...")
    sweep_cmd.add_argument("--rates", type=_float_list, default=None, help="Constant arrival rates to sweep")
    sweep_cmd.add_argument("--duration", type=float, default=60.0, help="Trace length for --rates without a schedule")
    sweep_cmd.add_argument("--max-workers", type=int, default=None)
    sweep_cmd.add_argument("--out", type=Path, default=None)

    return parser


def dispatch(args: argparse.Namespace, env: Dict[str, Any]) -> Dict[str, Any]:
    if args.command == "route":
        return cmd_route(args)
    if args.command == "distill":
        return cmd_distill(args, env)
    if args.command == "simulate":
        return cmd_simulate(args, env)
    if args.command == "md1":
        return cmd_md1(args)
    if args.command == "speedup":
        return cmd_speedup(args)
    if args.command == "analyze":
        return cmd_analyze(args)
    if args.command == "generate-trace":
        return cmd_generate_trace(args)
    return cmd_sweep(args, env)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    try:
        env = get_config()
        configure_logging(env)
        result = dispatch(args, env)
    except ValidationError as e:
        print(
            create_error_response("Input validation failed", {"validation_errors": [str(err) for err in e.errors()]}),
            file=sys.stderr,
        )
        return EXIT_DOMAIN
    except BrownoutError as e:
        print(create_error_response(e.message, {"component": e.component, **e.details}), file=sys.stderr)
        return EXIT_DOMAIN
    except UsageError as e:
        print(create_error_response(str(e)), file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as e:
        print(create_error_response("File is not valid JSON", {"error": str(e)}), file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(create_error_response("File access failed", {"error": str(e)}), file=sys.stderr)
        return EXIT_USAGE

    print(create_success_response(result))
    return EXIT_OK


def run() -> None:
    """Console script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
