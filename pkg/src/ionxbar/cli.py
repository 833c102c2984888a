"""Command-line front end.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage/config error.
Failures print one JSON object on stderr with ``code`` and ``message``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, RunConfig, parse_config
from .experiments import EXPERIMENTS, ExperimentTrace, atomic_write, utc_stamp
from .network import CrossbarArray, NetworkError, ReadMode, build_nodal_system, export_matrix_market, read_bias, read_mac
from .writes import PolicyTopologyMismatch, WriteError, check_compatible, execute_plan, plan_writes, random_targets

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    code = "USAGE"


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="JSON run configuration")
    g.add_argument("--preset", help="device parameter preset")
    g.add_argument("--seed", type=int)
    g.add_argument("--output-dir", help="where traces are written (default $IONXBAR_OUTPUT_DIR or ./runs)")
    g.add_argument("--topology", choices=["conventional-shared-rail", "proposed-isolated-loop"])
    g.add_argument("--rows", type=int)
    g.add_argument("--cols", type=int)
    g.add_argument("--wire-resistance", type=float, help="ohm per rail segment")
    g.add_argument("--policy", choices=["sequential-cellwise", "row-parallel", "full-parallel", "half-select-v2"])
    g.add_argument("--pulse-voltage", type=float)
    g.add_argument("--pulse-dt", type=float, help="programming pulse / scheduler slot length, s")
    g.add_argument("--read-voltage", type=float)
    g.add_argument("--set", action="append", default=[], metavar="KEY=JSON", help="override any config key, e.g. params.g0=1e-6")
    return p


def build_parser() -> argparse.ArgumentParser:
    epilog = "experiments:\n" + "\n".join(f"  {k:<11} {v}" for k, v in EXPERIMENTS.items())
    parser = argparse.ArgumentParser(
        prog="ionxbar",
        description="Ion-intercalation memristor and crossbar simulator.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = _common()
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="device protocols and array writes")
    simsub = sim.add_subparsers(dest="target", required=True)
    dev = simsub.add_parser("device", parents=[common], help="single-device protocol (s1, s2, retention, iv)")
    dev.add_argument("--protocol", required=True, choices=["s1", "s2", "retention", "iv"])
    arr = simsub.add_parser("array", parents=[common], help="random-target write on one array")
    arr.add_argument("--size", type=int, help="shorthand for --rows N --cols N")

    wr = sub.add_parser("write", parents=[common], help="program an array to target conductances")
    wr.add_argument("--state", type=Path, help="array state JSON (default: erased array from config)")
    wr.add_argument("--targets", type=Path, required=True, help="target conductances, JSON matrix or CSV")
    wr.add_argument("--out-state", type=Path, help="where to save the programmed array state")

    rd = sub.add_parser("read", parents=[common], help="analog MAC read of an array")
    rd.add_argument("--state", type=Path, help="array state JSON (default: erased array from config)")
    rd.add_argument("--inputs", type=_csv_floats, help="row voltages (default: read voltage on every row)")
    rd.add_argument("--mode", choices=[m.value for m in ReadMode], default=ReadMode.IDEAL.value)
    rd.add_argument("--matrix-market", type=Path, help="also export the read-mode conductance matrix")

    sw = sub.add_parser("sweep", help="size sweeps")
    swsub = sw.add_subparsers(dest="target", required=True)
    cx = swsub.add_parser("complexity", parents=[common], help="phase counts per policy vs array size")
    cx.add_argument("--sizes", type=_csv_ints, required=True)
    cx.add_argument("--no-simulate", action="store_true", help="plan only, skip write-time simulation")
    sn = swsub.add_parser("sneak", parents=[common], help="write disturbance, conventional vs proposed")
    sn.add_argument("--sizes", type=_csv_ints, required=True)

    ft = sub.add_parser("fit", parents=[common], help="fit R = a/q + b to a trace CSV")
    ft.add_argument("--trace", type=Path, required=True)
    return parser


def overrides_from_args(args) -> dict:
    out = {}
    simple = {
        "preset": "preset",
        "seed": "seed",
        "output_dir": "output_dir",
        "topology": "topology.kind",
        "rows": "topology.rows",
        "cols": "topology.cols",
        "wire_resistance": "topology.wire_resistance",
        "policy": "policy.kind",
        "pulse_voltage": "policy.pulse_voltage",
        "pulse_dt": "policy.pulse_dt",
        "read_voltage": "read_voltage",
    }
    for attr, key in simple.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if getattr(args, "size", None) is not None:
        out["topology.rows"] = out["topology.cols"] = args.size
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _experiment_from_args(args) -> tuple[str, dict]:
    if args.command == "simulate":
        return (args.protocol, {}) if args.target == "device" else ("array", {})
    if args.command == "sweep":
        opts = {"sizes": args.sizes}
        if args.target == "complexity":
            opts["simulate"] = not args.no_simulate
        return args.target, opts
    if args.command == "write":
        return "write", {k: str(v) for k, v in (("state", args.state), ("targets", args.targets), ("out_state", args.out_state)) if v}
    if args.command == "read":
        opts = {"mode": args.mode}
        if args.state:
            opts["state"] = str(args.state)
        if args.inputs is not None:
            opts["inputs"] = args.inputs
        if args.matrix_market:
            opts["matrix_market"] = str(args.matrix_market)
        return "read", opts
    return "fit", {"trace": str(args.trace)}


def _emit(config: RunConfig, trace: ExperimentTrace, stamp: str, extra: dict | None = None) -> dict:
    trace.metadata.update(config.metadata())
    csv_path, json_path = trace.write(config.output_dir, seed=config.seed, timestamp=stamp)
    out = {"status": "ok", "experiment": trace.name, "rows": len(trace), "files": [str(csv_path), str(json_path)]}
    out.update(extra or {})
    return out


def _array_from(config: RunConfig, state: str | None) -> CrossbarArray:
    if state:
        return CrossbarArray.from_dict(json.loads(Path(state).read_text()))
    top = config.topology
    return CrossbarArray.fresh(top.kind, top.rows, top.cols, config.params, wire_resistance=config.wire_resistance)


def _load_targets(path: str) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        return np.atleast_2d(np.loadtxt(path, delimiter=","))
    doc = json.loads(path.read_text())
    if isinstance(doc, dict):
        doc = doc["target_G_S"]
    return np.atleast_2d(np.asarray(doc, dtype=float))


def _write_outputs(config: RunConfig, array: CrossbarArray, target_g, name: str, stamp: str, out_state=None) -> dict:
    policy = config.policy
    check_compatible(policy, array.topology.kind)
    report = execute_plan(array, plan_writes(target_g, policy, array.params), policy)
    rows = list(report.disturbance_rows())
    cols = {
        "phase": [r[0] for r in rows],
        "cell_row": [r[1] for r in rows],
        "cell_col": [r[2] for r in rows],
        "dq_C": [r[3] for r in rows],
        "G_S": [r[4] for r in rows],
    }
    trace = ExperimentTrace(name, cols, {"report": report.to_dict(), "topology": array.topology.kind.value})
    result = _emit(config, trace, stamp)
    report_path = Path(config.output_dir) / f"{name}-{stamp}-{config.seed}.report.json"
    doc = {"schema_version": 1, **report.to_dict()}
    atomic_write(report_path, json.dumps(doc, indent=2) + "\n")
    state_path = Path(out_state) if out_state else Path(config.output_dir) / f"{name}-{stamp}-{config.seed}.state.json"
    atomic_write(state_path, json.dumps({"schema_version": 1, **report.array.to_dict()}, indent=2) + "\n")
    result["files"] += [str(report_path), str(state_path)]
    result.update(
        phase_count=report.phase_count,
        executed_phases=report.executed_phases,
        target_error=report.target_error,
        disturbance_l1_C=report.disturbance_l1,
    )
    return result


def dispatch(config: RunConfig, stamp: str | None = None, out=None) -> int:
    """Run the configured experiment and write its artifacts; returns an exit code."""
    stamp = stamp or utc_stamp()
    name, opts, params = config.experiment, config.options, config.params
    try:
        if name == "s1":
            result = _emit(config, ex.run_s1_protocol(params, v_p=config.policy.pulse_voltage, pulse_dt=config.policy.pulse_dt), stamp)
        elif name == "s2":
            result = _emit(config, ex.run_s2_protocol(params, v_p=config.policy.pulse_voltage), stamp)
        elif name == "retention":
            result = _emit(config, ex.run_retention(params, v_p=config.policy.pulse_voltage), stamp)
        elif name == "iv":
            trace = ex.run_iv_sweep(params, v_amplitude=opts.get("v_amplitude", config.read_voltage), cycles=opts.get("cycles", 2))
            result = _emit(config, trace, stamp, {"hysteresis_gap_A": ex.hysteresis_gap(trace)})
        elif name == "array":
            array = _array_from(config, None)
            targets = random_targets(np.random.default_rng(config.seed), array.shape, params)
            result = _write_outputs(config, array, targets, "array", stamp)
        elif name == "write":
            array = _array_from(config, opts.get("state"))
            result = _write_outputs(config, array, _load_targets(opts["targets"]), "write", stamp, opts.get("out_state"))
        elif name == "read":
            array = _array_from(config, opts.get("state"))
            inputs = opts.get("inputs") or [config.read_voltage] * array.shape[0]
            currents = read_mac(array, inputs, opts.get("mode", "ideal"))
            trace = ExperimentTrace("read", {"column": list(range(array.shape[1])), "I_A": currents.tolist()}, {"inputs_V": list(inputs)})
            extra = {"column_currents_A": currents.tolist()}
            if opts.get("matrix_market"):
                export_matrix_market(build_nodal_system(array, read_bias(inputs, array.shape[1])), opts["matrix_market"], reduced=False)
                extra["matrix_market"] = opts["matrix_market"]
            result = _emit(config, trace, stamp, extra)
        elif name == "complexity":
            trace = ex.run_complexity_sweep(
                opts["sizes"], params, seed=config.seed, pulse_dt=config.policy.pulse_dt, simulate=opts.get("simulate", True)
            )
            result = _emit(config, trace, stamp, {"phase_counts": ex.phase_count_table(trace)})
        elif name == "sneak":
            parts = [ex.run_sneak_demo(m, params, seed=config.seed) for m in opts["sizes"]]
            trace = ex.concat_traces("sneak", parts)
            summary = {str(p.metadata["M"]): p.metadata["summary"] for p in parts}
            result = _emit(config, trace, stamp, {"summary": summary})
        elif name == "fit":
            fit = ex.fit_k_model(ExperimentTrace.read(opts["trace"]))
            doc = {"schema_version": 1, "trace": opts["trace"], **fit.to_dict()}
            path = Path(config.output_dir) / f"fit-{stamp}-{config.seed}.json"
            atomic_write(path, json.dumps(doc, indent=2) + "\n")
            result = {"status": "ok", "experiment": "fit", "files": [str(path)], **{k: v for k, v in doc.items() if k != "residuals_ohm"}}
        else:
            raise UsageError(f"unknown experiment {name!r}")
    except (ConfigError, PolicyTopologyMismatch, UsageError) as exc:
        return _fail(exc, EXIT_USAGE)
    except (WriteError, NetworkError, ex.FitError, ValueError, OSError, KeyError) as exc:
        return _fail(exc, EXIT_RUNTIME)
    print(json.dumps(result, indent=2, default=str), file=out or sys.stdout)
    return EXIT_OK


def _fail(exc: Exception, status: int) -> int:
    doc = {"status": "error", "code": getattr(exc, "code", type(exc).__name__), "message": str(exc)}
    pointer = getattr(exc, "pointer", "")
    if pointer:
        doc["pointer"] = pointer
    print(json.dumps(doc), file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = overrides_from_args(args)
        name, opts = _experiment_from_args(args)
        overrides["experiment.name"] = name
        for key, value in opts.items():
            overrides[f"experiment.options.{key}"] = value
        config = parse_config(args.config, overrides)
    except (ConfigError, UsageError) as exc:
        return _fail(exc, EXIT_USAGE)
    if name in ("array", "write"):
        try:
            check_compatible(config.policy, config.topology.kind)
        except PolicyTopologyMismatch as exc:
            return _fail(exc, EXIT_USAGE)
    return dispatch(config)


if __name__ == "__main__":
    sys.exit(main())
