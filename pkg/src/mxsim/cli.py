"""mxsim command line.

Exit codes: 0 success, 1 I/O error, 2 validation error, 3 internal invariant
violation.  JSON outputs are pretty-printed with sorted keys and start with
a ``header`` object (tool, version, command, config hash); everything else in
a file is a pure function of the flags and input files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .accel import HardwareConfig, WorkloadSpec, fixed_plans, model_latency, speedup_report, speedup_table
from .codec import (
    decode_tensor,
    encode_tensor,
    format_by_name,
    mx_tensor_to_bytes,
    quant_error_stats,
)
from .errors import InvariantError, MxError, ValidationError
from .gemm import attention_forward, linear_forward
from .planner import MODES, PER_TIMESTEP, AttentionPlan, PrecisionPlanSet, build_plan_set
from .sweep import MeanRelFrobenius, SweepConfig, SweepResult, run_sweep
from .synthetic import OutlierProfile, transformer_block_workload, write_synthetic_bundle
from .tensor_io import load_bundle, read_tensor, write_tensor


def _grid(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mxsim", description="MX6/MX9 mixed-precision emulator and latency model")
    parser.add_argument("--config", help="JSON file supplying defaults for any subcommand option")
    parser.add_argument("--seed", type=int, default=None, help="seed for synthetic fixtures (default 0)")
    parser.add_argument("--quiet", action="store_true", help="suppress human-readable output")
    parser.add_argument("--version", action="version", version=f"mxsim {__version__}")
    # global flags are also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a seeded synthetic workload and calibration bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int)
    p.add_argument("--tokens", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--weights", choices=["normal", "mx6"])

    p = sub.add_parser("quantize", parents=[common], help="encode an MXT1 tensor to packed MX and report error stats")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--axis", type=int)
    p.add_argument("--format", choices=["mx6", "mx9"])
    p.add_argument("--decoded", help="also write the decoded tensor as MXT1")

    p = sub.add_parser("plan", parents=[common], help="build per-(layer, timestep) precision plans")
    p.add_argument("--bundle")
    p.add_argument("--workload")
    p.add_argument("--p1", type=float)
    p.add_argument("--p2", type=float)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--output", required=True)

    p = sub.add_parser("emulate", parents=[common], help="run bit-exact mixed-precision layers on calibration tensors")
    p.add_argument("--bundle")
    p.add_argument("--workload")
    p.add_argument("--plan")
    p.add_argument("--layer", action="append", help="restrict to these layers (repeatable)")
    p.add_argument("--output", required=True)

    p = sub.add_parser("simulate", parents=[common], help="accelerator latency for a workload and plan")
    p.add_argument("--workload")
    p.add_argument("--plan", help="plan file; without it --p1/--p2 set the outlier counts")
    p.add_argument("--p1", type=float)
    p.add_argument("--p2", type=float)
    p.add_argument("--hardware")
    p.add_argument("--baselines", help="JSON map of name -> measured baseline seconds")
    p.add_argument("--output", required=True)

    p = sub.add_parser("sweep", parents=[common], help="grid search over (p1, p2)")
    p.add_argument("--bundle")
    p.add_argument("--workload")
    p.add_argument("--hardware")
    p.add_argument("--p1-grid", type=_grid)
    p.add_argument("--p2-grid", type=_grid)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--output", required=True)

    p = sub.add_parser("report", parents=[common], help="render result files as text tables (re-checks sweep argmin)")
    p.add_argument("files", nargs="+")
    p.add_argument("--output", help="write the text report here as well")
    return parser


# helpers ------------------------------------------------------------------------


def _resolve(args: argparse.Namespace, config: dict, name: str, default=None, required: bool = False):
    value = getattr(args, name, None)
    if value is None:
        value = config.get(name, config.get(name.replace("_", "-")))
    if value is None:
        value = default
    if value is None and required:
        raise ValidationError(f"{args.command}: --{name.replace('_', '-')} is required (flag or --config)")
    return value


def _header(command: str, settings: dict) -> dict:
    canon = json.dumps(settings, sort_keys=True, default=str).encode()
    return {
        "tool": "mxsim",
        "version": __version__,
        "command": command,
        "config_hash": hashlib.sha256(canon).hexdigest()[:16],
    }


def _write_json(path: str, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})")


def _hardware(path: str | None) -> HardwareConfig:
    return HardwareConfig.load(path) if path else HardwareConfig()


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


# commands -----------------------------------------------------------------------


def cmd_synth(args, config) -> int:
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    workload = transformer_block_workload(
        hidden=_resolve(args, config, "hidden", 64),
        tokens=_resolve(args, config, "tokens", 32),
        heads=_resolve(args, config, "heads", 4),
        depth=_resolve(args, config, "depth", 1),
        timesteps=_resolve(args, config, "timesteps", 4),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profile = OutlierProfile(weights=_resolve(args, config, "weights", "normal"))
    write_synthetic_bundle(out / "bundle", workload, seed, profile)
    (out / "workload.json").write_text(workload.to_json())
    _write_json(str(out / "hardware.json"), HardwareConfig().to_dict())
    _say(args, f"wrote {out}/bundle, {out}/workload.json and {out}/hardware.json (seed {seed})")
    return 0


def cmd_quantize(args, config) -> int:
    spec = format_by_name(_resolve(args, config, "format", "mx6"))
    axis = _resolve(args, config, "axis", -1)
    t = read_tensor(args.input)
    mt = encode_tensor(t, axis, spec)
    Path(args.output).write_bytes(mx_tensor_to_bytes(mt))
    if args.decoded:
        write_tensor(decode_tensor(mt), args.decoded)
    stats = quant_error_stats(t, axis, spec)
    doc = {
        "header": _header("quantize", {"format": spec.name, "axis": axis}),
        "format": spec.name,
        "shape": list(t.shape),
        "axis": mt.axis,
        "groups": mt.group_count,
        "group_bytes": spec.group_bytes,
        "stats": stats.to_dict(),
    }
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_plan(args, config) -> int:
    bundle = load_bundle(_resolve(args, config, "bundle", required=True))
    workload = WorkloadSpec.load(_resolve(args, config, "workload", required=True))
    p1 = _resolve(args, config, "p1", 0.0)
    p2 = _resolve(args, config, "p2", 0.0)
    mode = _resolve(args, config, "mode", PER_TIMESTEP)
    plans = build_plan_set(bundle, workload.layers, workload.timesteps, p1, p2, mode)
    doc = json.loads(plans.to_json())
    doc["header"] = _header("plan", {"p1": p1, "p2": p2, "mode": mode, "workload": workload.to_dict()})
    _write_json(args.output, doc)
    _say(args, f"{len(plans)} plans (p1={p1}, p2={p2}, {mode}) -> {args.output}")
    return 0


def cmd_emulate(args, config) -> int:
    bundle = load_bundle(_resolve(args, config, "bundle", required=True))
    workload = WorkloadSpec.load(_resolve(args, config, "workload", required=True))
    plans = PrecisionPlanSet.load(_resolve(args, config, "plan", required=True))
    only = set(args.layer or config.get("layer", []) or [])
    entries = []
    for layer in workload.layers:
        if only and layer.name not in only:
            continue
        attention = layer.kind == "attention"
        for t in bundle.timesteps(layer.name, "query" if attention else "activation"):
            plan = plans[(layer.name, t)]
            if attention:
                if not isinstance(plan, AttentionPlan):
                    raise ValidationError(f"{layer.name}: expected an attention plan")
                q, k, v = (bundle.load(layer.name, t, r) for r in ("query", "key", "value"))
                res = attention_forward(q, k, v, plan)
            else:
                res = linear_forward(bundle.load(layer.name, t, "activation"), bundle.load_weight(layer.name, t), plan)
            digest = hashlib.sha256(np.ascontiguousarray(res.output).tobytes()).hexdigest()[:16]
            entries.append({"layer": layer.name, "timestep": t, "output_sha256": digest, **res.summary()})
    if not entries:
        raise ValidationError("no layer in the workload has calibration data to emulate")
    mean = sum(e["rel_frobenius"] for e in entries) / len(entries)
    doc = {
        "header": _header("emulate", {"layers": sorted(only), "workload": workload.to_dict()}),
        "kind": "emulation",
        "mean_rel_frobenius": mean,
        "entries": entries,
    }
    _write_json(args.output, doc)
    _say(args, f"emulated {len(entries)} layer-steps, mean rel. Frobenius error {mean:.4e}")
    return 0


def cmd_simulate(args, config) -> int:
    workload = WorkloadSpec.load(_resolve(args, config, "workload", required=True))
    hw = _hardware(_resolve(args, config, "hardware"))
    plan_path = _resolve(args, config, "plan")
    if plan_path:
        plans = PrecisionPlanSet.load(plan_path)
        settings = {"plan": json.loads(plans.to_json())}
    else:
        p1, p2 = _resolve(args, config, "p1", 0.0), _resolve(args, config, "p2", 0.0)
        plans = fixed_plans(workload, p1, p2)
        settings = {"p1": p1, "p2": p2}
    report = model_latency(workload, plans, hw)
    doc = {
        "header": _header("simulate", {**settings, "hardware": hw.to_dict(), "workload": workload.to_dict()}),
        "kind": "latency",
        "workload": workload.name,
        **report.to_dict(),
    }
    baselines = _resolve(args, config, "baselines")
    if baselines:
        base = _load_json(baselines) if isinstance(baselines, str) else baselines
        doc["speedup"] = speedup_report({workload.name: report}, base)
    _write_json(args.output, doc)
    _say(args, report.table())
    return 0


def cmd_sweep(args, config) -> int:
    bundle = load_bundle(_resolve(args, config, "bundle", required=True))
    workload = WorkloadSpec.load(_resolve(args, config, "workload", required=True))
    hw = _hardware(_resolve(args, config, "hardware"))
    defaults = SweepConfig()
    cfg = SweepConfig(
        tuple(_resolve(args, config, "p1_grid", defaults.p1_grid)),
        tuple(_resolve(args, config, "p2_grid", defaults.p2_grid)),
        _resolve(args, config, "alpha", defaults.alpha),
        MeanRelFrobenius.name,
        _resolve(args, config, "mode", defaults.mode),
    )
    result = run_sweep(cfg, bundle, workload, hw)
    result.verify()
    doc = {
        "header": _header("sweep", {**cfg.to_dict(), "hardware": hw.to_dict(), "workload": workload.to_dict()}),
        "kind": "sweep",
        **result.to_dict(),
    }
    _write_json(args.output, doc)
    _say(args, result.table())
    return 0


def _render(path: str, doc: dict) -> str:
    kind = doc.get("kind")
    if kind == "sweep":
        result = SweepResult.from_dict(doc)
        result.verify()
        return result.table()
    if kind == "latency":
        lines = [f"{'layer':<24}{'compute_s':>14}{'memory_s':>14}{'latency_s':>14}"]
        for name, agg in doc["per_layer"].items():
            lines.append(f"{name:<24}{agg['compute_s']:>14.6e}{agg['memory_s']:>14.6e}{agg['latency_s']:>14.6e}")
        total = sum(agg["latency_s"] for agg in doc["per_layer"].values())
        if not np.isclose(total, doc["total_s"], rtol=1e-12, atol=0):
            raise InvariantError(f"{path}: per-layer latencies sum to {total}, file says {doc['total_s']}")
        lines.append(f"{'total':<24}{'':>28}{doc['total_s']:>14.6e}")
        hw = doc["hardware"]
        lines.append(
            f"hardware: {hw['num_arrays']} x {hw['array_dim']}x{hw['array_dim']} PEs @ {hw['frequency_hz'] / 1e6:g} MHz, "
            f"{hw['mem_bandwidth_bytes_per_s'] / 1e9:g} GB/s, {hw['on_chip_bytes'] / 2**20:g} MB on-chip"
        )
        if "speedup" in doc:
            lines.append(speedup_table(doc["speedup"]))
        return "\n".join(lines)
    if kind == "emulation":
        lines = [f"{'layer':<24}{'t':>4}{'rel_frob':>14}{'max_abs':>14}{'mx6xmx6':>10}{'mx6xmx9':>10}{'mx9xmx9':>10}"]
        for e in doc["entries"]:
            c = e["group_counts"]
            lines.append(
                f"{e['layer']:<24}{e['timestep']:>4}{e['rel_frobenius']:>14.4e}{e['max_abs']:>14.4e}"
                f"{c['mx6xmx6']:>10}{c['mx6xmx9']:>10}{c['mx9xmx9']:>10}"
            )
        lines.append(f"mean rel. Frobenius error {doc['mean_rel_frobenius']:.4e}")
        return "\n".join(lines)
    if "entries" in doc and "mode" in doc:
        plans = PrecisionPlanSet.from_json(json.dumps(doc))
        lines = [f"{'layer':<24}{'t':>4}  mx9 share"]
        for (layer, t), p in sorted(plans.plans.items()):
            share = f"{p.h_hi}/{p.heads} heads" if isinstance(p, AttentionPlan) else f"{p.n_hi}/{p.channels} channels"
            lines.append(f"{layer:<24}{t:>4}  {share}")
        return "\n".join(lines)
    raise ValidationError(f"{path}: unrecognized result file")


def cmd_report(args, config) -> int:
    parts = []
    for path in args.files:
        parts.append(f"== {path}\n{_render(path, _load_json(path))}")
    text = "\n\n".join(parts) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    _say(args, text.rstrip("\n"))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "quantize": cmd_quantize,
    "plan": cmd_plan,
    "emulate": cmd_emulate,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_json(args.config) if args.config else {}
        return COMMANDS[args.command](args, config)
    except MxError as exc:
        field = getattr(exc, "field", None)
        where = f" [field: {field}]" if field else ""
        print(f"mxsim {args.command}: error ({exc.code}){where}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mxsim {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
