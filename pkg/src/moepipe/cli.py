"""Experiment runner: route | run | sweep | verify | compare.

Configuration comes from an optional JSON file plus command-line flags, with
flags taking precedence over file values and file values over preset
defaults.  Every subcommand is deterministic for a fixed config and seed and
writes byte-identical primary outputs on rerun (no timestamps); progress
notes go to stderr/stdout only.

Exit codes: 0 success, 1 internal error or verification failure, 2 invalid
or infeasible configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from .assigner import SplitKey, SplitMetadata, sweep_split, select_split
from .config import (
    ConfigurationError,
    ModelConfig,
    ParallelSpec,
    WorkloadSpec,
    canonical_json,
    model_preset,
)
from .executor import execute_naive, execute_scheduled, random_weights
from .resolver import (
    DEFAULT_TILE_ROWS,
    meta_for_layer0,
    meta_for_layer1,
    resolve_layer0,
    resolve_layer1,
    validate_schedule,
)
from .routing import RoutingTable, build_routing
from .simulator import (
    CostModel,
    SimResult,
    cost_preset,
    simulate_coarse,
    simulate_fine,
    split_for,
)


class VerificationFailure(RuntimeError):
    """A verify run found a numeric mismatch or an undetected corruption."""


@dataclass
class Experiment:
    model: ModelConfig
    parallel: ParallelSpec
    workload: WorkloadSpec
    cost: CostModel
    cost_name: str
    blocks: int
    n_c: Optional[int]
    tile_rows: int
    tile_cols: Optional[int]
    mode: str
    rank: int


def _load_section(raw, preset_lookup, from_dict, default):
    """A config section is either a preset name or an inline object."""
    if raw is None:
        return default
    if isinstance(raw, str):
        return preset_lookup(raw)
    if isinstance(raw, dict):
        return from_dict(raw)
    raise ConfigurationError(f"config section must be a name or an object, got {raw!r}")


def _parse_mode(mode: str) -> Tuple[str, int]:
    if mode == "fine":
        return "fine", 0
    if mode == "sequential":
        return "coarse", 1
    if mode.startswith("coarse:"):
        try:
            chunks = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigurationError(f"bad chunk count in mode {mode!r}") from None
        if chunks < 1:
            raise ConfigurationError(f"chunk count must be >= 1 in mode {mode!r}")
        return "coarse", chunks
    raise ConfigurationError(
        f"unknown mode {mode!r}; expected fine, sequential or coarse:<k>"
    )


def _build_experiment(args) -> Experiment:
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config) as handle:
            file_cfg = json.load(handle)

    model = _load_section(
        file_cfg.get("model"),
        model_preset,
        ModelConfig.from_json_dict,
        model_preset("mixtral-8x7b"),
    )
    if getattr(args, "model", None):
        model = model_preset(args.model)

    parallel = _load_section(
        file_cfg.get("parallel"),
        lambda name: (_ for _ in ()).throw(
            ConfigurationError("parallel section has no presets")
        ),
        ParallelSpec.from_json_dict,
        ParallelSpec(tp=1, ep=1),
    )
    tp = args.tp if getattr(args, "tp", None) is not None else parallel.tp
    ep = args.ep if getattr(args, "ep", None) is not None else parallel.ep
    parallel = ParallelSpec(tp=tp, ep=ep)

    workload = _load_section(
        file_cfg.get("workload"),
        lambda name: (_ for _ in ()).throw(
            ConfigurationError("workload section has no presets")
        ),
        WorkloadSpec.from_json_dict,
        WorkloadSpec(M=4096, seed=0, std=0.0),
    )
    workload = WorkloadSpec(
        M=args.tokens if getattr(args, "tokens", None) is not None else workload.M,
        seed=args.seed if getattr(args, "seed", None) is not None else workload.seed,
        std=args.std if getattr(args, "std", None) is not None else workload.std,
    )

    cost_raw = file_cfg.get("cost")
    cost = _load_section(cost_raw, cost_preset, CostModel.from_json_dict, cost_preset("h800"))
    cost_name = cost_raw if isinstance(cost_raw, str) else "custom"
    if cost_raw is None:
        cost_name = "h800"
    if getattr(args, "cost", None):
        cost = cost_preset(args.cost)
        cost_name = args.cost

    sim_cfg = file_cfg.get("sim", {})
    blocks = getattr(args, "blocks", None)
    if blocks is None:
        blocks = int(sim_cfg.get("blocks", cost.blocks))
    n_c = getattr(args, "nc", None)
    if n_c is None:
        n_c = sim_cfg.get("n_c")
        n_c = int(n_c) if n_c is not None else None
    tile_rows = getattr(args, "tile_rows", None)
    if tile_rows is None:
        tile_rows = int(sim_cfg.get("tile_rows", DEFAULT_TILE_ROWS))
    tile_cols = getattr(args, "tile_cols", None)
    if tile_cols is None:
        tile_cols = sim_cfg.get("tile_cols")
        tile_cols = int(tile_cols) if tile_cols is not None else None
    mode = getattr(args, "mode", None) or sim_cfg.get("mode", "fine")
    _parse_mode(mode)
    rank = getattr(args, "rank", None)
    if rank is None:
        rank = int(sim_cfg.get("rank", 0))

    return Experiment(
        model=model,
        parallel=parallel,
        workload=workload,
        cost=cost,
        cost_name=cost_name,
        blocks=blocks,
        n_c=n_c,
        tile_rows=tile_rows,
        tile_cols=tile_cols,
        mode=mode,
        rank=rank,
    )


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="\n") as handle:
        handle.write(text)


def _routing_for(exp: Experiment, args) -> RoutingTable:
    routing_path = getattr(args, "routing", None)
    if routing_path:
        with open(routing_path) as handle:
            return RoutingTable.from_json_dict(json.load(handle))
    return build_routing(exp.model, exp.parallel, exp.workload)


def cmd_route(args) -> int:
    exp = _build_experiment(args)
    table = build_routing(exp.model, exp.parallel, exp.workload)
    out = os.path.join(args.out_dir, "routing.json")
    _write(out, table.to_json_str())
    print(f"achieved_std={table.achieved_std!r}")
    print(f"wrote {out}")
    return 0


def _simulate(exp: Experiment, routing: RoutingTable, args):
    kind, chunks = _parse_mode(exp.mode)
    meta0 = meta_for_layer0(exp.model, exp.workload, exp.tile_rows)
    meta1 = meta_for_layer1(exp.model, exp.workload, exp.tile_rows, exp.tile_cols)
    sched0 = resolve_layer0(routing, exp.rank, meta0)
    sched1 = resolve_layer1(routing, exp.rank, meta1)
    if kind == "coarse":
        return simulate_coarse(routing, exp.rank, exp.cost, chunks, meta0, meta1), sched0, sched1

    if getattr(args, "auto_split", False):
        metadata_path = getattr(args, "metadata", None) or os.path.join(
            args.out_dir, "metadata.json"
        )
        if not os.path.exists(metadata_path):
            raise ConfigurationError(
                f"--auto-split needs profiled metadata, none at {metadata_path}"
            )
        metadata = SplitMetadata.load(metadata_path)
        query = SplitKey.for_config(
            exp.model, exp.parallel, exp.workload.M, exp.cost_name, exp.blocks
        )
        split = select_split(metadata, query)
    else:
        n_c = exp.n_c if exp.n_c is not None else max(1, exp.blocks // 16)
        split = split_for(exp.blocks, n_c)
    return simulate_fine(sched0, sched1, routing, exp.cost, split), sched0, sched1


def cmd_run(args) -> int:
    exp = _build_experiment(args)
    routing = _routing_for(exp, args)
    result, sched0, sched1 = _simulate(exp, routing, args)
    payload = {
        "config": {
            "model": exp.model.to_json_dict(),
            "parallel": exp.parallel.to_json_dict(),
            "workload": exp.workload.to_json_dict(),
            "cost": exp.cost.to_json_dict(),
            "cost_name": exp.cost_name,
            "rank": exp.rank,
            "tile_rows": exp.tile_rows,
            "tile_cols": exp.tile_cols,
        },
        "result": result.to_json_dict(),
    }
    result_path = os.path.join(args.out_dir, "result.json")
    timeline_path = os.path.join(args.out_dir, "timeline.csv")
    _write(result_path, canonical_json(payload))
    _write(timeline_path, result.timeline_csv())
    if getattr(args, "dump_schedule", False):
        _write(os.path.join(args.out_dir, "schedule_layer0.json"), sched0.to_json_str())
        _write(os.path.join(args.out_dir, "schedule_layer1.json"), sched1.to_json_str())
    print(
        f"mode={result.mode} latency_ns={result.total_latency_ns} "
        f"hidden_fraction={result.hidden_fraction!r}"
    )
    print(f"wrote {result_path} and {timeline_path}")
    return 0


def cmd_sweep(args) -> int:
    exp = _build_experiment(args)
    record = sweep_split(
        exp.model,
        exp.parallel,
        exp.workload,
        exp.cost,
        exp.cost_name,
        blocks=exp.blocks,
        stride=args.stride,
        rank=exp.rank,
        tile_rows=exp.tile_rows,
        tile_cols=exp.tile_cols,
        jobs=args.jobs,
    )
    metadata_path = getattr(args, "metadata", None) or os.path.join(
        args.out_dir, "metadata.json"
    )
    if os.path.exists(metadata_path):
        metadata = SplitMetadata.load(metadata_path)
    else:
        metadata = SplitMetadata(records=[])
    metadata.add(record)
    os.makedirs(os.path.dirname(os.path.abspath(metadata_path)), exist_ok=True)
    metadata.save(metadata_path)

    curve_lines = ["n_c,latency_ns"]
    curve_lines += [f"{nc},{ns}" for nc, ns in record.curve]
    curve_path = os.path.join(args.out_dir, "curve.csv")
    _write(curve_path, "\n".join(curve_lines) + "\n")
    print(f"optimal n_c={record.optimal_nc} latency_ns={record.latency_ns}")
    print(f"wrote {metadata_path} and {curve_path}")
    return 0


def _verify_instance(
    model: ModelConfig, parallel: ParallelSpec, workload: WorkloadSpec
) -> None:
    routing = build_routing(model, parallel, workload)
    meta0 = meta_for_layer0(model, workload, tile_rows=4)
    meta1 = meta_for_layer1(model, workload, tile_rows=4, tile_cols=max(1, model.N // 4))
    scheds0 = [
        resolve_layer0(routing, group * parallel.tp, meta0)
        for group in range(parallel.ep)
    ]
    scheds1 = [
        resolve_layer1(routing, group * parallel.tp, meta1)
        for group in range(parallel.ep)
    ]
    rng = np.random.default_rng(workload.seed + 1)
    x = rng.standard_normal((workload.M, model.N))
    weights = random_weights(model, seed=workload.seed + 2)
    baseline = execute_naive(x, weights, routing)
    rescheduled = execute_scheduled(x, weights, routing, scheds0, scheds1)
    if baseline.shape != rescheduled.shape or not np.array_equal(baseline, rescheduled):
        diff = np.argwhere(baseline != rescheduled)
        first = tuple(int(v) for v in diff[0]) if len(diff) else ("shape", "mismatch")
        raise VerificationFailure(
            f"rescheduled execution differs from naive; first differing element "
            f"index {first}"
        )


def cmd_verify(args) -> int:
    exp = _build_experiment(args)
    model = ModelConfig(
        L=1,
        E=args.experts,
        topk=min(args.topk, args.experts),
        N=args.embed,
        K=args.hidden,
        dtype_bytes=exp.model.dtype_bytes,
    )
    parallel = exp.parallel
    # The equivalence suite loops per element, so it runs at executor scale
    # regardless of what model/workload the config file names.
    tokens = args.tokens if args.tokens is not None else 24
    base_seed = exp.workload.seed

    if args.fuzz:
        workload = WorkloadSpec(M=tokens, seed=base_seed, std=0.0)
        routing = build_routing(model, parallel, workload)
        sched0 = resolve_layer0(
            routing, exp.rank, meta_for_layer0(model, workload, tile_rows=4)
        )
        if not sched0.tiles:
            raise VerificationFailure("fuzz needs a non-empty schedule; raise --tokens")
        mutated = replace(sched0, tiles=sched0.tiles[1:])
        violations = validate_schedule(mutated, routing)
        if not violations:
            raise VerificationFailure("fuzzed schedule passed validation undetected")
        first = violations[0]
        print(f"fuzz: injected corruption detected: [{first.code}] {first.message}")
        raise VerificationFailure(f"schedule corrupted by --fuzz: [{first.code}] {first.message}")

    for instance in range(args.instances):
        workload = WorkloadSpec(M=tokens, seed=base_seed + instance, std=0.0)
        _verify_instance(model, parallel, workload)
        print(f"instance {instance}: rescheduled == naive (bitwise) PASS")
    print(f"verify: {args.instances} instances passed")
    return 0


def cmd_compare(args) -> int:
    exp = _build_experiment(args)
    routing = _routing_for(exp, args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise ConfigurationError("no modes given")
    rows: List[str] = [
        "mode,total_latency_ns,comm_busy_ns,compute_busy_ns,exposed_comm_ns,"
        "hidden_fraction,comm_work_ns,compute_work_ns"
    ]
    for mode in modes:
        mode_exp = replace(exp, mode=mode)
        result, _s0, _s1 = _simulate(mode_exp, routing, args)
        rows.append(
            f"{result.mode},{result.total_latency_ns},{result.comm_busy_ns},"
            f"{result.compute_busy_ns},{result.exposed_comm_ns},"
            f"{result.hidden_fraction!r},{result.comm_work_ns},{result.compute_work_ns}"
        )
        print(f"{result.mode}: latency_ns={result.total_latency_ns}")
    out = os.path.join(args.out_dir, "compare.csv")
    _write(out, "\n".join(rows) + "\n")
    print(f"wrote {out}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON experiment config file")
    parser.add_argument("--model", help="model preset name")
    parser.add_argument("--tp", type=int, help="tensor parallel size")
    parser.add_argument("--ep", type=int, help="expert parallel size")
    parser.add_argument("--tokens", type=int, help="total token count M")
    parser.add_argument("--seed", type=int, help="routing seed")
    parser.add_argument("--std", type=float, help="target per-expert fraction std")
    parser.add_argument("--cost", help="cost preset name (h800, l20)")
    parser.add_argument("--blocks", type=int, help="total thread blocks n")
    parser.add_argument("--nc", type=int, help="communication blocks n_c")
    parser.add_argument("--tile-rows", dest="tile_rows", type=int)
    parser.add_argument("--tile-cols", dest="tile_cols", type=int)
    parser.add_argument("--rank", type=int, help="rank to resolve/simulate")
    parser.add_argument("--out-dir", dest="out_dir", default=".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moepipe",
        description="MoE communication/computation overlap study toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_route = sub.add_parser("route", help="generate a routing table")
    _add_common(p_route)
    p_route.set_defaults(func=cmd_route)

    p_run = sub.add_parser("run", help="simulate one mode and export the timeline")
    _add_common(p_run)
    p_run.add_argument("--mode", help="fine | coarse:<k> | sequential")
    p_run.add_argument("--routing", help="load a routing.json instead of generating")
    p_run.add_argument("--auto-split", dest="auto_split", action="store_true")
    p_run.add_argument("--metadata", help="split metadata path for --auto-split")
    p_run.add_argument(
        "--dump-schedule", dest="dump_schedule", action="store_true",
        help="also write schedule_layer0.json / schedule_layer1.json",
    )
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="profile the n_c split curve")
    _add_common(p_sweep)
    p_sweep.add_argument("--stride", type=int, default=1)
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--metadata", help="metadata file to merge into")
    p_sweep.set_defaults(func=cmd_sweep)

    p_verify = sub.add_parser("verify", help="numeric equivalence self-check")
    _add_common(p_verify)
    p_verify.add_argument("--instances", type=int, default=10)
    p_verify.add_argument("--experts", type=int, default=4)
    p_verify.add_argument("--topk", type=int, default=2)
    p_verify.add_argument("--embed", type=int, default=8)
    p_verify.add_argument("--hidden", type=int, default=16)
    p_verify.add_argument(
        "--fuzz", action="store_true",
        help="corrupt a schedule and demand the validator catches it",
    )
    p_verify.set_defaults(func=cmd_verify)

    p_compare = sub.add_parser("compare", help="run several modes, merge one CSV")
    _add_common(p_compare)
    p_compare.add_argument(
        "--modes", default="fine,coarse:2,sequential", help="comma-separated mode list"
    )
    p_compare.add_argument("--routing", help="load a routing.json instead of generating")
    p_compare.add_argument("--auto-split", dest="auto_split", action="store_true")
    p_compare.add_argument("--metadata", help="split metadata path for --auto-split")
    p_compare.set_defaults(func=cmd_compare)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
