"""Command-line pipeline: profile, route, simulate and sweep-t.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import commsim
from .core import RoutingBatch, as_batch, route_c2r_batch, route_topk_batch
from .errors import ConfigError, InvariantError, TraceFormatError
from .placement import place_greedy, place_identity, write_placement
from .profiler import (
    collaboration_matrix,
    extract_top_t,
    profile,
    random_top_t,
    write_heatmaps,
)
from .workload import WorkloadSpec, decision_records, generate_layers, read_trace, write_trace

log = logging.getLogger("collabroute")

STRATEGIES = ("topk", "c2r", "random-c2r")


@dataclass
class LayerInput:
    layer_id: int
    logits: np.ndarray | None = None
    decisions: RoutingBatch | None = None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated integer list, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("model")
    g.add_argument("--experts", type=int, default=8, help="experts per layer (N)")
    g.add_argument("--top-k", type=int, default=2, help="experts per token (K)")
    g.add_argument("--top-t", type=int, default=None, help="collaborators kept per expert (T); default K-1")
    g.add_argument("--layers", type=int, default=1, help="MoE layers (L)")
    g.add_argument("--hidden-dim", type=int, default=16, help="token embedding width (d)")
    g = common.add_argument_group("workload")
    g.add_argument("--tokens", type=int, default=10_000)
    g.add_argument("--groups", type=int, default=1, help="latent expert groups (G), must divide N")
    g.add_argument("--cluster-strength", type=float, default=0.0)
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trace", default=None, help="read logits or decisions from a trace file instead")
    g = common.add_argument_group("routing and placement")
    g.add_argument("--strategy", choices=STRATEGIES, default="topk")
    g.add_argument("--placement", choices=("greedy", "identity"), default="greedy")
    g.add_argument("--ep", type=_int_list, default=[2, 4], help="comma-separated EP degrees")
    g.add_argument(
        "--comm-fractions",
        default="paper-default",
        help="'paper-default' or a file of 'ep,fraction' records",
    )
    g.add_argument("--out", default="out", help="output directory")

    parser = argparse.ArgumentParser(
        prog="collabroute",
        description="Expert-collaboration profiling, constrained routing and all-to-all accounting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("profile", parents=[common], help="collaboration matrices and degrees per layer")
    sub.add_parser("route", parents=[common], help="write a routing-decision trace")
    p = sub.add_parser("simulate", parents=[common], help="dispatch accounting and speedup per EP")
    p.add_argument(
        "--paper-redundancy",
        action="store_true",
        help="use the published redundancy values instead of simulating routing",
    )
    p = sub.add_parser("sweep-t", parents=[common], help="layer degree and redundancy for each T")
    p.add_argument("--t-values", type=_int_list, default=None, help="T values; default K-1..N-1")
    return parser


def _validate(args) -> None:
    n, k = args.experts, args.top_k
    if n < 1:
        raise ConfigError(f"--experts must be >= 1, got {n}")
    if not 1 <= k <= n:
        raise ConfigError(f"--top-k must lie in [1, {n}], got {k}")
    if args.layers < 1:
        raise ConfigError(f"--layers must be >= 1, got {args.layers}")
    if args.top_t is None:
        args.top_t = max(k - 1, 1)
    if args.strategy != "topk" or args.command == "sweep-t":
        t = args.top_t
        if n > 1 and not max(k - 1, 1) <= t <= n - 1:
            raise ConfigError(f"--top-t must lie in [max(K-1, 1), N-1] = [{max(k - 1, 1)}, {n - 1}], got {t}")


def load_inputs(args) -> list[LayerInput]:
    if args.trace is not None:
        records = read_trace(args.trace, args.experts)
        if not records:
            raise ConfigError("empty workload")
        by_layer: dict[int, list] = {}
        for r in records:
            by_layer.setdefault(r.layer_id, []).append(r)
        out = []
        for layer_id in sorted(by_layer):
            recs = by_layer[layer_id]
            kinds = {r.logits is None for r in recs}
            if len(kinds) != 1:
                raise ConfigError(f"layer {layer_id} mixes logits and pre-routed records")
            if recs[0].logits is not None:
                out.append(LayerInput(layer_id, logits=np.array([r.logits for r in recs])))
            else:
                out.append(LayerInput(layer_id, decisions=as_batch([r.decision for r in recs], args.experts)))
        return out
    spec = WorkloadSpec(
        num_tokens=args.tokens,
        num_experts=args.experts,
        hidden_dim=args.hidden_dim,
        num_groups=args.groups,
        cluster_strength=args.cluster_strength,
        noise_scale=args.noise,
        seed=args.seed,
    )
    if spec.num_tokens == 0:
        raise ConfigError("empty workload")
    return [LayerInput(l, logits=x) for l, x in enumerate(generate_layers(spec, args.layers))]


def _table_rng(seed: int, layer_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, layer_id, 2])))


def route_layer(inp: LayerInput, strategy: str, k: int, t: int, seed: int):
    """Route one layer. Returns the decisions and the Top-T table used (if any)."""
    if inp.decisions is not None:
        return inp.decisions, None
    if strategy == "topk":
        return route_topk_batch(inp.logits, k), None
    n = inp.logits.shape[1]
    if strategy == "c2r":
        baseline = route_topk_batch(inp.logits, k)
        table = extract_top_t(collaboration_matrix(baseline, n, inp.layer_id), t)
    elif strategy == "random-c2r":
        table = random_top_t(n, t, _table_rng(seed, inp.layer_id))
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    return route_c2r_batch(inp.logits, k, table), table


def _fractions(args) -> commsim.CommFractionTable:
    if args.comm_fractions == "paper-default":
        return commsim.CommFractionTable.paper_default()
    return commsim.read_comm_fractions(args.comm_fractions)


def _num(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) for v in r])


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _json_num(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def cmd_profile(args) -> int:
    inputs = load_inputs(args)
    matrices, summary, degree_rows = [], [], []
    for inp in inputs:
        dec, _ = route_layer(inp, args.strategy, args.top_k, args.top_t, args.seed)
        m = collaboration_matrix(dec, args.experts, inp.layer_id)
        m.check()
        prof = profile(m)
        matrices.append(m)
        for i, (d, a) in enumerate(zip(prof.degrees, prof.active)):
            degree_rows.append((inp.layer_id, i, float(d), int(a)))
        summary.append(
            {"layer": inp.layer_id, "tokens": m.tokens_seen, "layer_degree": _json_num(prof.layer_degree)}
        )
    os.makedirs(args.out, exist_ok=True)
    write_heatmaps(os.path.join(args.out, "heatmap.csv"), matrices)
    _write_csv(os.path.join(args.out, "profile.csv"), ("layer", "expert", "degree", "active"), degree_rows)
    _write_json(os.path.join(args.out, "profile.json"), summary)
    lines = [f"max degree ln(N-1) = {math.log(args.experts - 1) if args.experts > 1 else 0.0:.4f}\n"]
    lines += [f"layer {s['layer']:>3}  tokens {s['tokens']:>8}  degree {_num(s['layer_degree']) or '-'}\n" for s in summary]
    text = "".join(lines)
    with open(os.path.join(args.out, "profile.txt"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_route(args) -> int:
    inputs = load_inputs(args)
    os.makedirs(args.out, exist_ok=True)
    records, table_rows = [], []
    for inp in inputs:
        dec, table = route_layer(inp, args.strategy, args.top_k, args.top_t, args.seed)
        records.extend(decision_records(dec, inp.layer_id))
        if table is not None:
            for e in range(table.num_experts):
                for rank, c in enumerate(table[e]):
                    table_rows.append((inp.layer_id, e, rank, c))
    write_trace(records, os.path.join(args.out, "routes.trace"))
    if table_rows:
        _write_csv(os.path.join(args.out, "topt.csv"), ("layer", "expert", "rank", "collaborator"), table_rows)
    sys.stdout.write(f"wrote {len(records)} routing decisions over {len(inputs)} layer(s)\n")
    return 0


def cmd_simulate(args) -> int:
    fractions = _fractions(args)
    if args.paper_redundancy:
        models = commsim.reproduce_paper_table(fractions=fractions)
        commsim.write_report(args.out, models)
        sys.stdout.write(commsim.format_report(models))
        return 0
    inputs = load_inputs(args)
    os.makedirs(args.out, exist_ok=True)
    n = args.experts
    eps = []
    for ep in sorted(set(args.ep)):
        if ep < 1 or n % ep:
            log.warning("skipping EP=%d: does not divide N=%d", ep, n)
        else:
            eps.append(ep)
    if not eps:
        raise ConfigError(f"no EP value in {args.ep} divides N={n}")
    totals = {ep: [0, 0] for ep in eps}
    layer_rows = []
    for inp in inputs:
        dec, _ = route_layer(inp, args.strategy, args.top_k, args.top_t, args.seed)
        m = collaboration_matrix(dec, n, inp.layer_id)
        for ep in eps:
            pm = place_greedy(m, ep) if args.placement == "greedy" else place_identity(n, ep)
            write_placement(os.path.join(args.out, f"placement_layer{inp.layer_id}_ep{ep}.csv"), pm)
            acc = commsim.account_dispatch(dec, pm)
            acc.check()
            totals[ep][0] += acc.naive_copies
            totals[ep][1] += acc.dedup_copies
            layer_rows.append(
                (inp.layer_id, ep, acc.naive_copies, acc.dedup_copies, commsim.redundancy_ratio(acc))
                + tuple(int(v) for v in acc.per_device_recv)
            )
    models = [
        commsim.SpeedupModel(
            ep,
            1.0 - dedup / naive,
            fractions.get(ep),
            fractions.source,
            naive,
            dedup,
        )
        for ep, (naive, dedup) in totals.items()
    ]
    paths = commsim.write_report(args.out, models)
    with open(os.path.join(args.out, "report_layers.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("layer", "ep", "naive_copies", "dedup_copies", "redundancy", "per_device_recv"))
        for row in layer_rows:
            w.writerow([_num(v) for v in row[:5]] + [";".join(str(v) for v in row[5:])])
    sys.stdout.write(commsim.format_report(models))
    log.info("report written to %s", paths["csv"])
    return 0


def cmd_sweep_t(args) -> int:
    inputs = load_inputs(args)
    if any(inp.logits is None for inp in inputs):
        raise ConfigError("sweep-t needs router logits, not pre-routed decisions")
    n, k = args.experts, args.top_k
    t_values = args.t_values or list(range(max(k - 1, 1), n))
    for t in t_values:
        if not max(k - 1, 1) <= t <= n - 1:
            raise ConfigError(f"T={t} outside [max(K-1, 1), N-1]")
    eps = [ep for ep in sorted(set(args.ep)) if ep >= 1 and n % ep == 0]
    header = ["strategy", "t", "layer", "layer_degree"] + [f"redundancy_ep{ep}" for ep in eps]
    rows = []
    runs = [("topk", None)] + [("c2r", t) for t in t_values]
    for strategy, t in runs:
        for inp in inputs:
            dec, _ = route_layer(inp, strategy, k, t or 1, args.seed)
            m = collaboration_matrix(dec, n, inp.layer_id)
            row = [strategy, t, inp.layer_id, profile(m).layer_degree]
            for ep in eps:
                pm = place_greedy(m, ep) if args.placement == "greedy" else place_identity(n, ep)
                row.append(commsim.redundancy_ratio(commsim.account_dispatch(dec, pm)))
            rows.append(row)
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "sweep_t.csv"), header, rows)
    _write_json(
        os.path.join(args.out, "sweep_t.json"),
        [{h: _json_num(v) for h, v in zip(header, r)} for r in rows],
    )
    lines = ["  ".join(f"{h:>16}" for h in header) + "\n"]
    for r in rows:
        cells = [f"{v:>16.6f}" if isinstance(v, float) else f"{'-' if v is None else v!s:>16}" for v in r]
        lines.append("  ".join(cells) + "\n")
    text = "".join(lines)
    with open(os.path.join(args.out, "sweep_t.txt"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "profile": cmd_profile,
    "route": cmd_route,
    "simulate": cmd_simulate,
    "sweep-t": cmd_sweep_t,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        _validate(args)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (OSError, TraceFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
