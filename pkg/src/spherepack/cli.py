"""Command-line front end: ``spb <command> [flags] CHANNEL``.

Exit codes: 0 success, 1 a hypothesis or check failed (reported), 2 error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .construction import ConstructionError, construct, full_chain_verify
from .exponents import HypothesisError, spb_constants, spb_lower_bound, spe_csv
from .feedback import DEFAULT_BUDGET, BudgetExceeded, format_encoder, optimal_feedback_code
from .probability import ChannelFormatError, OrderOutOfRange, load_channel
from .renyi import DEFAULT_TOL, NonConvergence, capacity_csv, fmt, renyi_capacity

EXIT_OK, EXIT_SOFT, EXIT_HARD = 0, 1, 2


class UsageError(ValueError):
    pass


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` with both ends included."""
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"grid {text!r} must look like start:stop:step")
    try:
        a, b, step = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"grid {text!r} has a non-numeric field") from None
    if not step > 0 or b < a:
        raise UsageError(f"grid {text!r} needs step > 0 and stop >= start")
    count = int(math.floor((b - a) / step + 1e-9)) + 1
    return [float(np.round(a + j * step, 12)) for j in range(count)]


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _need(args, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def cmd_capacity(args, w) -> int:
    _need(args, "order")
    res = renyi_capacity(args.order, w, args.tol)
    lines = [
        f"order {fmt(res.order)}",
        f"capacity_nats {fmt(res.capacity_nats)}",
        "center " + " ".join(fmt(v) for v in res.center.probs),
        "prior " + " ".join(fmt(v) for v in res.optimal_prior.probs),
        f"residual {fmt(res.residual)}",
        f"iterations {res.iterations}",
        f"converged {str(res.converged).lower()}",
    ]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK if res.converged else EXIT_HARD


def cmd_center_curve(args, w) -> int:
    _need(args, "order_grid")
    orders = [a for a in parse_grid(args.order_grid) if a > 0]
    _emit(capacity_csv(w, orders, args.tol, args.jobs), args.out)
    return EXIT_OK


def cmd_spe(args, w) -> int:
    if args.rate_grid is None and args.rate is None:
        raise UsageError("spe requires --rate or --rate-grid")
    rates = parse_grid(args.rate_grid) if args.rate_grid is not None else [args.rate]
    if min(rates) < 0:
        raise UsageError("rates must be non-negative")
    _emit(spe_csv(w, rates, args.tol), args.out)
    return EXIT_OK


def _rate(args) -> float:
    if args.rate is not None:
        return args.rate
    if args.messages is not None:
        return math.log(args.messages) / args.n
    raise UsageError(f"{args.command} requires --rate or --messages")


def cmd_bound(args, w) -> int:
    _need(args, "n", "subblocks")
    rate = _rate(args)
    p = spb_constants(w, args.n, args.subblocks, args.epsilon, args.rate0, args.rate1, rate, args.tol)
    b = spb_lower_bound(p, w, args.tol)
    lines = [
        f"n {p.n}", f"k {p.k}", f"rate {fmt(p.rate)}", f"epsilon {fmt(p.epsilon)}",
        f"rate0 {fmt(p.rate0)}", f"rate1 {fmt(p.rate1)}", f"rho1 {fmt(p.rho1)}", f"rho2 {fmt(p.rho2)}",
        f"delta1 {fmt(p.delta1)}", f"delta2 {fmt(p.delta2)}", f"c_half {fmt(p.c_half)}",
        f"exponent {fmt(b.exponent)}", f"log_bound {fmt(b.log_value)}", f"bound {fmt(b.value)}",
        f"vacuous {str(b.vacuous).lower()}",
    ]
    lines += [f"hypothesis {k} {'ok' if v else 'FAILED'}" for k, v in sorted(p.flags.items())]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK if p.window_ok and not b.vacuous else EXIT_SOFT


def cmd_optimal_code(args, w) -> int:
    _need(args, "n", "messages")
    best = optimal_feedback_code(w, args.n, args.messages, args.budget)
    ev = best.evaluation
    text = format_encoder(best.encoder)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    summary = [f"error_probability {fmt(ev.average)}", f"rate_nats {fmt(ev.rate_nats)}",
               "per_message " + " ".join(fmt(v) for v in ev.per_message), f"node_operations {best.node_operations}"]
    stream = sys.stdout if args.out else sys.stderr
    stream.write("\n".join(summary) + "\n")
    return EXIT_OK


def _model(args, w):
    _need(args, "n", "subblocks", "atoms", "messages")
    return construct(w, args.n, args.subblocks, args.atoms, args.messages, args.epsilon, args.rate0, args.rate1,
                     tol=args.tol, budget=args.budget)


def cmd_construct(args, w) -> int:
    model = _model(args, w)
    p = model.params
    doc = {
        "n": p.n, "k": p.k, "atoms": model.lattice.atoms, "messages": model.encoder.message_count,
        "rate": float(fmt(p.rate)), "epsilon": float(fmt(p.epsilon)), "delta1": float(fmt(p.delta1)),
        "points": model.size, "cells": model.lattice.cell_count,
        "hypotheses": {k: bool(v) for k, v in p.flags.items()},
        "anchors": [
            {"subblock": i + 1, "message": m, "history": h, "g": float(fmt(v.g)), "mean": float(fmt(v.mean)),
             "target": float(fmt(v.target)), "mode": v.mode}
            for (i, m, h), v in sorted(model.g.items())
        ],
        "mass": {name: float(fmt(math.fsum(getattr(model.points, name)))) for name in ("p", "pv", "pq")},
    }
    _emit(json.dumps(doc, sort_keys=True, indent=2) + "\n", args.out)
    return EXIT_OK if p.window_ok else EXIT_SOFT


def cmd_verify_chain(args, w) -> int:
    report = full_chain_verify(_model(args, w))
    _emit(report.to_json(), args.out)
    return EXIT_OK if report.all_pass else EXIT_SOFT


COMMANDS = {
    "capacity": cmd_capacity,
    "center-curve": cmd_center_curve,
    "spe": cmd_spe,
    "bound": cmd_bound,
    "optimal-code": cmd_optimal_code,
    "construct": cmd_construct,
    "verify-chain": cmd_verify_chain,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spb", description="Rényi capacities, sphere-packing bounds and feedback codes.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("channel", help="channel file ('dmc <inputs> <outputs>' then one row per input)")
    ap.add_argument("--order", type=float)
    ap.add_argument("--order-grid", help="start:stop:step for center-curve")
    ap.add_argument("--rate", type=float, help="rate in nats per channel use")
    ap.add_argument("--rate-grid", help="start:stop:step for spe")
    ap.add_argument("--rate0", type=float)
    ap.add_argument("--rate1", type=float)
    ap.add_argument("--n", type=int, help="block length")
    ap.add_argument("--subblocks", type=int, help="number of subblocks k")
    ap.add_argument("--atoms", type=int, help="Z cells per interval m")
    ap.add_argument("--messages", type=int, help="message count M")
    ap.add_argument("--epsilon", type=float)
    ap.add_argument("--tol", type=float, default=DEFAULT_TOL)
    ap.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="node-operation cap for the code search")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--renormalize", action="store_true", help="rescale channel rows that miss 1 by rounding")
    ap.add_argument("--out", help="write the main output here instead of stdout")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_HARD
    try:
        if not args.tol > 0:
            raise UsageError("--tol must be positive")
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        w = load_channel(args.channel, renormalize=args.renormalize)
        return COMMANDS[args.command](args, w)
    except ChannelFormatError as exc:
        print(f"{args.channel}: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"spb: {exc}", file=sys.stderr)
    except (UsageError, HypothesisError, OrderOutOfRange, ConstructionError, BudgetExceeded, NonConvergence, ValueError) as exc:
        print(f"spb {args.command}: {exc}", file=sys.stderr)
    return EXIT_HARD


if __name__ == "__main__":
    sys.exit(main())
