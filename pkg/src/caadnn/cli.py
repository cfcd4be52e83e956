"""Command-line front-end: load a model and input, evaluate with certified
error tracking, analyze, and report.

Exit codes: 0 success, 1 any error, 2 the argmax verdict was unstable and
--require-stable was given.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from typing import List, Optional

from .analysis import (argmax_stability, build_report, emit_report,
                       margins_from_confidence)
from .engine import EngineConfig, ModelEvaluator, tensor_from_input
from .fpformat import FpContext, FpFormat, parse_pow2
from .interval import DomainError, IAContext
from .model import (ModelError, load_model, load_tensor)

BACKEND_PRECISION_ENV = "CAADNN_BACKEND_PRECISION"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caadnn",
        description="Certified FP rounding-error analysis for sequential "
                    "neural-network inference.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("analyze", help="analyze one model on one input (or a directory of inputs)")
    p.add_argument("--model", required=True, help="model JSON file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="input tensor JSON file")
    src.add_argument("--inputs-dir", help="directory of input tensor JSON files; "
                                          "bounds are aggregated per output")
    p.add_argument("--u-max", default="2^-7",
                   help="certified ceiling on u = 2^(1-k), a power of two like 2^-7")
    p.add_argument("--emulate-k", type=int, default=None,
                   help="mantissa bits of the emulated FP format "
                        "(default: the coarsest certified precision)")
    p.add_argument("--p-star", default=None,
                   help="externally guaranteed top-1 confidence floor in (0.5, 1]")
    p.add_argument("--report", default=None, help="write the JSON report here")
    p.add_argument("--require-stable", action="store_true",
                   help="exit with status 2 if the argmax verdict is not stable")
    p.add_argument("--plain-softmax", action="store_true",
                   help="evaluate softmax in its unstabilized textbook form")
    p.add_argument("--range-check", nargs="?", const="-126:127", default=None,
                   metavar="EMIN:EMAX",
                   help="flag exponent over/underflow of emulated values "
                        "(default window -126:127 when given bare)")
    p.add_argument("--eps-op", action="append", default=[], metavar="OP=BOUND",
                   help="override the elementary rounding bound of one operation "
                        "(add, sub, mul, div, sqrt, exp, log, tanh, round); repeatable")
    p.add_argument("--backend-precision", type=int, default=None,
                   help=f"interval backend bits (default 128, or ${BACKEND_PRECISION_ENV})")
    return parser


def _parse_eps_overrides(pairs: List[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--eps-op expects OP=BOUND, got {pair!r}")
        name, _, value = pair.partition("=")
        out[name.strip()] = float(value)
    return out


def _make_context(args) -> FpContext:
    e = parse_pow2(args.u_max)
    k = args.emulate_k if args.emulate_k is not None else 1 - e
    e_min = e_max = None
    if args.range_check is not None:
        lo, _, hi = args.range_check.partition(":")
        e_min, e_max = int(lo), int(hi)
    fmt = FpFormat(k, e_min=e_min, e_max=e_max)
    bits = args.backend_precision
    if bits is None:
        bits = int(os.environ.get(BACKEND_PRECISION_ENV, "128"))
    return FpContext(fmt, u_max=f"2^{e}", ia=IAContext(bits),
                     elementary_bounds=_parse_eps_overrides(args.eps_op))


def _fmt_bound(b: float) -> str:
    return "unbounded" if b == math.inf else f"{b:.6g} u"


def _print_summary(name: str, outputs, verdict, margin, required_k, ctx) -> None:
    print(f"model: {name}")
    print(f"certified for all k >= {ctx.coarsest_k} (u <= 2^{ctx.u_max_exponent}); "
          f"emulated at k = {ctx.format.k}")
    for i, q in enumerate(outputs.elems):
        print(f"  out[{i}]: value={float(q.fp_value):.9g}  "
              f"abs={_fmt_bound(q.abs_bound)}  rel={_fmt_bound(q.rel_bound)}")
    if verdict is not None:
        state = "stable" if verdict.stable else "NOT stable"
        print(f"argmax: {state} (top1={verdict.top1_index}, top2={verdict.top2_index})")
    if margin is not None:
        print(f"margins: mu={float(margin.mu):.6g}  nu={float(margin.nu):.6g}")
        if required_k is not None:
            print(f"required precision: k = {required_k}")
        else:
            print("required precision: not certifiable from this run "
                  "(re-run with a smaller --u-max)")


def _run_analyze(args) -> int:
    ctx = _make_context(args)
    model = load_model(args.model)
    config = EngineConfig(stable_softmax=not args.plain_softmax)
    evaluator = ModelEvaluator(model, ctx, config)
    has_softmax = bool(model.layers) and model.layers[-1].kind == "softmax"
    margin = margins_from_confidence(args.p_star) if args.p_star else None

    if args.input:
        input_paths = [args.input]
    else:
        input_paths = sorted(
            os.path.join(args.inputs_dir, f)
            for f in os.listdir(args.inputs_dir) if f.endswith(".json"))
        if not input_paths:
            raise FileNotFoundError(f"no .json inputs in {args.inputs_dir}")

    runs = []
    all_stable = True
    t0 = time.monotonic()
    for path in input_paths:
        x = tensor_from_input(load_tensor(path), ctx)
        outputs, summaries = evaluator.run(x)
        report = build_report(model.name, outputs, summaries, ctx,
                              margin=margin,
                              stable_softmax=config.stable_softmax,
                              has_softmax=has_softmax,
                              input_name=os.path.basename(path))
        verdict = argmax_stability(outputs, ctx) if has_softmax else None
        if verdict is not None and not verdict.stable:
            all_stable = False
        runs.append((path, outputs, report, verdict))
    elapsed = time.monotonic() - t0

    last_path, outputs, report, verdict = runs[-1]
    required_k = report.document["verdicts"]["required_k"]
    if len(runs) == 1:
        _print_summary(model.name, outputs, verdict, margin, required_k, ctx)
        if args.report:
            emit_report(report, args.report)
    else:
        n_out = outputs.size
        agg_abs = [0.0] * n_out
        agg_rel = [0.0] * n_out
        for _, outs, _, _ in runs:
            for i, q in enumerate(outs.elems):
                agg_abs[i] = max(agg_abs[i], q.abs_bound)
                agg_rel[i] = max(agg_rel[i], q.rel_bound)
        print(f"model: {model.name} ({len(runs)} inputs)")
        print(f"max abs bound over inputs: {_fmt_bound(max(agg_abs))}")
        print(f"max rel bound over inputs: {_fmt_bound(max(agg_rel))}")
        if has_softmax:
            print(f"all argmax verdicts stable: {all_stable}")
        if args.report:
            doc = {
                "report_version": 1,
                "aggregate": True,
                "inputs": [os.path.basename(p) for p, _, _, _ in runs],
                "per_output_max_abs_bound_u": [
                    None if b == math.inf else repr(b) for b in agg_abs],
                "per_output_max_rel_bound_u": [
                    None if b == math.inf else repr(b) for b in agg_rel],
                "all_argmax_stable": all_stable if has_softmax else None,
                "runs": [r.document for _, _, r, _ in runs],
            }
            with open(args.report, "w", encoding="utf-8") as f:
                json.dump(doc, f, indent=1)
                f.write("\n")
    print(f"analysis time: {elapsed:.2f} s", file=sys.stderr)

    if args.require_stable and has_softmax and not all_stable:
        return 2
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "analyze":
            return _run_analyze(args)
        raise ValueError(f"unknown command {args.command!r}")
    except FileNotFoundError as exc:
        name = getattr(exc, "filename", None) or str(exc)
        print(f"error: file not found: {name}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 1
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DomainError as exc:
        print(f"error: domain violation: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
