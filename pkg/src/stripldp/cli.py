"""Command-line interface: spec ingestion, analysis, rate curves, simulation.

Subcommands:
  analyze               regime, v0, t0, t*, lambda_crit bracket (JSON)
  rate                  rate-function curve as CSV (hitting / speed /
                        averaged-hitting / averaged-speed; --M for truncated)
  simulate              tail estimates: --t (hitting), --x (speed),
                        --slowdown; methods direct / is / exact
  convert-bounded-jump  embed an (L,R) step kernel into a strip spec

Exit codes: 0 success, 2 usage or spec error, 3 numerical failure
(supercritical / no convergence), 4 simulation budget exhausted.
Every --out file gets a sibling <out>.manifest.json recording the command,
spec hash, seed and parameters; deterministic commands reproduce outputs
byte-identically from the same manifest inputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .env import (
    SpecValidationError,
    WindowExhaustedError,
    embed_bounded_jump,
    load_spec,
    spec_to_json_dict,
)
from .lmgf import LmgfEvaluator, analyze_environment
from .montecarlo import (
    BudgetExhaustedError,
    empirical_hitting_tail,
    empirical_speed_tail,
    importance_sample_hitting,
    slowdown_probability,
)
from .phi import ConvergenceError, SupercriticalError
from .rates import (
    averaged_rate_upper,
    averaged_speed_upper,
    hitting_rate_curve,
    speed_rate_curve,
)

EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_BUDGET = 4


def _default_threads() -> int:
    env = os.environ.get("STRIPLDP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def parse_grid(text: str) -> np.ndarray:
    """A:STEP:B inclusive of both endpoints (within fp slack)."""
    parts = text.split(":")
    if len(parts) != 3:
        raise SpecValidationError(f"grid must be A:STEP:B, got {text!r}")
    a, step, b = (float(x) for x in parts)
    if step <= 0 or b < a:
        raise SpecValidationError(f"bad grid bounds/step in {text!r}")
    count = int(round((b - a) / step)) + 1
    grid = a + step * np.arange(count)
    return grid[grid <= b + 1e-9]


def _write_manifest(args, command: str, outputs: list[str], wall: float, params: dict):
    if not args.out:
        return None
    manifest_path = args.out + ".manifest.json"
    doc = {
        "command": command,
        "artifact_version": __version__,
        "spec": getattr(args, "spec", None),
        "spec_hash": params.pop("_spec_hash", None),
        "seed": getattr(args, "seed", None),
        "parameters": params,
        "outputs": outputs,
        "wall_clock_s": round(wall, 3),
    }
    with open(manifest_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return os.path.basename(manifest_path)


def cmd_analyze(args) -> int:
    spec = load_spec(args.spec)
    t0 = time.perf_counter()
    analysis = analyze_environment(
        spec, n_levels=args.levels, seed=args.seed,
        lambda_crit_tol=args.tol,
    )
    wall = time.perf_counter() - t0
    doc = analysis.as_dict()
    manifest = _write_manifest(
        args, "analyze", [args.out] if args.out else [], wall,
        {"levels": args.levels, "tol": args.tol, "_spec_hash": spec.content_hash()},
    )
    if manifest:
        doc["manifest"] = manifest
    text = json.dumps(doc, indent=2, sort_keys=True, default=str)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_rate(args) -> int:
    spec = load_spec(args.spec)
    grid = parse_grid(args.grid)
    t0 = time.perf_counter()
    if args.kind == "hitting":
        curve = hitting_rate_curve(
            spec, grid, n_levels=args.levels, seed=args.seed, M=args.M,
            threads=args.threads,
        )
    elif args.kind == "speed":
        curve = speed_rate_curve(spec, grid, n_levels=args.levels, seed=args.seed)
    elif args.kind == "averaged-hitting":
        if len(spec.slices) == 1 and spec.kind == "periodic":
            raise SpecValidationError(
                "averaged-hitting needs an i.i.d. finite-support spec"
            )
        curve = averaged_rate_upper(spec, grid, n_levels=args.levels, seed=args.seed)
    elif args.kind == "averaged-speed":
        curve = averaged_speed_upper(spec, grid, n_levels=args.levels, seed=args.seed)
    else:
        raise SpecValidationError(f"unknown curve kind {args.kind!r}")
    wall = time.perf_counter() - t0
    manifest = _write_manifest(
        args, "rate", [args.out] if args.out else [], wall,
        {"kind": args.kind, "grid": args.grid, "levels": args.levels,
         "M": args.M, "_spec_hash": spec.content_hash()},
    )
    csv_text = curve.to_csv()
    if manifest:
        head, rest = csv_text.split("\n", 1)
        csv_text = head + f"\n# manifest={manifest}\n" + rest
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv_text)
        print(f"wrote {len(grid)} points to {args.out}")
    else:
        print(csv_text, end="")
    for w in curve.warnings:
        print(f"shape warning: {w}", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    spec = load_spec(args.spec)
    n = args.levels
    t0 = time.perf_counter()
    comparison = {}
    if args.slowdown:
        est = slowdown_probability(
            spec, n=n, trials=args.trials, seed=args.seed,
            method="exact" if args.method == "exact" else "direct",
        )
        try:
            from .phi import estimate_lambda_crit

            lc = estimate_lambda_crit(spec, tol=max(args.tol, 1e-6), seed=args.seed)
            comparison = {"lambda_crit": lc.lambda_crit,
                          "gap": est.point - lc.lambda_crit}
            print(f"slowdown rate {est.point:.6f} vs lambda_crit {lc.lambda_crit:.6f}")
        except (SupercriticalError, ConvergenceError):
            pass
    elif args.t is not None:
        if args.method == "is":
            if args.M is None:
                raise SpecValidationError("--method is requires --M")
            est = importance_sample_hitting(
                spec, n=n, t=args.t, M=args.M, trials=args.trials, seed=args.seed
            )
            try:
                ev = LmgfEvaluator(spec, n_levels=n, seed=args.seed,
                                   margin=max(args.M, 320))
                lam_t = ev.solve_tilt(args.t, args.M)
                j_m = lam_t * args.t - ev.value_truncated(lam_t, args.M).value
                comparison = {"J_M": j_m, "gap": est.point - j_m}
                print(f"point {est.point:.6f} vs J_M({args.t}) = {j_m:.6f}")
            except (SupercriticalError, ConvergenceError, ValueError):
                pass
        else:
            est = empirical_hitting_tail(
                spec, n=n, t=args.t, trials=args.trials, seed=args.seed,
                mode=args.mode, M=args.M,
            )
    elif args.x is not None:
        if args.method == "is":
            raise SpecValidationError("importance sampling covers --t events only")
        est = empirical_speed_tail(
            spec, n=n, x=args.x, trials=args.trials, seed=args.seed, mode=args.mode
        )
    else:
        raise SpecValidationError("simulate needs --t, --x or --slowdown")
    wall = time.perf_counter() - t0
    doc = est.as_dict()
    if comparison:
        doc["comparison"] = comparison
    manifest = _write_manifest(
        args, "simulate", [args.out] if args.out else [], wall,
        {"t": args.t, "x": args.x, "slowdown": args.slowdown,
         "levels": n, "trials": args.trials, "method": args.method,
         "M": args.M, "mode": args.mode, "_spec_hash": spec.content_hash()},
    )
    if manifest:
        doc["manifest"] = manifest
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_convert_bounded_jump(args) -> int:
    with open(args.kernel) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SpecValidationError(
                f"{args.kernel}: invalid JSON at line {e.lineno}: {e.msg}"
            ) from e
    for key in ("L", "R", "kernel"):
        if key not in doc:
            raise SpecValidationError(f"kernel document missing '{key}'")
    spec = embed_bounded_jump(doc["kernel"], int(doc["L"]), int(doc["R"]),
                              doc.get("kappa"))
    L, R = int(doc["L"]), int(doc["R"])
    if L != R:
        print(
            f"warning: L={L} != R={R}: the embedded strip violates full "
            "ellipticity with the documented zero pattern; block-reduced "
            "products are required downstream",
            file=sys.stderr,
        )
    out_doc = spec_to_json_dict(spec)
    text = json.dumps(out_doc, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        print(f"wrote d={spec.d} strip spec to {args.out}")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stripldp",
        description="Large-deviation rate functions for RWRE on a strip",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, levels_default=3000):
        p.add_argument("--spec", required=True, help="environment spec JSON")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--levels", type=int, default=levels_default,
                       help="window length / LDP scale n")
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--threads", type=int, default=_default_threads())
        p.add_argument("--out", default=None)

    p = sub.add_parser("analyze", help="regime, v0, t0, lambda_crit")
    common(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("rate", help="rate-function curve (CSV)")
    common(p)
    p.add_argument("--kind", required=True,
                   choices=["hitting", "speed", "averaged-hitting", "averaged-speed"])
    p.add_argument("--grid", required=True,
                   help="A:STEP:B (use --grid=-1:0.1:1 for negative starts)")
    p.add_argument("--M", type=int, default=None, help="excursion truncation")
    p.set_defaults(fn=cmd_rate)

    p = sub.add_parser("simulate", help="tail estimates (JSON)")
    common(p, levels_default=100)
    p.add_argument("--t", type=float, default=None, help="hitting-time threshold")
    p.add_argument("--x", type=float, default=None, help="speed threshold")
    p.add_argument("--slowdown", action="store_true")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--method", choices=["direct", "is", "exact"], default="direct")
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--mode", choices=["quenched", "averaged"], default="quenched")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("convert-bounded-jump", help="(L,R) kernel -> strip spec")
    p.add_argument("--kernel", required=True, help="kernel JSON with L, R, kernel")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_convert_bounded_jump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (SpecValidationError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SupercriticalError, ConvergenceError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (BudgetExhaustedError, WindowExhaustedError) as e:
        print(f"budget exhausted: {e}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
