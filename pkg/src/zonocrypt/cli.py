"""Command-line front end.

Commands: keygen, run, replay, audit, analyze. Exit codes: 0 success,
1 validation or usage error, 2 runtime protocol failure. Set ZONOCRYPT_LOG
to a level name (DEBUG, INFO, ...) for diagnostics on stderr.

Output layout of `run` and `replay` under --out-dir:
    keys/public.json, keys/private.json
    traces/<variant>/{bounds,error,fp_error,timing}.csv
    transcripts/<variant>.jsonl
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import random
import sys
from pathlib import Path

from . import phe, protocol, sim

log = logging.getLogger(__name__)

WIDTH_TOL = 1e-9


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract wants 1
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="zonocrypt",
                description="Privacy-preserving set-based state estimation "
                            "over an encrypted bus.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    kg = sub.add_parser("keygen", help="generate a Paillier key pair")
    kg.add_argument("--bits", type=int, default=phe.DEFAULT_KEY_BITS)
    kg.add_argument("--out", required=True, help="directory for key files")

    run = sub.add_parser("run", help="simulate a protocol run")
    run.add_argument("--scenario", help="scenario JSON (default: bundled)")
    run.add_argument("--out-dir", required=True)
    run.add_argument("--variant", choices=protocol.VARIANTS)
    run.add_argument("--swap", action="store_true",
                     help="shuffle generators before release (p1-zono)")
    run.add_argument("--no-refresh", action="store_true",
                     help="skip ciphertext refresh between rounds")
    run.add_argument("--seed", type=int)

    rp = sub.add_parser("replay", help="re-estimate from a measurement log")
    rp.add_argument("--csv", required=True, help="log with k,i,y,h...,r rows")
    rp.add_argument("--scenario", required=True)
    rp.add_argument("--out-dir", required=True)

    au = sub.add_parser("audit", help="run the privacy audit on a transcript")
    au.add_argument("--transcript", required=True)
    au.add_argument("--coalition", nargs="+", required=True,
                    metavar="ROLE", help="e.g. query sensor:0")

    an = sub.add_parser("analyze", help="summarize exported trace CSVs")
    an.add_argument("--trace", nargs="+", required=True, metavar="DIR",
                    help="one trace directory, or two to compare tightness")
    return p


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _cmd_keygen(args) -> int:
    if args.bits < phe.MIN_KEY_BITS:
        return _fail(f"key bits must be at least {phe.MIN_KEY_BITS}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = phe.keygen(args.bits, rng=random.Random())
    phe.save_public_key(keys.public, out / "public.json")
    phe.save_private_key(keys.private, out / "private.json")
    print(f"wrote {out / 'public.json'} and {out / 'private.json'}")
    return 0


def _load_scenario_dict(path: str | None) -> dict:
    if path is None:
        return sim.scenario_to_dict(sim.default_scenario())
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_outputs(out_dir: Path, result: sim.RunResult) -> Path:
    variant = result.scenario.variant
    keys_dir = out_dir / "keys"
    keys_dir.mkdir(parents=True, exist_ok=True)
    phe.save_public_key(result.keys.public, keys_dir / "public.json")
    phe.save_private_key(result.keys.private, keys_dir / "private.json")
    trace_dir = out_dir / "traces" / variant
    sim.export_trace(result.trace, trace_dir)
    sim.export_timing({variant: result.trace}, trace_dir / "timing.csv")
    tdir = out_dir / "transcripts"
    tdir.mkdir(parents=True, exist_ok=True)
    result.transcript.save(tdir / f"{variant}.jsonl")
    return trace_dir


def _cmd_run(args) -> int:
    try:
        data = _load_scenario_dict(args.scenario)
    except (OSError, json.JSONDecodeError) as e:
        return _fail(f"scenario file: {e}")
    if args.variant:
        data["variant"] = args.variant
    if args.swap:
        data["swap"] = True
    if args.seed is not None:
        data["seed"] = args.seed
    if args.no_refresh:
        if str(data.get("variant", "")).startswith("p2"):
            log.info("refresh is structural in the group protocol; "
                     "--no-refresh ignored")
        else:
            data["refresh"] = False
    scenario, errors = sim.validate_scenario(data)
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return 1
    out_dir = Path(args.out_dir)
    try:
        result = sim.run(scenario)
    except protocol.ProtocolError as e:
        print(f"protocol failure: {e}", file=sys.stderr)
        return 2
    trace_dir = _write_outputs(out_dir, result)
    print(f"run complete ({scenario.variant}, K={scenario.horizon}): "
          f"{out_dir}")
    print(f"traces: {trace_dir}")
    return 0


def _cmd_replay(args) -> int:
    scenario, errors = sim.validate_scenario(args.scenario)
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        result = sim.replay(scenario, args.csv)
    except (OSError, sim.ReplayError) as e:
        return _fail(f"replay log: {e}")
    except protocol.ProtocolError as e:
        print(f"protocol failure: {e}", file=sys.stderr)
        return 2
    out_dir = Path(args.out_dir)
    _write_outputs(out_dir, result)
    print(f"replay complete ({result.scenario.horizon} steps): {out_dir}")
    return 0


def _cmd_audit(args) -> int:
    try:
        transcript = protocol.Transcript.load(args.transcript)
    except (OSError, json.JSONDecodeError) as e:
        return _fail(f"transcript: {e}")
    try:
        report = protocol.privacy_audit(transcript, set(args.coalition))
    except ValueError as e:
        return _fail(str(e))
    except protocol.ProtocolError as e:
        print(f"protocol failure: {e}", file=sys.stderr)
        return 2
    print(report.render())
    return 0 if report.passed else 1


def _read_bounds(trace_dir: Path) -> dict:
    path = trace_dir / "bounds.csv"
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["k", "dim", "lower", "true", "upper"]:
        raise ValueError(f"{path}: not a bounds export")
    cells = {}
    for row in rows[1:]:
        cells[(int(row[0]), int(row[1]))] = \
            (float(row[2]), float(row[3]), float(row[4]))
    return cells


def _read_column(trace_dir: Path, name: str, column: str) -> list[float]:
    path = trace_dir / f"{name}.csv"
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["k", column]:
        raise ValueError(f"{path}: not a {name} export")
    return [float(r[1]) for r in rows[1:]]


def _summarize(trace_dir: Path) -> None:
    cells = _read_bounds(trace_dir)
    steps = sorted({k for k, _ in cells})
    with_truth = [k for k in steps
                  if all(math.isfinite(cells[(k, d)][1])
                         for d in range(_dims(cells)))]
    inside = [
        k for k in with_truth
        if all(cells[(k, d)][0] - WIDTH_TOL <= cells[(k, d)][1]
               <= cells[(k, d)][2] + WIDTH_TOL
               for d in range(_dims(cells)))
    ]
    if with_truth:
        pct = 100.0 * len(inside) / len(with_truth)
        print(f"containment: {len(inside)}/{len(with_truth)} steps inside "
              f"bounds ({pct:.1f}%)")
    else:
        print("containment: n/a (no ground truth in this trace)")
    errors = [e for e in _read_column(trace_dir, "error", "error")
              if math.isfinite(e)]
    if errors:
        print(f"mean error: {sum(errors) / len(errors):.6g}")
    else:
        print("mean error: n/a")
    fp = _read_column(trace_dir, "fp_error", "fp_error")
    print(f"max fp-error: {max(fp):.6g}")


def _dims(cells: dict) -> int:
    return 1 + max(d for _, d in cells)


def _cmd_analyze(args) -> int:
    if len(args.trace) > 2:
        return _fail("analyze takes one or two trace directories")
    dirs = [Path(t) for t in args.trace]
    try:
        for i, d in enumerate(dirs):
            if len(dirs) > 1:
                print(f"[trace {i + 1}] {d}")
            _summarize(d)
        if len(dirs) == 2:
            a, b = _read_bounds(dirs[0]), _read_bounds(dirs[1])
            common = sorted(set(a) & set(b))
            if not common:
                return _fail("traces share no (step, dim) cells")
            ok = [c for c in common
                  if (a[c][2] - a[c][0]) <= (b[c][2] - b[c][0]) + WIDTH_TOL]
            verdict = "SATISFIED" if len(ok) == len(common) else "VIOLATED"
            print(f"tightness: first within second in {len(ok)}/"
                  f"{len(common)} cells -> {verdict}")
    except (OSError, ValueError) as e:
        return _fail(str(e))
    return 0


def main(argv=None) -> int:
    level = os.environ.get("ZONOCRYPT_LOG")
    if level:
        logging.basicConfig(level=getattr(logging, level.upper(),
                                          logging.INFO))
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 1
    handlers = {"keygen": _cmd_keygen, "run": _cmd_run,
                "replay": _cmd_replay, "audit": _cmd_audit,
                "analyze": _cmd_analyze}
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a command is required", file=sys.stderr)
        return 1
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
