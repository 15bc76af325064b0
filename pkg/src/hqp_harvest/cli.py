"""Command line: ``hqp-harvest run|validate|export``.

Exit codes: 0 on success, 1 on a configuration error, 2 when the controller
aborts a run (a cascade stage could not be solved).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .sim import ScenarioAbort, ScenarioError, initial_safety_report, load_scenario, run_scenario, write_csv

log = logging.getLogger("hqp_harvest")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


def _fig7(cols):
    return ["t"] + [c for c in cols if c.startswith("h:")]


def _fig9(cols):
    keep = [f"{arm}_{kind}.{c}" for arm in ("left", "right") for kind, cs in (("ext", ("fx", "fy", "fz")), ("ee", ("vx", "vy", "vz"))) for c in cs]
    return ["t"] + keep


def _fig16(cols):
    return ["t"] + [f"{arm}_{kind}.{c}" for arm in ("left", "right") for kind in ("ref", "ee") for c in "xyz"]


def _fig18(cols):
    return ["t"] + [f"right_ext.{c}" for c in ("fx", "fy", "fz", "mx", "my", "mz")] + ["phase", "mode", "event"]


FIGURES = {
    "fig7_distances": _fig7,
    "fig9_force_velocity": _fig9,
    "fig16_tracking": _fig16,
    "fig18_wrench_phase": _fig18,
}


def export(log_path, figure: str, out_dir=None) -> Path:
    """Write the column subset of a run log that reconstructs ``figure``."""
    if figure not in FIGURES:
        raise KeyError(f"unknown figure {figure!r}; valid ids: {', '.join(FIGURES)}")
    log_path = Path(log_path)
    with log_path.open(newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if not header or header[0] != "t":
            raise ValueError(f"{log_path}: not a run log (header must start with 't')")
        want = FIGURES[figure](header)
        missing = [c for c in want if c not in header]
        if missing:
            raise ValueError(f"{log_path}: missing columns {', '.join(missing[:5])}")
        idx = [header.index(c) for c in want]
        out = Path(out_dir or log_path.parent) / f"{log_path.stem}.{figure}.csv"
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as fo:
            w = csv.writer(fo)
            w.writerow(want)
            for r in rows:
                w.writerow([r[i] for i in idx])
    return out


def _cmd_run(args) -> int:
    cfg = load_scenario(args.scenario, seed=args.seed)
    try:
        res = run_scenario(cfg)
    except ScenarioAbort as exc:
        write_csv(exc.result, args.out)
        print(f"abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    main, ev = write_csv(res, args.out)
    print(f"wrote {main} and {ev}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = load_scenario(args.scenario, seed=args.seed)
    rows, bad = initial_safety_report(cfg)
    print(f"safety rows: {rows}")
    if bad:
        for lbl in bad:
            print(f"unsafe at t = 0: {lbl}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def _cmd_export(args) -> int:
    try:
        out = export(args.log, args.figure, args.out)
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hqp-harvest", description="Run and inspect whole-body HQP harvesting scenarios.")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="simulate a scenario and write its CSV logs")
    r.add_argument("scenario", help="scenario file, or the name of a shipped scenario")
    r.add_argument("--out", default=".", help="output directory (default: .)")
    r.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    v = sub.add_parser("validate", help="check a scenario without running it")
    v.add_argument("scenario")
    v.add_argument("--seed", type=int, default=None)
    e = sub.add_parser("export", help="extract the columns behind one figure from a run log")
    e.add_argument("log", help="<name>.csv written by run")
    e.add_argument("figure", help=f"one of {', '.join(FIGURES)}")
    e.add_argument("--out", default=None, help="output directory (default: next to the log)")
    for s in (r, v, e):
        s.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="debug logging")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "validate": _cmd_validate, "export": _cmd_export}[args.command]
    try:
        return handler(args)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
