"""Command-line entry point.

One subcommand per registered experiment (``linear`` fans out over its
kind), plus ``report`` to re-render a finished run.  Exit codes: 0 all
asserted checks passed, 1 numerical failure (a check failed or a solver
refused/blew up), 2 configuration error (bad JSON, unknown key, missing
seed, unreadable paths).
"""

import argparse
import json
import os
import sys

from . import harness


_LINEAR_KINDS = ("heat", "transport", "lame", "modes", "decay-profile")
_PLAIN = ("lp-check", "para-check", "cns-run", "local-scheme",
          "lagrangian-check", "low-mach", "decay")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cnslab",
        description="Spectral toolbox experiments for slightly compressible flow.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", metavar="PATH",
                       help="JSON config file (defaults filled per experiment)")
        p.add_argument("--out", metavar="DIR",
                       help="output directory for report.json/CSV/SVG")
        p.add_argument("--seed", type=int, metavar="N",
                       help="RNG seed (overrides the config)")
        p.add_argument("--threads", type=int, metavar="N",
                       help="FFT worker threads")
        p.add_argument("--svg", choices=("on", "off"), default="off",
                       help="also write SVG line plots (default off)")

    for name in _PLAIN:
        add_common(sub.add_parser(name, help=f"run the {name} experiment"))
    lin = sub.add_parser("linear", help="linearized-model experiments")
    lin.add_argument("kind", choices=_LINEAR_KINDS)
    add_common(lin)

    rep = sub.add_parser("report", help="print a stored report, optionally re-plot")
    rep.add_argument("--out", metavar="DIR", required=True,
                     help="directory holding report.json")
    rep.add_argument("--svg", choices=("on", "off"), default="off")
    return parser


def _load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise harness.ConfigError(f"cannot read config {path!r}: {exc}")
    except json.JSONDecodeError as exc:
        raise harness.ConfigError(f"config {path!r} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise harness.ConfigError(f"config {path!r} must hold a JSON object")
    return cfg


def _run(experiment, args):
    config = _load_config(args.config) if args.config else {}
    named = config.get("experiment")
    if named and named != experiment:
        raise harness.ConfigError(
            f"config names experiment {named!r} but the command line asked "
            f"for {experiment!r}")
    config["experiment"] = experiment
    if args.seed is not None:
        config["seed"] = args.seed
    report = harness.run_experiment(config, out_dir=args.out,
                                    svg=(args.svg == "on"),
                                    threads=args.threads)
    for line in report.summary_lines():
        print(line)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{experiment}: {verdict} ({report.wall_clock_s:.2f} s)")
    return 0 if report.passed else 1


def _rerender(args):
    path = os.path.join(args.out, "report.json")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise harness.ConfigError(f"cannot read {path!r}: {exc}")
    for c in data.get("checks", []):
        status = "PASS" if c["passed"] else "FAIL"
        print(f"[{status}] {data['experiment']}: {c['name']} = "
              f"{c['value']:.6g} (bound {c['bound']:.6g}, anchor: {c['anchor']})")
    if args.svg == "on":
        import numpy as np
        for name in os.listdir(args.out):
            if not name.endswith(".csv"):
                continue
            rows = []
            with open(os.path.join(args.out, name)) as fh:
                header = fh.readline().strip().split(",")
                for line in fh:
                    cells = line.strip().split(",")
                    try:
                        rows.append([float(x) for x in cells])
                    except ValueError:
                        continue
            if rows:
                base = name[:-4]
                harness._plot_table(os.path.join(args.out, base + ".svg"),
                                    base, header, [tuple(r) for r in rows])
    verdict = "PASS" if data.get("passed") else "FAIL"
    print(f"{data.get('experiment', '?')}: {verdict} (stored report)")
    return 0 if data.get("passed") else 1


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return _rerender(args)
        if args.command == "linear":
            return _run(f"linear-{args.kind}", args)
        return _run(args.command, args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # numerical refusals, blow-ups, fit failures
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
