"""Command-line entry point: ``ampo train|theory-check|sweep|version``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__, harness, theory
from .errors import AmpoError, ConfigurationError

EXIT_CODES = {"ConfigurationError": 2, "UnsupportedConfigurationError": 2, "UsageError": 3,
              "InputError": 3, "TrainingError": 4, "NumericalError": 4}


def split_values(text):
    """Split on commas that are not inside ``[...]`` so schedules survive."""
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _train(args):
    cfg = harness.RunConfig.load(args.config)
    out = args.out or harness.output_dir()
    os.makedirs(out, exist_ok=True)
    for path in harness.train_all_seeds(cfg, out):
        print(path)
    return 0


def _sweep(args):
    cfg = harness.RunConfig.load(args.config)
    values = [harness.parse_axis_value(args.axis, v) for v in split_values(args.values)]
    manifest = harness.sweep(cfg, args.axis, values, args.out)
    for cell, path in manifest.items():
        print(f"{cell}\t{path}")
    return 0


def _theory(args):
    rows = theory.run_suite(args.instances, args.max_states, args.max_actions, args.seed)
    out = args.out or os.path.join(harness.output_dir(), "theory_slacks.csv")
    theory.write_suite_csv(rows, out)
    failed = [r.instance for r in rows if not r.passed]
    worst = min(min(r.lemma1_min_slack, r.theorem1_slack, r.appendix_e_slack) for r in rows)
    residual = max(r.appendix_e_residual for r in rows)
    status = "PASS" if not failed else "FAIL"
    print(f"{status} {len(rows) - len(failed)}/{len(rows)} instances; "
          f"min slack {worst:.3e}; max identity residual {residual:.3e}; csv {out}")
    return 0 if not failed else 1


def build_parser():
    p = argparse.ArgumentParser(prog="ampo")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run every seed of a config")
    t.add_argument("config")
    t.add_argument("--out", help=f"output directory (default ${harness.OUTPUT_DIR_ENV} or ./runs)")
    t.set_defaults(func=_train)

    c = sub.add_parser("theory-check", help="randomised tabular bound checks")
    c.add_argument("--instances", type=int, default=500)
    c.add_argument("--max-states", type=int, default=10)
    c.add_argument("--max-actions", type=int, default=4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="CSV path for per-instance slacks")
    c.set_defaults(func=_theory)

    s = sub.add_parser("sweep", help="one run per value x seed")
    s.add_argument("config")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True, help="comma separated; schedules as [a,b,x,y]")
    s.add_argument("--out")
    s.set_defaults(func=_sweep)

    v = sub.add_parser("version")
    v.set_defaults(func=lambda args: print(__version__) or 0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AmpoError as exc:
        name = type(exc).__name__
        print(f"{name}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(name, 1)
    except (OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
