"""Command line interface: ``arbenkf {truth,run,report,selftest}``.

Results are printed as one JSON object on stdout.  Failures print a JSON
object with ``error`` and ``message`` keys on stderr and exit nonzero
(2 for usage or configuration errors, 1 for runtime failures).
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import harness
from .harness import ExperimentConfig
from .qge import NonConvergence
from .selftest import run_selftest


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args):
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    changes = {}
    for name in ("seed", "replicates", "mesh"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    return cfg.replace(**changes) if changes else cfg


def _add_common(p):
    p.add_argument("--config", type=Path, help="flat key = value experiment file")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--mesh", type=int, help="nodes per axis (overrides the config)")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="arbenkf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("truth", help="generate and cache the truth trajectory and archive")
    _add_common(p)

    p = sub.add_parser("run", help="run all replicates of one filter configuration")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--replicates", type=int, help="replicate count (overrides the config)")
    p.add_argument("--no-cache", action="store_true", help="ignore and do not write cached results")

    p = sub.add_parser("report", help="summarize result directories")
    p.add_argument("--out", type=Path, nargs="+", required=True, help="result directories")

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.add_argument("--threads", type=int, default=None)
    return parser


def _cmd_truth(args):
    cfg = _config(args)
    truth = harness.generate_truth(cfg)
    return {
        "truth_hash": cfg.truth_hash(),
        "cache": str(harness.cache_dir() / "truth"),
        "states": len(truth.trajectory),
        "archive": int(truth.archive.snapshots.shape[0]),
        "stationary_residual": truth.stationary_residual,
    }


def _cmd_run(args):
    cfg = _config(args)
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    records = harness.run_experiment(cfg, out_dir=args.out, use_cache=not args.no_cache, progress=progress)
    summary = harness.summarize(records)
    return {
        "out": str(args.out),
        "config_hash": cfg.hash(),
        "count": summary["count"],
        "aborted": summary["aborted"],
        "final_quarter_median": summary["final_quarter_median"],
    }


def _cmd_report(args):
    out = {}
    for d in args.out:
        summary = json.loads((d / "summary.json").read_text())
        records = harness.load_results(d)
        fresh = harness.summarize(records)
        out[str(d)] = {
            "filter": summary["config"]["filter"],
            "eps_r": summary["config"]["eps_r"],
            "count": fresh["count"],
            "final_quarter_median": fresh["final_quarter_median"],
            "final_quarter_by_replicate": fresh["final_quarter_by_replicate"],
            "median_rom_dim": fresh.get("median_rom_dim"),
        }
    return out


def _cmd_selftest(args):
    passed, failures = run_selftest()
    result = {"passed": passed, "failed": len(failures), "failures": dict(failures)}
    if failures:
        raise SelftestFailed(result)
    return result


class SelftestFailed(Exception):
    pass


COMMANDS = {"truth": _cmd_truth, "run": _cmd_run, "report": _cmd_report, "selftest": _cmd_selftest}


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": str(message)}), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    try:
        with threadpool_limits(limits=getattr(args, "threads", None)):
            result = COMMANDS[args.command](args)
    except SelftestFailed as exc:
        print(json.dumps(exc.args[0]))
        return 1
    except (ValueError, KeyError, FileNotFoundError) as exc:
        return _fail("config", exc, 2)
    except (NonConvergence, OSError, RuntimeError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
