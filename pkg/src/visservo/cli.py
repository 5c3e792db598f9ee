"""Command-line entry point: ``run``, ``mc`` and ``verify``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from visservo.config import ConfigError, load_config

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NO_SOLUTION = 3

log = logging.getLogger("visservo")


def _cmd_run(args) -> int:
    from visservo import harness

    cfg = load_config(args.config)
    t0 = time.perf_counter()
    result = harness.run(cfg)
    csv_path, json_path = harness.export(result, args.out)
    s = result.summary
    log.info("%d epochs in %.1fs, status %s", s["epochs"], time.perf_counter() - t0, s["status"])
    print(json.dumps({"status": s["status"], "t1": s["t1"], "capture_time": s["capture_time"],
                      "epochs": str(csv_path), "summary": str(json_path)}))
    return EXIT_NO_SOLUTION if s["status"] == "no-solution" else EXIT_OK


def _cmd_mc(args) -> int:
    from visservo import harness

    cfg = load_config(args.config)
    if args.trials < 1:
        raise ConfigError("--trials must be at least 1")
    agg = harness.monte_carlo(cfg, args.trials, args.out, jobs=args.jobs)
    statuses = [s["status"] for s in agg["per_trial"]]
    print(json.dumps({k: agg[k] for k in ("trials", "sigma_violations", "converged_trials", "captured_trials")}))
    return EXIT_NO_SOLUTION if "no-solution" in statuses else EXIT_OK


def _cmd_verify(args) -> int:
    from visservo import acceptance

    only = set(args.criteria) if args.criteria else None
    unknown = sorted((only or set()) - set(acceptance.CHECKS))
    if unknown:
        raise ConfigError(f"unknown criteria {unknown}; choose from {sorted(acceptance.CHECKS)}")
    results = acceptance.run_all(only)
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="visservo", description="Tumbling-target estimation and interception simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_run)

    m = sub.add_parser("mc", help="Monte-Carlo batch of scenarios")
    m.add_argument("--config", required=True)
    m.add_argument("--trials", type=int, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--jobs", type=int, default=1)
    m.set_defaults(func=_cmd_mc)

    v = sub.add_parser("verify", help="run the acceptance checks")
    v.add_argument("criteria", nargs="*", type=int, help="subset of criterion numbers")
    v.set_defaults(func=_cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
