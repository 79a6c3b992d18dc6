"""Command-line entry point: ``anisoplap {solve,verify,norms}``.

Exit status: 0 on success, 1 when a hard assertion fails, 2 on configuration
errors, 3 when a solve does not converge.
"""
from __future__ import annotations

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from . import harness
from .config import ConfigError, RunConfig, load_config
from .mesh import RegionError
from .norms import estimate_ellipticity, unit_sphere_samples, verify_dual_identity
from .verify import ESTIMATES

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_NONCONV = 0, 1, 2, 3


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="random seed (overrides seed)")
    common.add_argument("--threads", type=int, default=1, help="BLAS thread count (default 1)")
    common.add_argument("--dry-run", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="anisoplap", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve the configured instances")
    v = sub.add_parser("verify", parents=[common], help="run estimate checks")
    v.add_argument("--list", action="store_true", help="list estimate ids and exit")
    v.add_argument("--fault-injection", action="store_true",
                   help="corrupt solution fields with noise (negative control)")
    sub.add_parser("norms", parents=[common], help="norm identities and ellipticity constants")
    return ap


def _load(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.out:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_solve(cfg, args):
    instances = harness.solve_instances(cfg)
    for path in harness.write_solve_csv(instances, cfg.output_dir):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_verify(cfg, args):
    result = harness.run_verify(cfg, fault_injection=args.fault_injection)
    for path in harness.write_reports(result, cfg.output_dir):
        print(f"wrote {path}")
    if result.failures:
        for f in result.failures:
            print(f"FAILED {f}", file=sys.stderr)
        return EXIT_ASSERT
    print(f"all {len(result.reports)} estimate checks passed")
    return EXIT_OK


def cmd_norms(cfg, args):
    H = cfg.norm()
    samples = unit_sphere_samples(H.dim, 1000, seed=cfg.seed)
    dev = verify_dual_identity(H, samples)
    print(f"norm: {H.describe()}")
    print(f"alpha (|xi| <= alpha H(xi)): {H.alpha:.6g}")
    print(f"dual identity max deviation: {dev:.3e}")
    for p in cfg.p_values:
        e = estimate_ellipticity(H, p, seed=cfg.seed)
        print(f"p={p:g}: lambda={e.lam:.6g} Lambda={e.Lam:.6g} ({e.sample_count} samples)")
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify" and args.list:
        width = max(map(len, ESTIMATES))
        for eid, desc in ESTIMATES.items():
            print(f"{eid:<{width}}  {desc}")
        return EXIT_OK
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        print("config error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        print(f"command = {args.command}")
        print(cfg.describe())
        return EXIT_OK
    commands = {"solve": cmd_solve, "verify": cmd_verify, "norms": cmd_norms}
    with threadpool_limits(limits=args.threads):
        try:
            return commands[args.command](cfg, args)
        except harness.NonConvergence as exc:
            print(f"solver did not converge: {exc}", file=sys.stderr)
            return EXIT_NONCONV
        except (ConfigError, RegionError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
