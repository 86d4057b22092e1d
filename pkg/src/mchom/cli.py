"""Command line entry point: ``mchom <command> [options]``.

Exit status is 0 on success, 1 when ``verify`` finds a violation, 2 for an
invalid configuration and 3 when a stage fails.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from .config import CACHE_ENV, ConfigError, load_config
from .macro import read_tensors_csv
from .pipeline import Check, Run, ReportRow, StageError, run_study, run_verify, write_report

log = logging.getLogger("mchom")

COMMANDS = {
    "generate": "write the coefficient field, continuum labels and a manifest",
    "fine-solve": "solve the fine-scale reference problem",
    "basis": "build the localized NLMC basis and report its errors",
    "tensors": "solve the cell problems and export effective tensors",
    "macro": "solve the homogenized system and reconstruct",
    "pipeline": "run every stage and write one report row",
    "study": "sweep parameters and write a report with slopes",
    "verify": "run identity, structure and solver checks",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mchom", description="Multicontinuum homogenization runs.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--cache", metavar="DIR", help=f"cache directory (overridden by ${CACHE_ENV})")
    common.add_argument("--threads", type=int, metavar="N", help="worker threads for cell solves")
    common.add_argument("--tol", type=float, metavar="X", help="linear solver tolerance")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "verify":
            p.add_argument("--tensors", metavar="DIR",
                           help="check exported tensor CSVs in DIR instead of computing them")
    return parser


def _write_checks(path, checks):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "value", "limit", "passed", "detail"])
        for c in checks:
            w.writerow([c.name, f"{c.value:.17g}", f"{c.limit:.17g}", int(c.passed), c.detail])


def _verify_tensor_files(directory, H):
    t = read_tensors_csv(directory, H)
    return [
        Check("tensor-symmetry", t.symmetry_violation(), 1e-12, t.symmetry_violation() <= 1e-12),
        Check("tensor-psd", -t.min_eigenvalue_ratio(), 1e-10, -t.min_eigenvalue_ratio() <= 1e-10),
    ]


def run_command(args):
    cfg = load_config(args.config, out=args.out, cache=args.cache, threads=args.threads, tol=args.tol)
    cmd = args.command
    if cmd == "study":
        os.makedirs(cfg.out, exist_ok=True)
        cfg.write(os.path.join(cfg.out, "config.resolved.yaml"))
        rows = run_study(cfg)
        write_report(os.path.join(cfg.out, "report.csv"), rows)
        failed = [r for r in rows if r.status.startswith("failed")]
        for r in rows:
            if r.kind != "point":
                print(f"{r.quantity}: {r.value if r.value is not None else 'n/a'}")
        print(f"{len(rows)} rows, {len(failed)} failed points -> {os.path.join(cfg.out, 'report.csv')}")
        return 0

    run = Run(cfg)
    run.write_config()
    if cmd == "generate":
        _, field_, cmap = run.medium()
        print(f"kappa in [{field_.kappa_min:g}, {field_.kappa_max:g}], "
              f"continuum-1 fraction {cmap.labels.mean():.6g}")
    elif cmd == "fine-solve":
        run.fine()
    elif cmd == "basis":
        row = ReportRow.from_config("basis", cfg, {**run.nlmc_metrics(), **run.timings})
        write_report(run.path("report.csv"), [row])
        print(f"relative energy error {row.metrics['energy_error_rel']:.6e}")
    elif cmd == "tensors":
        t = run.tensors()
        print(f"{t.n_cells} cells, symmetry {t.symmetry_violation():.3e}, "
              f"min eigenvalue ratio {t.min_eigenvalue_ratio():.3e}")
    elif cmd == "macro":
        sol = run.macro()
        m = run.macro_metrics()
        print(f"residual {sol.residual:.3e}, relative L2 error {m['macro_l2_error_rel']:.6e}")
        if sol.diagnostics.get("singular"):
            print(f"note: singular system, null space dimension {sol.diagnostics['null_dim']}")
    elif cmd == "pipeline":
        row = run.report_row("pipeline", nlmc="nlmc" in cfg.stages, macro="macro" in cfg.stages)
        write_report(run.path("report.csv"), [row])
        disc = row.metrics.get("identity_discrepancy", 0.0)
        checks = [Check("averaging-identity", disc, cfg.identity_tol, disc <= cfg.identity_tol)]
        for k in ("energy_error_rel", "macro_l2_error_rel", "identity_discrepancy"):
            if k in row.metrics:
                print(f"{k} {row.metrics[k]:.6e}")
        if "identity_discrepancy" in row.metrics and not checks[0].passed:
            print("averaging identity check failed", file=sys.stderr)
            return 1
    elif cmd == "verify":
        if args.tensors:
            checks = _verify_tensor_files(args.tensors, cfg.scale)
        else:
            checks = run_verify(run)
        _write_checks(run.path("verify.csv"), checks)
        for c in checks:
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value:.3e} (limit {c.limit:.1e})")
        return 0 if all(c.passed for c in checks) else 1
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_command(args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
