"""Command-line front end.

    admm-nnmpc run --config two_lane --planner admm --out out/ [--trace] [--certify]
    admm-nnmpc compare --config three_lane --out out/
    admm-nnmpc certify --config my_scenario.json --out out/

``--config`` takes a JSON file or the name of a builtin scenario. Exit codes:
0 merged (or success), 2 configuration error, 3 collision, 4 failed merge
or step limit.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import admm, sim

logger = logging.getLogger("admm_nnmpc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COLLISION = 3
EXIT_NOT_MERGED = 4

OUTCOME_EXIT = {"merged": EXIT_OK, "collision": EXIT_COLLISION, "failed": EXIT_NOT_MERGED,
                "step_limit": EXIT_NOT_MERGED}
COMPARISON_COLUMNS = ("schema_version", "scenario", "planner", "outcome", "t_merge", "C_max",
                      "d_min")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _configure_logging():
    level = os.environ.get("ADMM_NNMPC_LOG_LEVEL", "error").lower()
    if level not in LOG_LEVELS:
        print(f"ignoring unknown ADMM_NNMPC_LOG_LEVEL={level!r}", file=sys.stderr)
        level = "error"
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")


def _write_json(path: Path, data: dict):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _certificate_json(cert: admm.RhoCertificate) -> dict:
    return {"schema_version": sim.SCHEMA_VERSION, **cert.as_dict()}


def _run_one(cfg: sim.ScenarioConfig, planner: str, out: Path, trace: bool, certify: bool):
    out.mkdir(parents=True, exist_ok=True)
    result = sim.run(cfg, planner, keep_traces=trace, certify=certify and planner == "admm")
    result.log.to_csv(out / "simlog.csv")
    _write_json(out / "summary.json", result.log.summary())
    for t, rows in sorted(result.traces.items()):
        admm.write_trace_csv(out / f"admm_trace_step_{t:03d}.csv", rows)
    if result.certificate is not None:
        _write_json(out / "rho_certificate.json", _certificate_json(result.certificate))
    return result


def cmd_run(args) -> int:
    cfg = sim.load_config(args.config)
    result = _run_one(cfg, args.planner, Path(args.out), args.trace, args.certify)
    print(f"{cfg.name}/{args.planner}: {result.outcome}")
    return OUTCOME_EXIT[result.outcome]


def _table_row(scenario, planner, summary):
    return {"schema_version": sim.SCHEMA_VERSION, "scenario": scenario, "planner": planner,
            "outcome": summary.get("outcome", "error"), "t_merge": summary.get("t_merge"),
            "C_max": summary.get("C_max"), "d_min": summary.get("d_min")}


def cmd_compare(args) -> int:
    cfg = sim.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    status = EXIT_OK
    for planner in ("admm", "baseline"):
        try:
            result = _run_one(cfg, planner, out / planner, False, False)
            rows.append(_table_row(cfg.name, planner, result.log.summary()))
        except Exception as exc:  # keep the partial table
            logger.error("%s run failed: %s", planner, exc)
            rows.append(_table_row(cfg.name, planner, {"outcome": f"error: {exc}"}))
            status = EXIT_NOT_MERGED
    with open(out / "comparison.csv", "w") as fh:
        fh.write(",".join(COMPARISON_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join("" if r[c] is None else str(r[c]) for c in COMPARISON_COLUMNS) + "\n")
    _write_json(out / "comparison.json", {"schema_version": sim.SCHEMA_VERSION, "rows": rows})
    print(format_table(rows))
    return status


def format_table(rows) -> str:
    head = f"{'planner':<10}{'outcome':<12}{'t_merge':>8}{'C_max':>10}{'d_min':>8}"
    lines = [head]
    for r in rows:
        t = "-" if r["t_merge"] is None else str(r["t_merge"])
        c = "-" if r["C_max"] is None else f"{r['C_max']:.1f}"
        d = "-" if r["d_min"] is None else f"{r['d_min']:.2f}"
        lines.append(f"{r['planner']:<10}{r['outcome']:<12}{t:>8}{c:>10}{d:>8}")
    return "\n".join(lines)


def cmd_certify(args) -> int:
    cfg = sim.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prob = sim.initial_problem(cfg)
    cert = admm.rho_certificate(prob, cfg.admm, seed=args.seed)
    _write_json(out / "rho_certificate.json", _certificate_json(cert))
    verdict = "satisfied" if cert.satisfied else "not satisfied (informational)"
    print(f"rho={cert.rho_used:g} bound={cert.bound:.4g}: {verdict}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="admm-nnmpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one scenario with one planner")
    run.add_argument("--config", required=True, help="JSON file or builtin name")
    run.add_argument("--planner", choices=("admm", "baseline"), default="admm")
    run.add_argument("--out", required=True)
    run.add_argument("--trace", action="store_true", help="write per-step ADMM traces")
    run.add_argument("--certify", action="store_true", help="write the rho certificate")
    run.add_argument("--seed", type=int, default=0,
                     help="accepted for manifest completeness; runs are deterministic")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run both planners and tabulate metrics")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--out", required=True)
    cmp_.set_defaults(func=cmd_compare)

    cert = sub.add_parser("certify", help="evaluate the rho bound at the first planning step")
    cert.add_argument("--config", required=True)
    cert.add_argument("--out", required=True)
    cert.add_argument("--seed", type=int, default=0)
    cert.set_defaults(func=cmd_certify)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except sim.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
