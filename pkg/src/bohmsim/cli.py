"""Command-line runner: ``bohmsim run CONFIG...`` and ``bohmsim verify DIR``.

Each config writes one directory under the output root, named after the
config file. A run directory holds

    config.yaml       the config with every default filled in
    reports.csv       one row per declared test
    summary.json      expected and actual verdicts, scenario diagnostics
    final_state.bsim  the final wave function (BSIM1 dump)
    ...               scenario tables (records, histogram, trajectories)
    MANIFEST          sha256 of every other file

No timestamps, host names or thread counts are written, so identical configs
and seeds give byte-identical directories.

Exit codes: 0 all declared tests behave as expected, 1 otherwise, 2 for a bad
config (run) or a missing/corrupt directory (verify).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from .equilibrium import REPORT_HEADER, report_row
from .errors import ConfigError
from .grid import dump_wavefunction
from .scenarios import ScenarioResult, run_scenario

log = logging.getLogger("bohmsim")

MANIFEST = "MANIFEST"
EXIT_OK, EXIT_FAIL, EXIT_BAD = 0, 1, 2


def _plain(obj):
    """Convert numpy scalars/arrays inside a config echo into plain YAML/JSON types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return _plain(dict(obj.__dict__))
    return obj


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _files(run_dir: Path) -> list[Path]:
    return sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != MANIFEST)


def write_run(result: ScenarioResult, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.yaml", "w") as fh:
        yaml.safe_dump(_plain(result.config), fh, sort_keys=True)
    with open(run_dir / "reports.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        seed = int(result.config.get("seed", 0))
        for d in result.declared:
            w.writerow(report_row(d.scenario, d.report, seed))
    summary = {
        "scenario": result.name,
        "ok": result.ok,
        "tests": [{"test": d.report.test, "expect": "pass" if d.expect_pass else "fail",
                   "passed": d.report.passed, "ok": d.ok} for d in result.declared],
        "info": _plain({k: v for k, v in result.info.items() if k != "plan_result"}),
    }
    with open(run_dir / "summary.json", "w") as fh:
        json.dump(_plain(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for writer in result.tables.values():
        writer(run_dir)
    if result.final_state is not None:
        dump_wavefunction(result.final_state, run_dir / "final_state.bsim")
    lines = [f"{_sha256(p)}  {p.relative_to(run_dir).as_posix()}\n" for p in _files(run_dir)]
    with open(run_dir / MANIFEST, "w") as fh:
        fh.writelines(lines)


def cmd_run(configs: list[str], output: str | None, threads: int) -> int:
    code = EXIT_OK
    root = Path(output) if output else Path("runs")
    for path in configs:
        cpath = Path(path)
        try:
            if not cpath.is_file():
                raise ConfigError(f"config file '{path}' does not exist")
            with open(cpath) as fh:
                cfg = yaml.safe_load(fh)
            if not isinstance(cfg, dict):
                raise ConfigError(f"config '{path}' is not a key/value document")
            result = run_scenario(cfg, cpath.parent, threads)
        except (ConfigError, yaml.YAMLError) as exc:
            print(f"bohmsim: config error in {path}: {exc}", file=sys.stderr)
            return EXIT_BAD
        run_dir = root / cpath.stem
        write_run(result, run_dir)
        for d in result.declared:
            flag = "ok" if d.ok else "UNEXPECTED"
            print(f"{cpath.stem:28s} {d.report.test:48s} stat={d.report.statistic:.6g} "
                  f"thr={d.report.threshold:.6g} passed={d.report.passed} expect={'pass' if d.expect_pass else 'fail'}"
                  f" [{flag}]")
        if not result.ok:
            code = EXIT_FAIL
    return code


def _verify_one(run_dir: Path) -> int:
    man = run_dir / MANIFEST
    if not man.is_file():
        print(f"bohmsim: {run_dir}: no {MANIFEST}", file=sys.stderr)
        return EXIT_BAD
    listed = {}
    for line in man.read_text().splitlines():
        digest, _, name = line.partition("  ")
        listed[name] = digest
    actual = {p.relative_to(run_dir).as_posix(): p for p in _files(run_dir)}
    if set(listed) != set(actual):
        print(f"bohmsim: {run_dir}: file set differs from {MANIFEST}", file=sys.stderr)
        return EXIT_BAD
    for name, digest in listed.items():
        if _sha256(actual[name]) != digest:
            print(f"bohmsim: {run_dir}: hash mismatch for {name}", file=sys.stderr)
            return EXIT_BAD
    try:
        summary = json.loads((run_dir / "summary.json").read_text())
        with open(run_dir / "reports.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, ValueError) as exc:
        print(f"bohmsim: {run_dir}: unreadable report: {exc}", file=sys.stderr)
        return EXIT_BAD
    tests = summary.get("tests", [])
    if len(rows) != len(tests):
        print(f"bohmsim: {run_dir}: reports.csv and summary.json disagree", file=sys.stderr)
        return EXIT_BAD
    ok = True
    for row, t in zip(rows, tests):
        passed = row["passed"] == "true"
        stat, thr = float(row["statistic"]), float(row["threshold"])
        if math.isfinite(stat) and math.isfinite(thr) and passed != (stat <= thr):
            print(f"bohmsim: {run_dir}: verdict of {row['test']} does not follow from its statistic",
                  file=sys.stderr)
            return EXIT_BAD
        if row["test"] != t["test"] or passed != t["passed"]:
            print(f"bohmsim: {run_dir}: {row['test']} differs between reports and summary", file=sys.stderr)
            return EXIT_BAD
        ok &= passed == (t["expect"] == "pass")
    if ok != summary.get("ok"):
        print(f"bohmsim: {run_dir}: aggregate verdict does not match the tests", file=sys.stderr)
        return EXIT_BAD
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(directory: str) -> int:
    root = Path(directory)
    if not root.is_dir():
        print(f"bohmsim: {directory} is not a directory", file=sys.stderr)
        return EXIT_BAD
    if (root / MANIFEST).exists():
        runs = [root]
    else:
        runs = sorted(p for p in root.iterdir() if p.is_dir())
    if not runs:
        print(f"bohmsim: {directory} holds no runs", file=sys.stderr)
        return EXIT_BAD
    worst = EXIT_OK
    for r in runs:
        code = _verify_one(r)
        print(f"{r.name}: {['ok', 'tests failed', 'corrupt'][code]}")
        worst = max(worst, code)
    return worst


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads for ensemble integration")
    common.add_argument("--output", default=None, help="output root directory (default: ./runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="bohmsim", description="Bohmian mechanics scenarios and checks.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", parents=[common], help="run one or more scenario configs")
    p_run.add_argument("config", nargs="+")
    p_ver = sub.add_parser("verify", parents=[common], help="re-check hashes and verdicts of a run directory")
    p_ver.add_argument("dir")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("bohmsim: --threads must be at least 1", file=sys.stderr)
        return EXIT_BAD
    if args.command == "run":
        return cmd_run(args.config, args.output, args.threads)
    return cmd_verify(args.dir)


if __name__ == "__main__":
    sys.exit(main())
