"""Command-line entry point.

Exit codes: 0 when every invariant holds, 1 on an invariant failure,
2 on a configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import config as config_mod
from . import harness
from .config import ConfigError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
SCENARIO_NAMES = tuple(harness.SCENARIOS) + ("random-adversary-sweep",)


def _write(path: str | None, text: str) -> None:
    if path is None:
        return
    if path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _metrics_lines(metrics: dict) -> str:
    return "".join(json.dumps({"metric": k, "value": v}, sort_keys=True) + "\n"
                   for k, v in metrics.items())


def _scenario_result(args) -> harness.RunResult:
    name, seed = args.scenario, args.seed
    if name == "db-controls-cloud":
        return harness.scenario_db_controls_cloud(seed, args.variant)
    if name == "dc-controls-cloud":
        return harness.scenario_dc_controls_cloud(seed, args.blocked, args.endpoints)
    return harness.SCENARIOS[name](seed)


def cmd_run(args) -> int:
    if args.config and args.scenario:
        raise ConfigError("give either --config or --scenario, not both")
    if args.scenario == "random-adversary-sweep" or args.sweep is not None:
        return _cmd_sweep(args)
    if args.config:
        cfg = config_mod.load(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        result = harness.run(cfg)
    else:
        if args.scenario is None:
            raise ConfigError("nothing to run: pass --config or --scenario")
        if args.seed is None:
            args.seed = 0
        result = _scenario_result(args)
    verdict = result.verdict()
    _write(args.transcript, result.transcript)
    _write(args.metrics, _metrics_lines(result.metrics()))
    print(f"scenario {result.config.name} seed {result.config.seed}: {result.outcome.kind}")
    sys.stdout.write(verdict.text())
    return EXIT_OK if verdict.ok else EXIT_FAIL


def _cmd_sweep(args) -> int:
    count = 100 if args.sweep is None else args.sweep
    if count < 1:
        raise ConfigError("--sweep needs a positive count")
    base = config_mod.load(args.config) if args.config else harness.honest_config("db")
    report = harness.random_adversary_sweep(count, args.seed or 0, base)
    lines = []
    for index, seed, policy, failed, outcome in report.runs:
        status = "FAIL " + ",".join(failed) if failed else "PASS"
        lines.append(f"{index} seed={seed} outcome={outcome} {status}")
    _write(args.transcript, "".join(line + "\n" for line in lines))
    _write(args.metrics, _metrics_lines({"runs": count, "violations": report.violations,
                                         "outcomes": report.outcomes()}))
    print(f"sweep of {count} policies: {report.violations} violating runs; "
          f"outcomes {report.outcomes()}")
    return EXIT_OK if report.violations == 0 else EXIT_FAIL


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("values must be positive")
    return values


def cmd_bench_attest(args) -> int:
    if args.owners < 1:
        raise ConfigError("--owners must be at least 1")
    print("owners workers makespan_s formula_s")
    for w in args.workers:
        got = harness.bench_attest(args.owners, w, seed=args.seed)
        want = harness.attest_formula_ms(args.owners, w)
        print(f"{args.owners} {w} {got / 1000:.1f} {want / 1000:.1f}")
    return EXIT_OK


def cmd_compare_paradigms(args) -> int:
    if args.owners < 1:
        raise ConfigError("--owners must be at least 1")
    counts = range(1, args.owners + 1) if args.range else [args.owners]
    print("owners ida_flow_calls db_flow_calls")
    for n in counts:
        ida = harness.flow_calls("ida", n, seed=args.seed)
        db = harness.flow_calls("db", n, seed=args.seed)
        print(f"{n} {ida} {db}")
    return EXIT_OK


def cmd_show_config(args) -> int:
    builders = {
        "honest-db": lambda: harness.honest_config("db", args.seed),
        "honest-ida": lambda: harness.honest_config("ida", args.seed),
        "db-controls-cloud": lambda: harness.db_controls_cloud_config(args.seed),
        "dc-controls-cloud": lambda: harness.dc_controls_cloud_config(args.seed),
        "timeout-cancel": lambda: harness.timeout_cancel_config(args.seed),
    }
    sys.stdout.write(builders[args.scenario]().to_ini())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="datamarket",
                                     description="Simulated confidential data marketplace")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a named or configured scenario")
    run.add_argument("--config", help="INI scenario file")
    run.add_argument("--scenario", choices=SCENARIO_NAMES)
    run.add_argument("--seed", type=int)
    run.add_argument("--transcript", help="write the transcript here ('-' for stdout)")
    run.add_argument("--metrics", help="write metrics as JSON lines here")
    run.add_argument("--sweep", type=int, metavar="COUNT",
                     help="run COUNT random adversary policies")
    run.add_argument("--variant", default="suppress", choices=("suppress", "tamper", "honest"),
                     help="db-controls-cloud attack variant")
    run.add_argument("--blocked", type=float, default=0.8,
                     help="dc-controls-cloud: fraction of ledger endpoints blocked")
    run.add_argument("--endpoints", type=int, default=5)
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench-attest", help="attestation makespan for N owners")
    bench.add_argument("--owners", type=int, default=160)
    bench.add_argument("--workers", type=_int_list, default=[1, 4, 16, 64])
    bench.add_argument("--seed", type=int, default=0)
    bench.set_defaults(func=cmd_bench_attest)

    cmp_ = sub.add_parser("compare-paradigms", help="per-flow on-chain calls, iDA vs DB")
    cmp_.add_argument("--owners", type=int, default=10)
    cmp_.add_argument("--range", action="store_true", help="every N from 1 to --owners")
    cmp_.add_argument("--seed", type=int, default=0)
    cmp_.set_defaults(func=cmd_compare_paradigms)

    show = sub.add_parser("show-config", help="print a named scenario as INI")
    show.add_argument("--scenario", required=True, choices=tuple(harness.SCENARIOS))
    show.add_argument("--seed", type=int, default=0)
    show.set_defaults(func=cmd_show_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
