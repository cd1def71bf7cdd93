"""Build a simulated cluster from a spec file and run its scenario."""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from ..errors import FogError, IoFailure, ScenarioAssertionFailed, SpecInvalid
from .cluster import build_cluster
from .report import emit_report
from .scenarios import SCENARIOS, run_scenario
from .spec import ClusterSpec, parse_spec


def load_spec(source: str, seed: int | None = None) -> ClusterSpec:
    path = Path(source)
    if path.exists():
        try:
            text = path.read_text()
        except OSError as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
    elif source in SCENARIOS:
        text = SCENARIOS[source][1]
    else:
        raise SpecInvalid(f"{source}: no such spec file or built-in scenario")
    spec = parse_spec(text)
    if seed is not None:
        spec.seed = seed
        spec.faults = replace(spec.faults, rng_seed=seed)
    return spec


def run(source: str, seed: int | None = None, report: str | None = None):
    spec = load_spec(source, seed)
    if not spec.scenario:
        raise SpecInvalid("spec has no scenario stanza")
    cluster = build_cluster(spec)
    try:
        result = run_scenario(spec.scenario, cluster)
    except ScenarioAssertionFailed as exc:
        result = getattr(exc, "report", None)
        if report and result is not None:
            result.loss = cluster.loss_report()
            result.trace_digest = cluster.bus.trace_digest()
            emit_report(result, report)
        raise
    finally:
        cluster.close()
    if report:
        emit_report(result, report)
    return result


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fogsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the scenario of a spec file or built-in name")
    p_run.add_argument("spec")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--report", default=None, help="write a markdown report here")
    sub.add_parser("list", help="list built-in scenarios")
    p_show = sub.add_parser("show", help="print the spec of a built-in scenario")
    p_show.add_argument("name", choices=sorted(SCENARIOS))
    args = parser.parse_args(argv)

    if args.command == "list":
        for name in SCENARIOS:
            print(name)
        return 0
    if args.command == "show":
        print(SCENARIOS[args.name][1], end="")
        return 0
    started = time.perf_counter()
    try:
        result = run(args.spec, args.seed, args.report)
    except ScenarioAssertionFailed as exc:
        print(f"FAIL\t{exc}", file=sys.stderr)
        return 1
    except SpecInvalid as exc:
        print(f"{exc.code}\t{exc}", file=sys.stderr)
        return 2
    except FogError as exc:
        print(f"{exc.code}\t{exc}", file=sys.stderr)
        return 1
    for text, ok in result.checks:
        print(f"{'PASS' if ok else 'FAIL'}\t{text}")
    print(f"scenario={result.name}\tseed={result.seed}\tdigest={result.trace_digest}"
          f"\twall_s={time.perf_counter() - started:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
