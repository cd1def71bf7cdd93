"""Run built-in scenarios and write one markdown report per run.

    python3 scripts/run_scenarios.py --out reports
    python3 scripts/run_scenarios.py convergence --seeds 0-19
"""

import argparse
import sys
import time
from pathlib import Path

from fogrep.errors import ScenarioAssertionFailed
from fogrep.harness.cli import run
from fogrep.harness.scenarios import SCENARIOS


def seed_range(text: str) -> list[int]:
    lo, _, hi = text.partition("-")
    return list(range(int(lo), int(hi or lo) + 1))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("names", nargs="*", default=list(SCENARIOS))
    parser.add_argument("--seeds", type=seed_range, default=None, help="e.g. 3 or 0-99")
    parser.add_argument("--out", type=Path, default=Path("reports"))
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for name in args.names:
        for seed in args.seeds or [None]:
            tag = name if seed is None else f"{name}-seed{seed}"
            started = time.perf_counter()
            try:
                report = run(name, seed, str(args.out / f"{tag}.md"))
                status = "PASS"
            except ScenarioAssertionFailed as exc:
                report, status = None, f"FAIL {exc}"
                failures += 1
            digest = report.trace_digest[:16] if report else "-"
            print(f"{tag:32s} {status:6s} {time.perf_counter() - started:6.2f}s  digest={digest}")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
