"""Replication staleness for puts and deletes over a configurable link."""

import argparse

from fogrep.harness.cluster import build_cluster
from fogrep.harness.measure import measure_staleness
from fogrep.harness.report import emit_report, render_markdown
from fogrep.harness.spec import parse_spec


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ops", type=int, default=1000)
    parser.add_argument("--delay", default="20ms", help="link delay, e.g. 20ms or 5ms..30ms")
    parser.add_argument("--drop", type=float, default=0.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()
    spec = parse_spec(
        f"seed {args.seed}\nnode origin\nnode remote\nclient app\n"
        f"keygroup app.stale replicas=origin,remote clients=app\n"
        f"faults delay={args.delay} drop={args.drop}\n"
    )
    cluster = build_cluster(spec)
    try:
        table = measure_staleness(cluster, "app.stale", args.ops)
    finally:
        cluster.close()
    print(render_markdown(table))
    if args.out:
        emit_report([table], args.out, "tsv" if args.out.endswith(".tsv") else "markdown")


if __name__ == "__main__":
    main()
