"""Daemon versus storage-only latency for put, read and delete.

Runs on the in-process bus, so the numbers measure this implementation on
this machine; only their relative order is meaningful.
"""

import argparse

from fogrep.harness.cluster import build_cluster
from fogrep.harness.measure import measure_latency_overhead
from fogrep.harness.report import emit_report, render_markdown
from fogrep.harness.spec import parse_spec

SPEC = """\
seed 0
node a
node b
client app
keygroup app.kv replicas=a,b clients=app
"""


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ops", type=int, default=1000)
    parser.add_argument("--connector", choices=("memory", "file"), default="memory")
    parser.add_argument("--out", default=None, help="also write markdown (or .tsv) here")
    args = parser.parse_args()
    spec = parse_spec(SPEC.replace("node a", f"node a connector={args.connector}"))
    cluster = build_cluster(spec)
    try:
        tables = list(measure_latency_overhead(cluster, "app.kv", args.ops))
    finally:
        cluster.close()
    for t in tables:
        print(render_markdown(t))
    if args.out:
        emit_report(tables, args.out, "tsv" if args.out.endswith(".tsv") else "markdown")


if __name__ == "__main__":
    main()
