"""Start a small deployment on localhost TCP ports and drive it with fogctl.

With ``--serve`` the deployment stays up and prints ready-made fogctl
command lines until interrupted.
"""

import argparse
import io
import tempfile
import time

from fogrep.cli import main as fogctl
from fogrep.deploy import start_local


def ctl(dep, node, *argv, client="app"):
    out, err = io.StringIO(), io.StringIO()
    code = fogctl(["--identity", str(dep.identity_files[client]),
                   "--endpoint", dep.endpoint(node), *argv], out, err)
    print(f"$ fogctl @{node} {' '.join(argv)}  -> exit {code}")
    for line in (out.getvalue() + err.getvalue()).splitlines():
        print(f"    {line}")
    return code


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dir", default=None, help="data directory (default: a temp dir)")
    parser.add_argument("--serve", action="store_true")
    args = parser.parse_args()
    root = args.dir or tempfile.mkdtemp(prefix="fogrep-demo-")
    dep = start_local(root, {"edge": 2, "cloud": 1, "agg": 1},
                      [("app.readings", [("edge", 60_000), ("cloud", None)], ["agg"], ["app"])],
                      ["app"])
    try:
        if not dep.wait_joined(20):
            raise SystemExit("deployment did not come up")
        print(f"data in {root}")
        ctl(dep, "edge", "put", "app.readings", "t-001", "celsius=21.5")
        time.sleep(0.5)
        ctl(dep, "cloud", "get", "app.readings", "t-001")
        ctl(dep, "agg", "trigger", "tail", "app.readings")
        ctl(dep, "edge", "kg", "show", "app.readings")
        if args.serve:
            ident = dep.identity_files["app"]
            for node in dep.machines:
                print(f"fogctl --identity {ident} --endpoint {dep.endpoint(node)} ...")
            while True:
                time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        dep.close()


if __name__ == "__main__":
    main()
