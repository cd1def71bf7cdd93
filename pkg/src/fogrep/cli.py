"""``fogctl``: command-line client for a running daemon machine.

Output is tab-separated, one item per line. Exit status is 0 on success,
1 on a domain error (the error code is printed) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .client import BusChannel, ClientSession
from .errors import DecodeError, FogError, NotFound, SpecInvalid
from .harness.spec import parse_duration
from .identity import Identity
from .model import DataRecord
from .naming import (
    AddClient,
    AddReplica,
    AddTrigger,
    BoundingBox,
    RemoveReplica,
    RemoveTrigger,
    SetTtl,
)
from .netbus import RealClock, SocketBus

USAGE = 2


class UsageError(Exception):
    pass


def parse_ttl(text: str | None) -> int | None:
    """``disabled`` or a duration such as ``500ms``, ``2s``, ``1h``."""
    if text is None or text == "disabled":
        return None
    try:
        return max(1, round(parse_duration(text)))
    except SpecInvalid as exc:
        raise UsageError(f"bad TTL {text!r}") from exc


def parse_fields(items: list[str]) -> dict[str, bytes]:
    fields = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise UsageError(f"expected field=value, got {item!r}")
        fields[name] = value.encode()
    return fields


def parse_bbox(text: str) -> BoundingBox:
    try:
        a, b, c, d = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise UsageError("--bbox wants min_lat,min_lon,max_lat,max_lon") from exc
    return BoundingBox(a, b, c, d)


def format_record(record: DataRecord) -> str:
    parts = [record.key]
    parts += [f"{k}={v.decode('utf-8', 'backslashreplace')}" for k, v in sorted(record.fields.items())]
    if record.deleted:
        parts.append("deleted=true")
    parts += [f"ts={record.timestamp}", f"writer={record.writer}"]
    return "\t".join(parts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fogctl", description="fog data client")
    p.add_argument("--identity", required=True, help="client identity file")
    p.add_argument("--endpoint", required=True, help="daemon machine as host:port")
    p.add_argument("--timeout", type=float, default=5.0, help="seconds per request")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("put")
    s.add_argument("kg")
    s.add_argument("key")
    s.add_argument("fields", nargs="+")
    s = sub.add_parser("get")
    s.add_argument("kg")
    s.add_argument("key")
    s = sub.add_parser("delete")
    s.add_argument("kg")
    s.add_argument("key")

    kg = sub.add_parser("kg").add_subparsers(dest="kg_cmd", required=True)
    s = kg.add_parser("create")
    s.add_argument("kg")
    s.add_argument("replica")
    s.add_argument("--ttl", default="disabled")
    s = kg.add_parser("add-replica")
    s.add_argument("kg")
    s.add_argument("node")
    s.add_argument("--ttl", default="disabled")
    s = kg.add_parser("remove-replica")
    s.add_argument("kg")
    s.add_argument("node")
    s = kg.add_parser("add-trigger")
    s.add_argument("kg")
    s.add_argument("node")
    s = kg.add_parser("remove-trigger")
    s.add_argument("kg")
    s.add_argument("node")
    s = kg.add_parser("set-ttl")
    s.add_argument("kg")
    s.add_argument("node")
    s.add_argument("ttl")
    s = kg.add_parser("add-client")
    s.add_argument("kg")
    s.add_argument("client")
    s = kg.add_parser("show")
    s.add_argument("kg")

    nodes = sub.add_parser("nodes").add_subparsers(dest="nodes_cmd", required=True)
    s = nodes.add_parser("query")
    s.add_argument("--bbox", default="-90,-180,90,180")

    trig = sub.add_parser("trigger").add_subparsers(dest="trigger_cmd", required=True)
    s = trig.add_parser("tail")
    s.add_argument("kg")
    s.add_argument("--follow", action="store_true", help="keep polling until interrupted")
    s.add_argument("--new-only", action="store_true", help="skip records already in the stream")
    s.add_argument("--interval", type=float, default=0.2)
    s.add_argument("--max", type=int, default=0, help="stop after this many records")
    return p


def open_session(args) -> ClientSession:
    try:
        data = Path(args.identity).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read identity file: {exc}") from exc
    try:
        identity, naming_public = Identity.from_file(data)
    except (DecodeError, ValueError) as exc:
        raise UsageError(f"malformed identity file: {exc}") from exc
    clock = RealClock()
    bus = SocketBus(clock)
    return ClientSession(identity, naming_public,
                         BusChannel(bus, f"fogctl-{identity.name}", args.endpoint, clock,
                                    args.timeout * 1000))


def run(args, out) -> int:
    session = open_session(args)
    if args.cmd == "put":
        ack = session.put(args.kg, args.key, parse_fields(args.fields))
        print(f"ok\tts={ack.timestamp}\tcounter={ack.counter}", file=out)
    elif args.cmd == "get":
        record = session.get(args.kg, args.key)
        if record is None:
            raise NotFound(f"{args.key} not found in {args.kg}")
        print(format_record(record), file=out)
    elif args.cmd == "delete":
        ack = session.delete(args.kg, args.key)
        print(f"ok\tts={ack.timestamp}\tcounter={ack.counter}", file=out)
    elif args.cmd == "kg":
        c = args.kg_cmd
        if c == "create":
            meta = session.create_keygroup(args.kg, args.replica, parse_ttl(args.ttl))
        elif c == "show":
            meta = session.keygroup(args.kg, refresh=True)
        else:
            change = {
                "add-replica": lambda: AddReplica(args.node, parse_ttl(args.ttl)),
                "remove-replica": lambda: RemoveReplica(args.node),
                "add-trigger": lambda: AddTrigger(args.node),
                "remove-trigger": lambda: RemoveTrigger(args.node),
                "set-ttl": lambda: SetTtl(args.node, parse_ttl(args.ttl)),
                "add-client": lambda: AddClient(args.client),
            }[c]()
            meta = session.update_keygroup(args.kg, change)
        print(f"version\t{meta.version}", file=out)
        if c == "show":
            for node, cfg in sorted(meta.replica_nodes.items()):
                ttl = "disabled" if cfg.ttl_ms is None else f"{cfg.ttl_ms}ms"
                print(f"replica\t{node}\tttl={ttl}", file=out)
            for node in sorted(meta.trigger_nodes):
                print(f"trigger\t{node}", file=out)
            for client in sorted(meta.authorized_clients):
                print(f"client\t{client}", file=out)
    elif args.cmd == "nodes":
        for d in session.query_region(parse_bbox(args.bbox)):
            print(f"{d.name}\t{d.latitude}\t{d.longitude}\tmachines={len(d.machine_ids)}", file=out)
    elif args.cmd == "trigger":
        offset = session.trigger_subscribe(args.kg) if args.new_only else 0
        seen = 0
        while True:
            offset, records = session.trigger_poll(args.kg, offset)
            for r in records:
                print(format_record(r), file=out, flush=True)
                seen += 1
                if args.max and seen >= args.max:
                    return 0
            if not args.follow and not records:
                return 0
            if not records:
                time.sleep(args.interval)
    return 0


def main(argv: list[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code else 0
    try:
        return run(args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=err)
        return USAGE
    except NotFound:
        print("NOT_FOUND", file=out)
        return 1
    except FogError as exc:
        print(f"{exc.code}\t{exc.message or exc}", file=out)
        return 1
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())
