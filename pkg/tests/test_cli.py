import io

import pytest

from fogrep.cli import main as fogctl
from fogrep.cli import parse_ttl, UsageError
from fogrep.daemon import DaemonConfig
from fogrep.deploy import start_local


@pytest.fixture(scope="module")
def dep(tmp_path_factory):
    root = tmp_path_factory.mktemp("deploy")
    d = start_local(
        root,
        {"edge": 2, "cloud": 1, "agg": 1, "spare": 1},
        [("app.kv", [("edge", None), ("cloud", None)], ["agg"], ["app"])],
        ["app", "other"],
        DaemonConfig(config_refresh_ms=500.0),
    )
    assert d.wait_joined(20)
    yield d
    d.close()


def ctl(dep, *argv, client="app", node="edge", idx=0):
    out, err = io.StringIO(), io.StringIO()
    code = fogctl(["--identity", str(dep.identity_files[client]), "--endpoint", dep.endpoint(node, idx),
                   *argv], out, err)
    return code, out.getvalue(), err.getvalue()


def wait_for(dep, fn, timeout=10.0):
    import time
    end = time.time() + timeout
    while time.time() < end:
        result = fn()
        if result:
            return result
        time.sleep(0.05)
    return fn()


def test_put_then_get_elsewhere(dep):
    code, out, _ = ctl(dep, "put", "app.kv", "k1", "temp=21.5", "unit=C")
    assert code == 0 and out.startswith("ok\tts=") and "counter=" in out
    code, out, _ = ctl(dep, "get", "app.kv", "k1", idx=1)
    assert code == 0
    assert out.strip().split("\t")[:3] == ["k1", "temp=21.5", "unit=C"]
    got = wait_for(dep, lambda: ctl(dep, "get", "app.kv", "k1", node="cloud")[0] == 0)
    assert got


def test_missing_key_is_not_found(dep):
    code, out, _ = ctl(dep, "get", "app.kv", "nope")
    assert (code, out.strip()) == (1, "NOT_FOUND")


def test_delete(dep):
    ctl(dep, "put", "app.kv", "gone", "a=1")
    assert ctl(dep, "delete", "app.kv", "gone")[0] == 0
    assert ctl(dep, "get", "app.kv", "gone")[0] == 1


def test_domain_errors_exit_one(dep):
    code, out, _ = ctl(dep, "put", "app.kv", "k", "a=1", client="other")
    assert code == 1 and out.startswith("FORBIDDEN")
    code, out, _ = ctl(dep, "put", "app.kv", "k", "a=1", node="agg")
    assert code == 1 and out.startswith("NOT_REPLICA_NODE")


def test_usage_errors_exit_two(dep, tmp_path):
    assert ctl(dep, "put", "app.kv", "k", "novalue")[0] == 2
    assert ctl(dep, "frobnicate")[0] == 2
    assert fogctl(["put", "a.b", "k", "x=1"], io.StringIO(), io.StringIO()) == 2
    bad = tmp_path / "bad.identity"
    bad.write_bytes(b"junk")
    assert fogctl(["--identity", str(bad), "--endpoint", dep.endpoint("edge"), "get", "app.kv", "k"],
                  io.StringIO(), io.StringIO()) == 2
    assert ctl(dep, "nodes", "query", "--bbox", "1,2,3")[0] == 2
    assert ctl(dep, "kg", "set-ttl", "app.kv", "edge", "soon")[0] == 2


def test_keygroup_commands(dep):
    code, out, _ = ctl(dep, "kg", "create", "app.extra", "edge", "--ttl", "2s")
    assert code == 0 and out.strip() == "version\t1"
    assert ctl(dep, "kg", "add-replica", "app.extra", "spare")[1].strip() == "version\t2"
    assert ctl(dep, "kg", "set-ttl", "app.extra", "edge", "disabled")[0] == 0
    assert ctl(dep, "kg", "add-trigger", "app.extra", "agg")[0] == 0
    assert ctl(dep, "kg", "add-client", "app.extra", "other")[0] == 0
    code, out, _ = ctl(dep, "kg", "show", "app.extra")
    lines = out.strip().splitlines()
    assert lines[0] == "version\t5"
    assert "replica\tedge\tttl=disabled" in lines and "replica\tspare\tttl=disabled" in lines
    assert "trigger\tagg" in lines and "client\tother" in lines
    code, out, _ = ctl(dep, "kg", "create", "app.extra", "edge")
    assert code == 1 and out.startswith("NAME_TAKEN")
    # the new replica joins and serves writes
    ok = wait_for(dep, lambda: ctl(dep, "put", "app.extra", "k", "a=1", node="spare")[0] == 0)
    assert ok


def test_nodes_query(dep):
    code, out, _ = ctl(dep, "nodes", "query")
    names = [line.split("\t")[0] for line in out.strip().splitlines()]
    assert code == 0 and names == ["agg", "cloud", "edge", "spare"]
    code, out, _ = ctl(dep, "nodes", "query", "--bbox=-1,-1,1,0.5")
    assert [line.split("\t")[0] for line in out.strip().splitlines()] == ["edge"]


def test_trigger_tail(dep):
    ctl(dep, "put", "app.kv", "t1", "v=1")
    ctl(dep, "put", "app.kv", "t2", "v=2")
    out = wait_for(dep, lambda: (lambda r: r[1] if "t2" in r[1] else "")(ctl(dep, "trigger", "tail", "app.kv", node="agg")))
    keys = [line.split("\t")[0] for line in out.strip().splitlines()]
    assert keys.index("t1") < keys.index("t2")
    code, out, _ = ctl(dep, "trigger", "tail", "app.kv", "--max", "1", node="agg")
    assert code == 0 and len(out.strip().splitlines()) == 1
    assert ctl(dep, "trigger", "tail", "app.kv", "--new-only", node="agg")[1] == ""
    code, out, _ = ctl(dep, "trigger", "tail", "app.kv", node="edge")
    assert code == 1 and out.startswith("NOT_TRIGGER_NODE")


def test_parse_ttl():
    assert parse_ttl("disabled") is None
    assert parse_ttl("1.5s") == 1500
    with pytest.raises(UsageError):
        parse_ttl("forever")
