import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fogrep.errors import Forbidden, NoOpMovement, UnknownKeygroup, UnknownNode
from fogrep.client import on_movement, setup_keygroup
from fogrep.model import validate_keygroup_name
from fogrep.naming import AddReplica, RemoveReplica

from helpers import small_cluster

KG = validate_keygroup_name("app.kv")


@pytest.fixture
def cluster():
    return small_cluster("keygroup app.kv replicas=a,b clients=app\n",
                         nodes="node a machines=2\nnode b\nnode c\n")


def test_put_get_delete_through_session(cluster):
    s = cluster.session("app", "a")
    ack = s.put("app.kv", "k", {"f": b"1"})
    assert ack.counter == 1
    assert s.get("app.kv", "k").fields == {"f": b"1"}
    cluster.settle()
    other = cluster.session("app", "b")
    assert other.get("app.kv", "k").writer == "a"  # origin node orders LWW
    s.delete("app.kv", "k")
    assert s.get("app.kv", "k") is None
    assert s.get("app.kv", "missing") is None


def test_unauthorized_client_is_refused(cluster):
    s = cluster.session("operator", "a")
    with pytest.raises(Forbidden):
        s.put("app.kv", "k", {"f": b"1"})
    with pytest.raises(UnknownKeygroup):
        cluster.session("app", "c").get("app.kv", "k")


def test_session_recovers_from_rotated_secret(cluster):
    s = cluster.session("app", "a")
    s.put("app.kv", "k", {"f": b"1"})
    cluster.naming.call(cluster.clients["app"], "update_keygroup", KG, AddReplica("c"))
    cluster.naming.call(cluster.clients["app"], "update_keygroup", KG, RemoveReplica("c"))
    cluster.sync_config()
    cluster.run_for(cluster.machine("a").config.secret_grace_ms + 1)
    # cached metadata still holds secret v1, which the daemon no longer accepts
    s.put("app.kv", "k2", {"f": b"2"})
    assert s.keygroup("app.kv").secret.version == 2
    assert s.get("app.kv", "k2").fields == {"f": b"2"}


def test_setup_keygroup_is_idempotent(cluster):
    s = cluster.session("operator", "a")
    first = setup_keygroup(s, "ops.log", [("a", None), ("b", 500)], ["c"], ["app"])
    again = [setup_keygroup(s, "ops.log", [("a", None), ("b", 500)], ["c"], ["app"]) for _ in range(3)]
    for meta in again:
        assert meta.version == first.version
        assert (meta.replica_nodes, meta.trigger_nodes, meta.authorized_clients) == \
            (first.replica_nodes, first.trigger_nodes, first.authorized_clients)


def test_setup_keygroup_unknown_node_creates_nothing(cluster):
    s = cluster.session("operator", "a")
    with pytest.raises(UnknownNode):
        setup_keygroup(s, "ops.bad", [("a", None), ("nowhere", None)])
    assert cluster.naming.keygroup("ops.bad") is None


def test_on_movement_swaps_with_one_rotation(cluster):
    s = cluster.session("app", "a")
    before = s.keygroup("app.kv", refresh=True)
    meta = on_movement(s, "app.kv", "a", "c")
    assert set(meta.replica_nodes) == {"b", "c"}
    assert meta.secret.version == before.secret.version + 1
    assert meta.version == before.version + 2  # add, then remove


def test_on_movement_rejects_noop_and_unknown(cluster):
    s = cluster.session("app", "a")
    with pytest.raises(NoOpMovement):
        on_movement(s, "app.kv", "a", "a")
    with pytest.raises(UnknownNode):
        on_movement(s, "app.kv", "c", "a")


def test_trigger_subscribe_and_poll():
    c = small_cluster("keygroup app.kv replicas=a triggers=t clients=app\n", nodes="node a\nnode t\n")
    writer = c.session("app", "a")
    writer.put("app.kv", "early", {"f": b"0"})
    c.settle()
    reader = c.session("app", "t")
    offset = reader.trigger_subscribe("app.kv")
    assert offset == 1
    for i in range(3):
        writer.put("app.kv", f"k{i}", {"f": b"1"})
    c.settle()
    offset, records = reader.trigger_poll("app.kv", offset)
    assert [r.key for r in records] == ["k0", "k1", "k2"] and offset == 4
    assert reader.trigger_poll("app.kv", offset) == (4, [])
    _, everything = reader.trigger_poll("app.kv", 0)
    assert [r.key for r in everything] == ["early", "k0", "k1", "k2"]


ops = st.lists(
    st.tuples(st.sampled_from(["put", "get", "delete"]), st.sampled_from(["x", "y"]), st.integers(0, 1)),
    min_size=1, max_size=12,
)


@settings(max_examples=15)
@given(ops)
def test_machines_of_a_node_are_interchangeable(seq):
    """Issuing a sequence through one machine or spread across both gives
    the same observations."""
    def run(pick):
        c = small_cluster("keygroup app.kv replicas=a clients=app\n", nodes="node a machines=2\n")
        sessions = [c.session("app", "a", 0), c.session("app", "a", 1)]
        seen = []
        for op, key, m in seq:
            s = sessions[pick(m)]
            if op == "put":
                s.put("app.kv", key, {"f": key.encode()})
            elif op == "delete":
                s.delete("app.kv", key)
            else:
                r = s.get("app.kv", key)
                seen.append(None if r is None else (r.key, dict(r.fields), r.deleted))
            c.run_for(1)
        final = {k: (dict(r.fields), r.deleted) for k, r in c.storages["a"].snapshot(KG).items()}
        return seen, final

    assert run(lambda m: 0) == run(lambda m: m)
