
import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, initialize, invariant, rule

from fogrep.errors import UnknownKeygroup
from fogrep.model import DataRecord, tombstone, validate_keygroup_name
from fogrep.storage import FileConnector, MemoryConnector, make_connector

KG = validate_keygroup_name("app.data")
KG2 = validate_keygroup_name("app.other")


def rec(key, ts, value=b"v", writer="w"):
    return DataRecord(KG, key, {"f": value}, ts, writer)


def state(c):
    kgs = c.keygroups()
    return (
        {str(k): (c.ttl(k), {s.record.key: s for s in c.items(k)}) for k in kgs},
        {k: c.meta_get(k) for k in c.meta_keys()},
        c.live_machines(1e12, 1e13),
    )


def test_merge_keeps_lww_winner():
    c = MemoryConnector()
    c.register_keygroup(KG)
    assert c.merge(KG, rec("a", 5), 0.0) == (rec("a", 5), True)
    assert c.merge(KG, rec("a", 3), 1.0) == (rec("a", 5), False)
    winner, changed = c.merge(KG, tombstone(KG, "a", 6, "w"), 2.0)
    assert changed and winner.deleted


def test_unknown_keygroup():
    c = MemoryConnector()
    with pytest.raises(UnknownKeygroup):
        c.get(KG, "a")


def test_ttl_is_lazy_and_sweep_is_physical():
    c = MemoryConnector()
    c.register_keygroup(KG, ttl_ms=100)
    c.put(KG, rec("a", 1), now=0.0)
    assert c.get(KG, "a", now=100.0) is not None
    assert c.get(KG, "a", now=100.5) is None          # lazily invisible
    assert c.get(KG, "a") is not None                 # still physically present
    assert c.sweep_expired(KG, 100, now=100.5) == ["a"]
    assert c.get(KG, "a") is None


def test_expired_copy_counts_as_absent_in_merge():
    c = MemoryConnector()
    c.register_keygroup(KG, ttl_ms=10)
    c.put(KG, rec("a", 9), now=0.0)
    # an older record arriving after expiry is stored afresh
    assert c.merge(KG, rec("a", 1), now=50.0) == (rec("a", 1), True)


def test_compaction_only_touches_old_tombstones():
    c = MemoryConnector()
    c.register_keygroup(KG)
    c.put(KG, tombstone(KG, "old", 1, "w"), now=0.0)
    c.put(KG, tombstone(KG, "new", 1, "w"), now=90.0)
    c.put(KG, rec("live", 1), now=0.0)
    assert c.compact_tombstones(KG, 50.0, now=100.0) == ["old"]
    assert sorted(c.snapshot(KG)) == ["live", "new"]


def test_membership_liveness():
    c = MemoryConnector()
    c.membership_heartbeat("m1", 0.0)
    c.membership_heartbeat("m0", 50.0)
    assert c.live_machines(100.0, 60.0) == ["m0"]
    assert c.live_machines(100.0, 200.0) == ["m0", "m1"]
    c.forget_machine("m0")
    assert c.live_machines(100.0, 200.0) == ["m1"]


def test_meta_update_is_read_modify_write():
    c = MemoryConnector()
    for _ in range(3):
        c.meta_update(("counter", "x"), lambda v: (v or 0) + 1)
    assert c.meta_get(("counter", "x")) == 3
    assert c.meta_keys(("counter",)) == [("counter", "x")]


def test_file_layout(tmp_path):
    c = FileConnector(tmp_path)
    c.register_keygroup(KG)
    c.put(KG, rec("a", 1), 0.0)
    c.membership_heartbeat("m0", 1.0)
    c.meta_put(("k",), 1)
    c.close()
    assert (tmp_path / "app.data" / "journal").is_file()
    assert (tmp_path / "membership" / "journal").is_file()
    assert (tmp_path / "meta" / "journal").is_file()


def test_file_reopen_and_torn_tail(tmp_path):
    c = FileConnector(tmp_path)
    c.register_keygroup(KG, ttl_ms=500)
    c.put(KG, rec("a", 1), 0.0)
    c.put(KG, rec("b", 2), 0.0)
    c.close()
    journal = tmp_path / "app.data" / "journal"
    raw = journal.read_bytes()
    journal.write_bytes(raw[:-3])  # crash mid-frame
    c2 = FileConnector(tmp_path)
    assert sorted(c2.snapshot(KG)) == ["a"]
    assert c2.ttl(KG) == 500
    c2.put(KG, rec("c", 3), 0.0)
    c2.close()
    c3 = FileConnector(tmp_path)
    assert sorted(c3.snapshot(KG)) == ["a", "c"]


def test_file_drop_keygroup_survives_reopen(tmp_path):
    c = FileConnector(tmp_path)
    c.register_keygroup(KG)
    c.put(KG, rec("a", 1), 0.0)
    c.drop_keygroup(KG)
    c.close()
    assert not FileConnector(tmp_path).has_keygroup(KG)


def test_make_connector(tmp_path):
    assert isinstance(make_connector("memory"), MemoryConnector)
    assert isinstance(make_connector("file", tmp_path), FileConnector)
    with pytest.raises(ValueError):
        make_connector("file")


keys = st.sampled_from(["a", "b", "c"])


class ConnectorEquivalence(RuleBasedStateMachine):
    """Memory and file connectors agree under any operation sequence, and
    the file connector recovers the same state after reopening."""

    @initialize()
    def setup(self):
        import tempfile
        self.dir = tempfile.mkdtemp(prefix="fogrep-test-")
        self.mem = MemoryConnector()
        self.file = FileConnector(self.dir)
        self.now = 0.0

    def both(self, fn):
        a, b = fn(self.mem), fn(self.file)
        assert a == b
        return a

    @rule(kg=st.sampled_from([KG, KG2]), ttl=st.none() | st.integers(0, 50))
    def register(self, kg, ttl):
        self.both(lambda c: c.register_keygroup(kg, ttl))

    @rule(key=keys, ts=st.integers(0, 9), deleted=st.booleans(), dt=st.integers(0, 20))
    def merge(self, key, ts, deleted, dt):
        self.now += dt
        if not self.mem.has_keygroup(KG):
            return
        r = tombstone(KG, key, ts, "w") if deleted else rec(key, ts)
        self.both(lambda c: c.merge(KG, r, self.now))

    @rule()
    def sweep(self):
        if self.mem.has_keygroup(KG):
            self.both(lambda c: c.sweep_expired(KG, c.ttl(KG), self.now))

    @rule()
    def compact(self):
        if self.mem.has_keygroup(KG):
            self.both(lambda c: c.compact_tombstones(KG, 10.0, self.now))

    @rule(kg=st.sampled_from([KG, KG2]))
    def drop(self, kg):
        self.both(lambda c: c.drop_keygroup(kg))

    @rule(k=keys, v=st.integers())
    def meta(self, k, v):
        self.both(lambda c: c.meta_put(("m", k), v))

    @rule(k=keys)
    def meta_del(self, k):
        self.both(lambda c: c.meta_delete(("m", k)))

    @rule(m=keys)
    def beat(self, m):
        self.both(lambda c: c.membership_heartbeat(m, self.now))

    @rule()
    def reopen(self):
        self.file.close()
        self.file = FileConnector(self.dir)

    @invariant()
    def same_state(self):
        if hasattr(self, "mem"):
            assert state(self.mem) == state(self.file)

    def teardown(self):
        if hasattr(self, "file"):
            self.file.close()


TestConnectorEquivalence = ConnectorEquivalence.TestCase
TestConnectorEquivalence.settings = settings(max_examples=40, stateful_step_count=25, deadline=None)
