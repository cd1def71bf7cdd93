import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fogrep.codec import decode, encode
from fogrep.errors import KeyMismatch, MalformedName
from fogrep.model import (
    DataRecord,
    EntityId,
    KeygroupMetadata,
    ReplicaConfig,
    SecretVersion,
    UpdateMessage,
    merge_all,
    merge_record,
    tombstone,
    validate_keygroup_name,
)

KG = validate_keygroup_name("app.data")


def rec(ts, writer="w", value=b"v", key="k", deleted=False):
    if deleted:
        return tombstone(KG, key, ts, writer)
    return DataRecord(KG, key, {"f": value}, ts, writer)


records = st.builds(
    rec,
    st.integers(0, 5),
    st.sampled_from(["a", "b"]),
    st.sampled_from([b"x", b"y"]),
    deleted=st.booleans(),
)


def lww_oracle(rs):
    # plain max over the documented order key
    return max(rs, key=lambda r: (r.timestamp, r.writer, encode(r)))


@given(records, records)
def test_merge_commutative(a, b):
    assert merge_record(a, b) == merge_record(b, a)


@given(records, records, records)
def test_merge_associative(a, b, c):
    assert merge_record(merge_record(a, b), c) == merge_record(a, merge_record(b, c))


@given(records)
def test_merge_idempotent(a):
    assert merge_record(a, a) == a
    assert merge_record(None, a) == a


@given(st.lists(records, min_size=1, max_size=6))
def test_merge_all_matches_oracle(rs):
    assert merge_all(rs) == lww_oracle(rs)


@given(st.lists(records, min_size=1, max_size=6), st.randoms())
def test_merge_all_order_free(rs, rnd):
    shuffled = list(rs)
    rnd.shuffle(shuffled)
    assert merge_all(shuffled) == merge_all(rs)


def test_exhaustive_permutations_of_six():
    rs = [rec(1, "a"), rec(3, "a", b"y"), rec(3, "b"), rec(2, "a", deleted=True),
          rec(3, "b", b"y"), rec(0, "b")]
    expected = lww_oracle(rs)
    results = {encode(merge_all(p)) for p in itertools.permutations(rs)}
    assert results == {encode(expected)}


def test_higher_timestamp_wins_over_writer():
    assert merge_record(rec(2, "a"), rec(1, "z")).timestamp == 2
    assert merge_record(rec(1, "a"), rec(1, "b")).writer == "b"


def test_later_delete_wins():
    assert merge_record(rec(1), rec(2, deleted=True)).deleted


def test_merge_rejects_other_key():
    with pytest.raises(KeyMismatch):
        merge_record(rec(1), rec(1, key="other"))


@pytest.mark.parametrize("name", ["a", "a..b", "a.b c", "", "a." + "x" * 129, ".a"])
def test_bad_keygroup_names(name):
    with pytest.raises(MalformedName):
        validate_keygroup_name(name)


def test_keygroup_name_round_trip():
    kg = validate_keygroup_name("app.tenant.data")
    assert str(kg) == "app.tenant.data"
    assert decode(encode(kg)) == kg


def test_entity_ids():
    assert str(EntityId("node", "edge-1")) == "node:edge-1"
    with pytest.raises(ValueError):
        EntityId("robot", "x")
    with pytest.raises(MalformedName):
        EntityId("node", "bad name")


def test_tombstones_carry_no_fields():
    with pytest.raises(ValueError):
        DataRecord(KG, "k", {"f": b"x"}, 1, "w", deleted=True)


def test_fields_must_be_bytes():
    with pytest.raises(ValueError):
        DataRecord(KG, "k", {"f": "text"}, 1, "w")


def test_record_immutable_and_encodable():
    r = rec(5)
    with pytest.raises(TypeError):
        r.fields["g"] = b"y"
    assert decode(encode(r)) == r


def test_metadata_membership():
    meta = KeygroupMetadata(KG, 1, {"a": ReplicaConfig(), "b": ReplicaConfig(500)},
                            {"t"}, {"app"}, SecretVersion(1, bytes(16)))
    assert meta.members == {"a", "b", "t"}
    assert meta.ttl_of("b") == 500 and meta.ttl_of("a") is None and meta.ttl_of("t") is None
    assert meta.without_secret().secret.key == bytes(16)
    assert decode(encode(meta)) == meta


def test_replica_config_rejects_negative_ttl():
    with pytest.raises(ValueError):
        ReplicaConfig(-1)


def test_secret_validation():
    with pytest.raises(ValueError):
        SecretVersion(0, bytes(16))
    with pytest.raises(ValueError):
        SecretVersion(1, bytes(8))


def test_update_counter_starts_at_one():
    with pytest.raises(ValueError):
        UpdateMessage("a", KG, 0, b"", 1)
