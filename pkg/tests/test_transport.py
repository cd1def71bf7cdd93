import pytest
from hypothesis import given
from hypothesis import strategies as st

from fogrep.errors import Timeout, UnknownEndpoint
from fogrep.transport import EventLoop, FaultProfile, Partition, SimBus


def test_loop_orders_by_time_then_schedule_order():
    loop = EventLoop()
    out = []
    loop.call_at(5, out.append, "b")
    loop.call_at(1, out.append, "a")
    loop.call_at(5, out.append, "c")
    h = loop.call_at(3, out.append, "x")
    h.cancel()
    loop.run_until(10)
    assert out == ["a", "b", "c"]
    assert loop.time() == 10


def test_run_while_stops_at_predicate():
    loop = EventLoop()
    hits = []
    for t in range(1, 6):
        loop.call_at(t, hits.append, t)
    assert loop.run_while(lambda: len(hits) < 3, 100)
    assert hits == [1, 2, 3] and loop.time() == 3
    assert not loop.run_while(lambda: True, 50)
    assert loop.time() == 50


def test_reentrant_blocking_call_is_refused():
    loop = EventLoop()
    errors = []

    def nested():
        try:
            loop.run_for(1)
        except RuntimeError as exc:
            errors.append(exc)

    loop.call_later(1, nested)
    loop.run_for(5)
    assert errors


def pubsub(profile, n=200, seed_topic="t"):
    loop = EventLoop()
    bus = SimBus(loop, profile)
    for ep in ("a/m0", "b/m0"):
        bus.register(ep)
    got = []
    bus.subscribe("b/m0", seed_topic, lambda p, s: got.append((loop.time(), p)), source="a/m0")
    for i in range(n):
        loop.call_at(i * 2.0, bus.publish, "a/m0", seed_topic, str(i).encode())
    loop.run_until(n * 2.0 + 1000)
    return bus, got


def test_fixed_delay_is_exact():
    _, got = pubsub(FaultProfile.fixed_delay(20.0), n=10)
    assert [t for t, _ in got] == [i * 2.0 + 20.0 for i in range(10)]


@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
def test_faults_are_deterministic_per_seed(seed, drop, reorder):
    p = FaultProfile(drop_probability=drop, reorder_probability=reorder, delay_ms=(1, 5), rng_seed=seed)
    b1, g1 = pubsub(p, n=30)
    b2, g2 = pubsub(p, n=30)
    assert g1 == g2
    assert b1.trace_digest() == b2.trace_digest()


def test_drop_rate_close_to_configured():
    bus, got = pubsub(FaultProfile(drop_probability=0.2, rng_seed=1), n=2000)
    assert abs(len(got) / 2000 - 0.8) < 0.03
    assert bus.dropped == 2000 - len(got)


def test_reorder_only_delays():
    _, got = pubsub(FaultProfile(reorder_probability=0.5, delay_ms=(1, 1), reorder_extra_ms=30, rng_seed=3), n=100)
    sent = {str(i).encode(): i * 2.0 for i in range(100)}
    assert len(got) == 100
    assert all(1.0 <= t - sent[p] <= 31.0 for t, p in got)
    assert [p for _, p in got] != sorted((p for _, p in got), key=int)


def test_partition_cuts_both_directions_only_in_window():
    part = Partition({"a"}, {"b"}, 100, 200)
    assert part.cuts("a/m0", "b/m1", 150)
    assert part.cuts("b", "a/m0", 100)
    assert not part.cuts("a/m0", "b/m0", 200)
    assert not part.cuts("a/m0", "c/m0", 150)
    _, got = pubsub(FaultProfile(partitions=(Partition({"a"}, {"b"}, 50, 150),)), n=100)
    received = {int(p) for _, p in got}
    # a message is lost if it is sent or would arrive inside the window
    assert received == {i for i in range(100) if not (49 <= i * 2.0 < 150)}


def test_request_reply_and_timeout():
    loop = EventLoop()
    bus = SimBus(loop, FaultProfile.fixed_delay(5))
    for ep in ("c", "s", "dead"):
        bus.register(ep)
    bus.serve("s", lambda payload, respond, sender: respond(payload.upper()))
    assert bus.request("c", "s", b"hi", timeout=100) == b"HI"
    assert loop.time() == 10
    with pytest.raises(Timeout):
        bus.request("c", "dead", b"hi", timeout=50)
    bus.set_down("s")
    with pytest.raises(Timeout):
        bus.request("c", "s", b"hi", timeout=50)
    with pytest.raises(UnknownEndpoint):
        bus.request("c", "nowhere", b"hi", timeout=50)


def test_late_reply_after_timeout_is_ignored():
    loop = EventLoop()
    bus = SimBus(loop, FaultProfile.fixed_delay(30))
    bus.register("c")
    bus.register("s")
    bus.serve("s", lambda payload, respond, sender: respond(b"late"))
    calls = []
    bus.request_async("c", "s", b"", 40, lambda r, e: calls.append((r, e)))
    loop.run_for(200)
    assert len(calls) == 1 and calls[0][0] is None and isinstance(calls[0][1], Timeout)


def test_unsubscribe_stops_delivery():
    loop = EventLoop()
    bus = SimBus(loop)
    bus.register("a")
    bus.register("b")
    got = []
    sub = bus.subscribe("b", "t", lambda p, s: got.append(p))
    bus.publish("a", "t", b"1")
    bus.unsubscribe(sub)
    loop.run_for(10)
    assert got == []


def test_profile_validation():
    with pytest.raises(ValueError):
        FaultProfile(drop_probability=1.5)
    with pytest.raises(ValueError):
        FaultProfile(delay_ms=(5, 1))
    with pytest.raises(ValueError):
        Partition({"a"}, {"b"}, 10, 5)
