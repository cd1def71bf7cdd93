import socket
import struct
import threading

import pytest

from fogrep.codec import encode
from fogrep.errors import DecodeError, Timeout, UnknownEndpoint
from fogrep.netbus import MAX_FRAME, RealClock, SocketBus, read_frame, write_frame
from fogrep.transport import Envelope


def test_frame_layout_and_round_trip():
    a, b = socket.socketpair()
    env = Envelope("req", "x", "", 7, b"body")
    write_frame(a, env)
    raw = encode(env)
    assert read_frame(b) == env
    a.sendall(struct.pack(">I", len(raw)) + raw)
    assert read_frame(b) == env
    a.close()
    assert read_frame(b) is None


def test_oversized_frame_rejected():
    a, b = socket.socketpair()
    a.sendall(struct.pack(">I", MAX_FRAME + 1))
    with pytest.raises(DecodeError):
        read_frame(b)


@pytest.fixture
def bus():
    b = SocketBus(RealClock())
    yield b
    b.close()


def test_request_response(bus):
    bus.register("srv")
    bus.serve("srv", lambda payload, respond, sender: respond(payload[::-1] + sender.encode()))
    assert bus.request("cli", "srv", b"abc", 2000) == b"cbacli"
    host, port = bus.address("srv")
    assert bus.request("cli", f"{host}:{port}", b"x", 2000) == b"xcli"
    with pytest.raises(UnknownEndpoint):
        bus.address("nowhere")


def test_request_to_closed_port_times_out(bus):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(Timeout):
        bus.request("cli", f"127.0.0.1:{port}", b"x", 500)


def test_async_callback_runs_under_clock_lock(bus):
    bus.register("srv")
    bus.serve("srv", lambda payload, respond, sender: respond(b"ok"))
    done = threading.Event()
    seen = []

    def cb(resp, err):
        seen.append((resp, err, bus.clock.lock._is_owned()))
        done.set()

    bus.request_async("cli", "srv", b"", 2000, cb)
    assert done.wait(5)
    assert seen == [(b"ok", None, True)]


def test_pubsub_across_endpoints(bus):
    bus.register("pub")
    bus.register("sub")
    got = []
    arrived = threading.Event()

    def handler(payload, sender):
        got.append((payload, sender))
        if len(got) == 3:
            arrived.set()

    bus.subscribe("sub", "topic", handler, source="pub")
    assert bus.clock.run_while(lambda: not bus.subscribers.get(("pub", "topic")), bus.clock.time() + 5000)
    for i in range(3):
        bus.publish("pub", "topic", str(i).encode())
    assert arrived.wait(5)
    assert sorted(got) == [(b"0", "pub"), (b"1", "pub"), (b"2", "pub")]
