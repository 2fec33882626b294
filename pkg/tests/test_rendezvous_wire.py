import os
import random
import socket
import struct
import sys
import threading

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from rendezvous_core import (
    FileDescriptor,
    RefusalReason,
    RelayRefusedError,
    Rendezvous,
    SharePolicy,
    TokenStatus,
)
from rendezvous_wire import (
    ConnectionClosedError,
    FrameError,
    FrameType,
    RemoteError,
    RendezvousClient,
    WireError,
    b64decode,
    decode_payload,
    dispatch,
    encode_frame,
    read_frame,
    start_background_server,
    write_frame,
)


@pytest.fixture
def server():
    service = Rendezvous(host='127.0.0.1', rng=random.Random(7), verbose=False)
    srv = start_background_server(service, '127.0.0.1', 0)
    yield srv
    srv.shutdown()
    srv.server_close()


@pytest.fixture
def client(server):
    host, port = server.server_address[:2]
    with RendezvousClient(host, port, timeout=5) as c:
        yield c


def test_frame_layout():
    frame = encode_frame(FrameType.RESOLVE, {"token": "di33x", "a": 1})
    body = b'{"a":1,"token":"di33x"}'
    assert frame == struct.pack(">IB", len(body), 0x02) + body


def test_type_bytes_are_stable():
    assert [int(t) for t in (FrameType.REGISTER, FrameType.RESOLVE, FrameType.CONSUME, FrameType.STATUS,
                             FrameType.JOIN_SWARM, FrameType.RELAY_PUT, FrameType.RELAY_GET,
                             FrameType.ERROR)] == [1, 2, 3, 4, 5, 6, 7, 0x7F]


@pytest.mark.parametrize("body", [b"not json", b"[1, 2]", b"\xff\xfe"])
def test_decode_payload_rejects_non_objects(body):
    with pytest.raises(FrameError):
        decode_payload(body)


def test_b64decode_rejects_garbage():
    with pytest.raises(FrameError):
        b64decode("***")


def test_read_and_write_over_socketpair():
    a, b = socket.socketpair()
    try:
        write_frame(a, FrameType.STATUS, {"token": "abcde"})
        assert read_frame(b) == (FrameType.STATUS, {"token": "abcde"})
        a.close()
        with pytest.raises(ConnectionClosedError):
            read_frame(b)
    finally:
        b.close()


def test_dispatch_unknown_type():
    service = Rendezvous(verbose=False)
    with pytest.raises(FrameError):
        dispatch(service, 0x55, {})
    with pytest.raises(FrameError, match="token"):
        dispatch(service, FrameType.RESOLVE, {})


def test_register_resolve_consume_over_wire(client, server):
    d = FileDescriptor.from_content("photo.jpg", b"bytes")
    token, url = client.register_share(d, mode='relay')
    assert url == f"http://127.0.0.1/{token}"
    result = client.resolve_token(token)
    assert result.status is TokenStatus.UPLOAD_WAITING
    assert result.descriptor == d
    grant = client.consume_download(token)
    assert grant.granted and grant.descriptor == d
    refusal = client.consume_download(token)
    assert refusal.reason is RefusalReason.EXHAUSTED
    assert client.poll_status(token) is TokenStatus.EXHAUSTED
    assert client.notify_complete(token) == 1
    assert client.transfer_completions(token) == 1


def test_relay_over_wire(client):
    content = b"\x00\x01 relay bytes"
    token, _ = client.register_share(FileDescriptor.from_content("a.bin", content), SharePolicy(1000, 1), 'relay')
    client.relay_put("103223658539867", content, owner_token=token)
    assert client.resolve_token(token).relay_key == "103223658539867"
    assert client.relay_get("103223658539867") == content
    with pytest.raises(RelayRefusedError) as excinfo:
        client.relay_get("103223658539867")
    assert excinfo.value.reason is RefusalReason.UNKNOWN
    assert excinfo.value.exit_code == 2


def test_swarm_over_wire(client):
    swarm = "a" * 32
    assert client.join_swarm(swarm, "A", [True, True], ["00", "11"]) == []
    members = client.join_swarm(swarm, "C", "00")
    assert [(m.endpoint, m.availability) for m in members] == [("A", (True, True))]
    assert client.swarm_chunk_digests(swarm) == ["00", "11"]
    assert {m.endpoint for m in client.swarm_members(swarm)} == {"A", "C"}
    assert client.leave_swarm(swarm, "C")


def test_server_errors_become_remote_errors(client):
    with pytest.raises(RemoteError) as excinfo:
        client.join_swarm("b" * 32, "A", "1")
        client.join_swarm("b" * 32, "C", "11")
    assert excinfo.value.exit_code == 5
    # connection stays usable after an ERROR reply
    assert client.poll_status("zzzzz") is TokenStatus.UNKNOWN


def test_mark_ready_over_wire(client):
    token, _ = client.register_share(FileDescriptor.from_content("x", b"x"))
    assert client.mark_ready(token) is TokenStatus.READY


def test_concurrent_clients_share_one_grant(server):
    host, port = server.server_address[:2]
    with RendezvousClient(host, port) as c:
        token, _ = c.register_share(FileDescriptor.from_content("x", b"x"))
    results = []

    def worker():
        with RendezvousClient(host, port) as c:
            results.append(c.consume_download(token).granted)

    threads = [threading.Thread(target=worker) for _ in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results.count(True) == 1
    assert len(results) == 20


def test_oversized_frame_header_rejected(server):
    host, port = server.server_address[:2]
    sock = socket.create_connection((host, port))
    try:
        sock.sendall(struct.pack(">IB", 0xFFFFFFFF, FrameType.STATUS))
        frame_type, payload = read_frame(sock)
        assert frame_type == FrameType.ERROR
        assert "exceeds" in payload["message"]
    finally:
        sock.close()


def test_unreachable_server():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    with pytest.raises(WireError) as excinfo:
        RendezvousClient("127.0.0.1", port, timeout=1).poll_status("x")
    assert excinfo.value.exit_code == 3


def test_second_server_on_same_port_fails(server):
    host, port = server.server_address[:2]
    with pytest.raises(OSError):
        start_background_server(Rendezvous(verbose=False), host, port)
