import base64
import io
import itertools
import json
import os
import random
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from transport_sim import (
    AuthenticationError,
    FlowEvent,
    HandshakeError,
    NatBox,
    NatKind,
    Path,
    PathFailureError,
    PathKind,
    ReplayError,
    SessionKeys,
    SimNetwork,
    StunTimeoutError,
    TraceFormatError,
    UnknownEndpointError,
    handshake_finish,
    handshake_initiate,
    handshake_respond,
    handshake_verify,
    iter_events,
    seal,
    sealed_length,
    unseal,
)


def network(nat_a='none', nat_b='none', **kwargs):
    net = SimNetwork(seed=1, **kwargs)
    net.add_endpoint('rv', 'none', role='rendezvous')
    net.add_endpoint('stun', 'none', role='stun')
    net.add_endpoint('turn', 'none', role='turn')
    net.add_endpoint('A', nat_a)
    net.add_endpoint('B', nat_b)
    return net


def session_pair():
    keys = SessionKeys(bytes(range(32)), 'initiator'), SessionKeys(bytes(range(32)), 'responder')
    return keys


def test_stun_bind_without_nat_returns_private_address():
    net = network()
    assert net.stun_bind('A', 'stun') == net.endpoints['A'].private_address
    kinds = [(e.src, e.dst, e.kind) for e in net.events]
    assert kinds == [('A', 'stun', 'stun_bind'), ('stun', 'A', 'stun_confirm')]


def test_full_cone_reuses_binding():
    net = network('full_cone')
    first = net.stun_bind('A', 'stun')
    assert net.stun_bind('A', 'stun') == first
    assert net.stun_bind('A', 'turn') == first
    assert first != net.endpoints['A'].private_address


def test_symmetric_allocates_per_destination():
    net = network('symmetric')
    one = net.stun_bind('A', 'stun')
    two = net.stun_bind('A', 'turn')
    assert one[1] != two[1]
    assert len(net.endpoints['A'].nat.table) == 2


def test_nat_box_table():
    box = NatBox('symmetric', '203.0.0.9')
    assert box.map(('10.0.0.2', 5000), ('1.1.1.1', 3478)) == ('203.0.0.9', 40000)
    assert box.map(('10.0.0.2', 5000), ('1.1.1.1', 3478)) == ('203.0.0.9', 40000)
    assert box.map(('10.0.0.2', 5000), ('2.2.2.2', 3478)) == ('203.0.0.9', 40001)
    assert not box.admits_inbound
    assert NatBox('full_cone', 'x').admits_inbound


def test_unreachable_stun_server_times_out():
    net = network()
    net.set_reachable('stun', False)
    with pytest.raises(StunTimeoutError):
        net.stun_bind('A', 'stun')
    assert sum(1 for e in net.events if e.kind == 'stun_bind') == 3
    assert not any(e.kind == 'stun_confirm' for e in net.events)


def test_unknown_endpoint():
    net = network()
    with pytest.raises(UnknownEndpointError):
        net.stun_bind('Z', 'stun')
    with pytest.raises(UnknownEndpointError):
        net.add_endpoint('A')


KINDS = ['none', 'full_cone', 'symmetric']


@pytest.mark.parametrize("nat_a,nat_b", list(itertools.product(KINDS, KINDS)))
def test_path_kind_matrix(nat_a, nat_b):
    net = network(nat_a, nat_b)
    path = net.establish_path('A', 'B', 'stun', 'turn')
    relayed = nat_a == 'symmetric' and nat_b == 'symmetric'
    assert path.kind is (PathKind.RELAYED if relayed else PathKind.DIRECT)
    assert (path.relay == 'turn') is relayed


def test_symmetric_pair_without_relay_fails():
    net = network('symmetric', 'symmetric')
    with pytest.raises(PathFailureError):
        net.establish_path('A', 'B', 'stun')


def test_signaling_goes_through_rendezvous():
    net = network('full_cone', 'full_cone')
    net.establish_path('A', 'B', 'stun')
    signals = [(e.src, e.dst, e.meta) for e in net.events if e.kind == 'signal']
    assert signals == [('A', 'rv', 'offer'), ('rv', 'B', 'offer'), ('B', 'rv', 'answer'), ('rv', 'A', 'answer')]


def test_path_invariants():
    with pytest.raises(ValueError):
        Path(1, PathKind.RELAYED, ('A', 'B'), None, 0)
    with pytest.raises(ValueError):
        Path(1, PathKind.DIRECT, ('A', 'B'), 'turn', 0)
    path = Path(1, PathKind.RELAYED, ('A', 'B'), 'turn', 0)
    assert path.hops('B') == [('B', 'turn'), ('turn', 'A')]


@pytest.mark.parametrize("elapsed,interval,pairs", [(60000, 200, 300), (0, 200, 0), (1000, 500, 2), (199, 200, 0)])
def test_keepalive_tick_counts(elapsed, interval, pairs):
    net = network()
    path = net.establish_path('A', 'B', 'stun', keepalive_interval_ms=interval)
    emitted = net.keepalive_tick(path, path.last_keepalive_ms + elapsed)
    assert len(emitted) == 2 * pairs
    assert all(e.src in ('A', 'B') and e.dst in ('A', 'B') for e in emitted)


def test_keepalive_cadence_over_window():
    net = network()
    path = net.establish_path('A', 'B', 'stun')
    start = net.now_ms
    net.advance(10000)
    binds = [e for e in net.events if e.kind == 'stun_bind' and e.ts_ms > start and e.src == 'A' and e.dst == 'B']
    assert len(binds) == 50
    net.close_path(path)
    before = len(net.events)
    net.advance(5000)
    assert len(net.events) == before


def test_relayed_keepalives_go_to_relay():
    net = network('symmetric', 'symmetric')
    path = net.establish_path('A', 'B', 'stun', 'turn')
    emitted = net.keepalive_tick(path, path.last_keepalive_ms + 1000)
    assert {(e.src, e.dst) for e in emitted} == {('A', 'turn'), ('turn', 'A')}


def test_handshake_agrees_and_hides_keys():
    net = network('full_cone', 'none')
    path = net.establish_path('A', 'B', 'stun')
    keys_a, keys_b = net.handshake(path, random.Random(1), random.Random(2))
    assert keys_a.shared_secret == keys_b.shared_secret
    assert keys_a.send_key == keys_b.recv_key
    assert (keys_a.send_counter, keys_b.recv_counter) == (0, 0)
    handshakes = [e for e in net.events if e.kind == 'handshake']
    assert len(handshakes) == 3
    secret_hex = keys_a.shared_secret.hex()
    for event in net.events:
        assert event.meta is None or secret_hex not in event.meta
        assert event.payload is None


@pytest.mark.parametrize("message", [0, 1, 2])
def test_tampered_handshake_fails(message):
    net = network()
    path = net.establish_path('A', 'B', 'stun')
    with pytest.raises(HandshakeError):
        net.handshake(path, random.Random(1), random.Random(2), tamper_message=message)


def test_handshake_lost_beyond_retries():
    net = network()
    path = net.establish_path('A', 'B', 'stun')
    net.set_link('A', 'B', loss=0.999999)
    with pytest.raises(HandshakeError):
        net.handshake(path)


def test_handshake_functions_directly():
    private, hello = handshake_initiate(random.Random(3))
    keys_b, reply = handshake_respond(hello, random.Random(4))
    keys_a, confirm = handshake_finish(private, hello, reply)
    handshake_verify(keys_b, hello, reply, confirm)
    assert keys_a.shared_secret == keys_b.shared_secret
    with pytest.raises(HandshakeError):
        handshake_verify(keys_b, hello, reply, bytes(32))


@pytest.mark.parametrize("message", [b"", b"x", bytes(1024 * 1024)])
def test_seal_roundtrip(message):
    a, b = session_pair()
    frame = seal(a, message)
    assert len(frame) == sealed_length(len(message))
    assert unseal(b, frame) == message


def test_every_bit_flip_rejected():
    a, b = session_pair()
    frame = seal(a, b"attack at dawn")
    for i in range(len(frame) * 8):
        corrupted = bytearray(frame)
        corrupted[i // 8] ^= 1 << (i % 8)
        with pytest.raises(AuthenticationError):
            unseal(SessionKeys(bytes(range(32)), 'responder'), bytes(corrupted))


def test_replay_rejected_and_counters_advance():
    a, b = session_pair()
    first, second = seal(a, b"1"), seal(a, b"2")
    assert first[:8] != second[:8]
    assert unseal(b, first) == b"1"
    with pytest.raises(ReplayError):
        unseal(b, first)
    assert unseal(b, second) == b"2"
    assert (a.send_counter, b.recv_counter) == (2, 2)


def test_wrong_direction_key_rejected():
    a, _ = session_pair()
    frame = seal(a, b"hello")
    with pytest.raises(AuthenticationError):
        unseal(SessionKeys(bytes(range(32)), 'initiator'), frame)


def test_session_keys_validation():
    with pytest.raises(ValueError):
        SessionKeys(bytes(31), 'initiator')
    with pytest.raises(ValueError):
        SessionKeys(bytes(32), 'observer')


def test_data_events_follow_path_hops():
    for kinds, relayed in ((('none', 'none'), False), (('symmetric', 'symmetric'), True)):
        net = network(*kinds)
        path = net.establish_path('A', 'B', 'stun', 'turn')
        a, b = net.handshake(path)
        assert net.send_frame(path, 'A', seal(a, b"chunk"))
        data = [e for e in net.events if e.kind == 'data']
        if relayed:
            assert [(e.src, e.dst) for e in data] == [('A', 'turn'), ('turn', 'B')]
        else:
            assert [(e.src, e.dst) for e in data] == [('A', 'B')]


def test_http_and_cleartext_events():
    net = network()
    net.http_request('A', 'rv', 'GET', '/get.php?key=103223658539867')
    count = net.send_cleartext('rv', 'A', b"0123456789", 4)
    assert count == 3
    events = net.events
    assert (events[0].kind, events[0].meta) == ('http_get', 'GET /get.php?key=103223658539867')
    assert [e.meta for e in events[1:]] == ['offset=0', 'offset=4', 'offset=8']
    assert b"".join(base64.b64decode(e.payload) for e in events[1:]) == b"0123456789"
    assert net.send_cleartext('rv', 'A', b"", 4) == 1
    assert net.events[-1].len == 0


def test_trace_is_sorted_ndjson_and_deterministic():
    def run():
        net = network('full_cone', 'full_cone', loss=0.05)
        net.establish_path('A', 'B', 'stun')
        net.advance(2000)
        buf = io.StringIO()
        net.write_trace(buf)
        return buf.getvalue()

    first, second = run(), run()
    assert first == second
    lines = first.splitlines()
    ts = [json.loads(line)['ts_ms'] for line in lines]
    assert ts == sorted(ts)
    assert [e.to_json() for e in iter_events(lines)] == lines


def test_flow_event_validation():
    good = {'ts_ms': 1, 'src': 'A', 'dst': 'B', 'transport': 'udp', 'kind': 'data', 'len': 3, 'meta': None}
    assert FlowEvent.from_dict(good).to_dict() == good
    for change in ({'ts_ms': -1}, {'transport': 'sctp'}, {'kind': 'ping'}, {'src': ''}, {'extra': 1},
                   {'len': True}, {'meta': 5}):
        with pytest.raises(TraceFormatError):
            FlowEvent.from_dict({**good, **change})
    with pytest.raises(TraceFormatError):
        FlowEvent.from_dict({k: v for k, v in good.items() if k != 'len'})


def test_summary():
    net = network()
    net.stun_bind('A', 'stun')
    summary = net.summary()
    assert summary['events'] == 2
    assert summary['flows'] == 1
    assert summary['duration_ms'] == 40
