import hashlib
import os
import random
import sqlite3
import sys
import threading

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

import rendezvous_core
from covertpipe_utils import EVENT_TABLE_NAME, create_event_schema
from ident_derive import derive_swarm_id, is_valid_short_token, is_valid_slug
from rendezvous_core import (
    CapacityError,
    FileDescriptor,
    Grant,
    InvalidAvailabilityError,
    InvalidDescriptorError,
    Refusal,
    RefusalReason,
    RelayConflictError,
    RelayReadError,
    RelayRefusedError,
    RelayStore,
    Rendezvous,
    ShareMode,
    SharePolicy,
    ShareState,
    TokenStatus,
)

KEY = "103223658539867"


class Clock:
    def __init__(self, now=0):
        self.now = now

    def __call__(self):
        return self.now


def make_service(**kwargs):
    clock = Clock(1000)
    kwargs.setdefault('rng', random.Random(42))
    service = Rendezvous(clock=clock, host='www.justbeamit.com', verbose=False, **kwargs)
    return service, clock


def descriptor(content=b"photo bytes", name="photo.jpg"):
    return FileDescriptor.from_content(name, content)


def test_file_descriptor_from_content():
    d = descriptor(b"abc", "photo.jpg")
    assert (d.name, d.size, d.extension) == ("photo.jpg", 3, "jpg")
    assert d.content_digest == hashlib.sha256(b"abc").digest()
    assert FileDescriptor.from_dict(d.to_dict()) == d
    assert FileDescriptor.from_content("README", b"").extension == ""


@pytest.mark.parametrize("bad", [
    FileDescriptor("", 1, "", bytes(32)),
    FileDescriptor("a", -1, "", bytes(32)),
    FileDescriptor("a", 1, "", bytes(31)),
])
def test_invalid_descriptors_rejected(bad):
    service, _ = make_service()
    with pytest.raises(InvalidDescriptorError):
        service.register_share(bad)


def test_policy_defaults_per_mode():
    assert SharePolicy.for_mode('relay') == SharePolicy(1000, 1)
    assert SharePolicy.for_mode('direct') == SharePolicy(86400, 1)
    with pytest.raises(InvalidDescriptorError):
        SharePolicy(0, 1).validate()


def test_register_relay_share_gets_short_token():
    service, clock = make_service()
    token, url = service.register_share(descriptor(), mode='relay')
    assert is_valid_short_token(token)
    assert url == f"http://www.justbeamit.com/{token}"
    record = service.records[token]
    assert record.policy.ttl_seconds == 1000
    assert record.created_at == clock.now


def test_register_direct_share_gets_slug():
    service, _ = make_service()
    token, _ = service.register_share(descriptor(), mode='direct')
    assert is_valid_slug(token)
    assert service.records[token].policy == SharePolicy(86400, 1)


def test_two_registrations_get_distinct_tokens():
    service, _ = make_service()
    t1, _ = service.register_share(descriptor())
    t2, _ = service.register_share(descriptor())
    assert t1 != t2


def test_register_with_custom_url_host():
    service, _ = make_service()
    token, url = service.register_share(descriptor(), host='abcdefghijklmnop', scheme='onion')
    assert url == f"abcdefghijklmnop.onion/{token}"


def test_token_collisions_exhaust_retries(monkeypatch):
    service, _ = make_service()
    monkeypatch.setattr(rendezvous_core, 'generate_short_token', lambda rng=None: 'aaaaa')
    service.register_share(descriptor(), mode='relay')
    with pytest.raises(CapacityError):
        service.register_share(descriptor(), mode='relay')


def test_resolve_status_lifecycle_and_ttl_boundary():
    service, clock = make_service()
    token, _ = service.register_share(descriptor(), mode='relay')
    result = service.resolve_token(token)
    assert result.status is TokenStatus.UPLOAD_WAITING
    assert result.descriptor.name == "photo.jpg"
    assert service.mark_ready(token) is TokenStatus.READY
    assert service.resolve_token(token, now=clock.now + 999).status is TokenStatus.READY
    assert service.resolve_token(token, now=clock.now + 1000).status is TokenStatus.READY
    assert service.resolve_token(token, now=clock.now + 1001).status is TokenStatus.EXPIRED
    assert service.resolve_token("zzzzz").status is TokenStatus.UNKNOWN
    assert service.poll_status("zzzzz") is TokenStatus.UNKNOWN


def test_direct_share_lives_one_day():
    service, clock = make_service()
    token, _ = service.register_share(descriptor())
    service.mark_ready(token)
    assert service.resolve_token(token, now=clock.now + 86399).status is TokenStatus.READY
    assert service.resolve_token(token, now=clock.now + 86400).status is TokenStatus.READY
    assert service.resolve_token(token, now=clock.now + 86401).status is TokenStatus.EXPIRED
    assert service.consume_download(token, now=clock.now + 86401).reason is RefusalReason.EXPIRED


def test_resolve_and_poll_are_read_only():
    service, clock = make_service()
    token, _ = service.register_share(descriptor(), mode='relay')
    before = service.state_digest()
    service.resolve_token(token, now=clock.now + 5000)
    service.poll_status(token, now=clock.now + 5000)
    service.resolve_token("nope")
    assert service.state_digest() == before


def test_consume_once_then_exhausted():
    service, _ = make_service()
    token, _ = service.register_share(descriptor())
    first = service.consume_download(token)
    assert isinstance(first, Grant) and first.granted
    assert (first.downloads_initiated, first.remaining) == (1, 0)
    second = service.consume_download(token)
    assert isinstance(second, Refusal) and not second.granted
    assert second.reason is RefusalReason.EXHAUSTED
    assert service.poll_status(token) is TokenStatus.EXHAUSTED
    assert service.consume_download("unknown").reason is RefusalReason.UNKNOWN


def test_consume_on_expired_record():
    service, clock = make_service()
    token, _ = service.register_share(descriptor(), mode='relay')
    clock.now += 1001
    assert service.consume_download(token).reason is RefusalReason.EXPIRED
    assert service.records[token].state is ShareState.EXPIRED


def test_expired_wins_over_exhausted():
    service, clock = make_service()
    token, _ = service.register_share(descriptor(), mode='relay')
    service.consume_download(token)
    assert service.poll_status(token) is TokenStatus.EXHAUSTED
    assert service.poll_status(token, now=clock.now + 1001) is TokenStatus.EXPIRED


def test_concurrent_consumes_grant_exactly_max():
    for max_downloads in (1, 2, 3, 5):
        service, _ = make_service()
        token, _ = service.register_share(descriptor(), SharePolicy(60, max_downloads))
        results = []
        barrier = threading.Barrier(100)

        def worker():
            barrier.wait()
            results.append(service.consume_download(token))

        threads = [threading.Thread(target=worker) for _ in range(100)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        grants = [r for r in results if r.granted]
        assert len(grants) == max_downloads
        assert sorted(g.downloads_initiated for g in grants) == list(range(1, max_downloads + 1))
        assert service.records[token].downloads_initiated == max_downloads


def test_expire_sweep_counts_and_is_idempotent():
    service, clock = make_service()
    assert service.expire_sweep() == 0
    relay_token, _ = service.register_share(descriptor(), mode='relay')
    service.register_share(descriptor(), mode='direct')
    clock.now += 1500
    assert service.expire_sweep() == 1
    assert service.expire_sweep() == 0
    assert service.records[relay_token].state is ShareState.EXPIRED


def test_swarm_membership_mesh():
    service, _ = make_service()
    swarm = derive_swarm_id(b"file 1")
    assert service.join_swarm(swarm, "A", "1111") == []
    assert [m.endpoint for m in service.join_swarm(swarm, "C", "0000")] == ["A"]
    members = service.join_swarm(swarm, "D", [False] * 4)
    assert [m.endpoint for m in members] == ["A", "C"]
    assert members[0].availability == (True,) * 4
    assert "B" not in {m.endpoint for m in service.swarm_members(swarm)}


def test_rejoin_replaces_availability():
    service, _ = make_service()
    service.join_swarm("s" * 32, "A", "10")
    service.join_swarm("s" * 32, "A", "11")
    members = service.swarm_members("s" * 32)
    assert len(members) == 1
    assert members[0].to_dict() == {"endpoint": "A", "availability": "11"}


def test_swarm_bitmap_length_fixed_by_first_joiner():
    service, _ = make_service()
    service.join_swarm("s" * 32, "A", "111", ["aa", "bb", "cc"])
    with pytest.raises(InvalidAvailabilityError):
        service.join_swarm("s" * 32, "C", "11")
    with pytest.raises(InvalidAvailabilityError):
        service.join_swarm("s" * 32, "C", "1x1")
    assert service.swarm_chunk_digests("s" * 32) == ["aa", "bb", "cc"]


def test_leave_swarm_drops_empty_swarm():
    service, _ = make_service()
    service.join_swarm("s" * 32, "A", "1")
    assert service.leave_swarm("s" * 32, "A")
    assert not service.leave_swarm("s" * 32, "A")
    assert "s" * 32 not in service.swarms


def staged(service, content=b"relay payload"):
    token, _ = service.register_share(descriptor(content), mode='relay')
    service.relay_put(KEY, content, owner_token=token)
    return token


def test_relay_put_then_get_returns_identical_bytes():
    service, _ = make_service()
    token = staged(service)
    assert service.poll_status(token) is TokenStatus.READY
    assert service.resolve_token(token).relay_key == KEY
    assert service.relay_get(KEY) == b"relay payload"
    assert service.poll_status(token) is TokenStatus.EXHAUSTED
    with pytest.raises(RelayRefusedError) as excinfo:
        service.relay_get(KEY)
    assert excinfo.value.reason is RefusalReason.UNKNOWN


def test_relay_get_unknown_and_expired():
    service, clock = make_service()
    with pytest.raises(RelayRefusedError) as excinfo:
        service.relay_get("999999999999999")
    assert excinfo.value.reason is RefusalReason.UNKNOWN
    staged(service)
    clock.now += 1001
    with pytest.raises(RelayRefusedError) as excinfo:
        service.relay_get(KEY)
    assert excinfo.value.reason is RefusalReason.EXPIRED
    assert KEY not in service.relay.entries


def test_relay_put_conflicts():
    service, _ = make_service()
    token = staged(service)
    with pytest.raises(RelayConflictError):
        service.relay_put(KEY, b"relay payload", owner_token=token)
    other, _ = service.register_share(descriptor(b"x"), mode='relay')
    with pytest.raises(RelayConflictError):
        service.relay_put("003223658539867", b"x", owner_token=other)
    direct, _ = service.register_share(descriptor(b"x"), mode='direct')
    with pytest.raises(RelayConflictError):
        service.relay_put("111111111111111", b"x", owner_token=direct)
    with pytest.raises(InvalidDescriptorError):
        service.relay_put("111111111111111", b"wrong size", owner_token=other)
    with pytest.raises(RelayConflictError):
        service.relay_put("111111111111111\n", b"x", owner_token=other)


def test_relay_blob_shared_by_multiple_grants(tmp_path):
    service, _ = make_service(spill_dir=str(tmp_path))
    token, _ = service.register_share(descriptor(b"abc"), SharePolicy(1000, 2), mode='relay')
    service.relay_put(KEY, b"abc", owner_token=token)
    assert service.relay_get(KEY) == b"abc"
    assert KEY in service.relay.entries
    assert service.relay_get(KEY) == b"abc"
    assert KEY not in service.relay.entries


def test_relay_store_spills_large_blobs(tmp_path):
    store = RelayStore(spill_threshold=4, spill_dir=str(tmp_path))
    small = store.put("100000000000001", "t1", b"abc", 0)
    large = store.put("100000000000002", "t2", b"abcdefgh", 0)
    assert small.path is None
    assert large.blob is None and os.path.exists(large.path)
    assert RelayStore.read(large) == b"abcdefgh"
    store.close()
    assert not os.path.exists(large.path)


def test_relay_spill_through_service(tmp_path):
    config = dict(rendezvous_core.DEFAULT_CONFIG, relay_spill_threshold_bytes=4)
    service, _ = make_service(spill_dir=str(tmp_path), config=config)
    staged(service, b"more than four bytes")
    assert len(os.listdir(tmp_path)) == 1
    assert service.relay_get(KEY) == b"more than four bytes"
    assert os.listdir(tmp_path) == []


def test_spilled_blob_outlives_slower_reader(tmp_path, monkeypatch):
    config = dict(rendezvous_core.DEFAULT_CONFIG, relay_spill_threshold_bytes=4)
    service, _ = make_service(spill_dir=str(tmp_path), config=config)
    content = b"spilled relay payload"
    token, _ = service.register_share(descriptor(content), SharePolicy(1000, 2), mode='relay')
    service.relay_put(KEY, content, owner_token=token)

    real_read = RelayStore.read
    first_reading = threading.Event()
    release = threading.Event()
    calls = []

    def slow_first_read(entry):
        calls.append(entry)
        if len(calls) == 1:
            first_reading.set()
            release.wait(5)
        return real_read(entry)

    monkeypatch.setattr(RelayStore, 'read', staticmethod(slow_first_read))
    results = {}
    slow = threading.Thread(target=lambda: results.setdefault('slow', service.relay_get(KEY)))
    slow.start()
    assert first_reading.wait(5)
    assert service.relay_get(KEY) == content
    assert len(os.listdir(tmp_path)) == 1
    release.set()
    slow.join(5)
    assert results['slow'] == content
    assert os.listdir(tmp_path) == []


def test_missing_spill_file_is_a_relay_error(tmp_path):
    config = dict(rendezvous_core.DEFAULT_CONFIG, relay_spill_threshold_bytes=4)
    service, _ = make_service(spill_dir=str(tmp_path), config=config)
    staged(service, b"more than four bytes")
    for name in os.listdir(tmp_path):
        os.remove(tmp_path / name)
    with pytest.raises(RelayReadError) as excinfo:
        service.relay_get(KEY)
    assert excinfo.value.exit_code == 3


def test_low_memory_spills_even_small_blobs(tmp_path, monkeypatch):
    class FakePsutil:
        @staticmethod
        def virtual_memory():
            class M:
                available = 10
            return M()

    monkeypatch.setattr(rendezvous_core, 'psutil', FakePsutil)
    store = RelayStore(spill_threshold=1024, spill_dir=str(tmp_path))
    assert store.put("100000000000001", "t", b"abcdefgh", 0).path is not None
    store.close()


def test_transfer_completions():
    service, _ = make_service()
    token, _ = service.register_share(descriptor())
    assert service.transfer_completions(token) == 0
    assert service.notify_complete(token) == 1
    assert service.transfer_completions(token) == 1
    assert service.notify_complete("unknown") == 0


def test_events_are_journaled(tmp_path):
    db = tmp_path / "events.db"
    create_event_schema(str(db))
    service, _ = make_service(event_db=str(db))
    token, _ = service.register_share(descriptor())
    service.consume_download(token)
    service.consume_download(token)
    conn = sqlite3.connect(db)
    rows = conn.execute(f"SELECT event_type, token FROM {EVENT_TABLE_NAME} ORDER BY id").fetchall()
    conn.close()
    assert rows == [("SHARE_REGISTERED", token), ("DOWNLOAD_GRANTED", token), ("DOWNLOAD_REFUSED", token)]


def test_verbose_logging_goes_to_stderr(capsys):
    service = Rendezvous(clock=Clock(0), rng=random.Random(1))
    service.register_share(descriptor())
    captured = capsys.readouterr()
    assert captured.out == ""
    assert "[rendezvous] Registered direct share 'photo.jpg'" in captured.err
