#!/usr/bin/env python3
"""
Rendezvous service: share registration, one-time token resolution and
consumption, expiry sweeping, swarm peer matching and the cleartext relay
blob store.

All public methods are atomic with respect to each other. The registry lock is
never held while a spilled relay blob is read from disk.
"""
import hashlib
import os
import random
import shutil
import tempfile
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

try:
    import psutil
except ImportError:
    psutil = None

from covertpipe_utils import (
    CovertPipeError,
    DEFAULT_CONFIG,
    EXIT_BAD_INPUT,
    EXIT_INVALID_TOKEN,
    EXIT_NETWORK,
    canonical_json,
    log,
    log_service_event,
)
from ident_derive import (
    SWARM_ID_LENGTH,
    compose_share_url,
    derive_dir_name,
    derive_slug,
    generate_short_token,
    is_valid_relay_key,
    new_entropy_seed,
    DIR_SEED_BYTES,
)

# --- Configuration ---
COMPONENT_ID = 'rendezvous'
TOKEN_RETRIES = 8
DIGEST_BYTES = 32
LOW_MEMORY_FACTOR = 2
# --- End Configuration ---


class ShareMode(str, Enum):
    DIRECT = 'direct'
    RELAY = 'relay'


class ShareState(str, Enum):
    ACTIVE = 'active'
    EXHAUSTED = 'exhausted'
    EXPIRED = 'expired'


class TokenStatus(str, Enum):
    UPLOAD_WAITING = 'upload_waiting'
    READY = 'ready'
    EXHAUSTED = 'exhausted'
    EXPIRED = 'expired'
    UNKNOWN = 'unknown'


class RefusalReason(str, Enum):
    EXHAUSTED = 'exhausted'
    EXPIRED = 'expired'
    UNKNOWN = 'unknown'


class RendezvousError(CovertPipeError):
    exit_code = EXIT_BAD_INPUT


class InvalidDescriptorError(RendezvousError):
    pass


class CapacityError(RendezvousError):
    exit_code = EXIT_NETWORK


class InvalidAvailabilityError(RendezvousError):
    pass


class RelayConflictError(RendezvousError):
    pass


class RelayReadError(RendezvousError):
    exit_code = EXIT_NETWORK


class RelayRefusedError(RendezvousError):
    """relay_get refused; ``reason`` is a RefusalReason."""
    exit_code = EXIT_INVALID_TOKEN

    def __init__(self, reason: 'RefusalReason', key: str):
        super().__init__(f"Relay key {key} refused: {reason.value}")
        self.reason = reason
        self.key = key


@dataclass(frozen=True)
class FileDescriptor:
    name: str
    size: int
    extension: str
    content_digest: bytes

    def validate(self) -> None:
        if not self.name:
            raise InvalidDescriptorError("File descriptor needs a name")
        if isinstance(self.size, bool) or not isinstance(self.size, int) or self.size < 0:
            raise InvalidDescriptorError(f"File size must be a non-negative integer, got {self.size!r}")
        if not isinstance(self.content_digest, (bytes, bytearray)) or len(self.content_digest) != DIGEST_BYTES:
            raise InvalidDescriptorError("Content digest must be 32 bytes")

    @classmethod
    def from_content(cls, name: str, content: bytes) -> 'FileDescriptor':
        _, dot, ext = name.rpartition('.')
        return cls(
            name=name,
            size=len(content),
            extension=ext if dot else '',
            content_digest=hashlib.sha256(content).digest(),
        )

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'size': self.size,
            'extension': self.extension,
            'content_digest': self.content_digest.hex(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'FileDescriptor':
        try:
            return cls(
                name=data['name'],
                size=data['size'],
                extension=data.get('extension', ''),
                content_digest=bytes.fromhex(data['content_digest']),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidDescriptorError(f"Malformed file descriptor: {e}")


@dataclass(frozen=True)
class SharePolicy:
    ttl_seconds: int
    max_downloads: int

    def validate(self) -> None:
        for name in ('ttl_seconds', 'max_downloads'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise InvalidDescriptorError(f"Share policy {name} must be a positive integer")

    @classmethod
    def for_mode(cls, mode: Union['ShareMode', str], config: Optional[dict] = None) -> 'SharePolicy':
        config = config or DEFAULT_CONFIG
        mode = ShareMode(mode)
        ttl = config['relay_ttl_seconds'] if mode is ShareMode.RELAY else config['direct_ttl_seconds']
        return cls(ttl_seconds=ttl, max_downloads=config['max_downloads'])

    def to_dict(self) -> dict:
        return {'ttl_seconds': self.ttl_seconds, 'max_downloads': self.max_downloads}


@dataclass
class ShareRecord:
    token: str
    descriptor: FileDescriptor
    policy: SharePolicy
    created_at: int
    mode: ShareMode
    downloads_initiated: int = 0
    state: ShareState = ShareState.ACTIVE
    swarm_id: Optional[str] = None
    relay_key: Optional[str] = None
    relay_host: Optional[str] = None
    ready: bool = False
    completions: int = 0

    @property
    def deadline(self) -> int:
        return self.created_at + self.policy.ttl_seconds

    def effective_state(self, now: int) -> ShareState:
        # expired wins over exhausted
        if now > self.deadline:
            return ShareState.EXPIRED
        if self.state is ShareState.EXPIRED:
            return ShareState.EXPIRED
        if self.downloads_initiated >= self.policy.max_downloads:
            return ShareState.EXHAUSTED
        return ShareState.ACTIVE

    def to_dict(self) -> dict:
        return {
            'token': self.token,
            'descriptor': self.descriptor.to_dict(),
            'policy': self.policy.to_dict(),
            'created_at': self.created_at,
            'mode': self.mode.value,
            'downloads_initiated': self.downloads_initiated,
            'state': self.state.value,
            'swarm_id': self.swarm_id,
            'relay_key': self.relay_key,
            'relay_host': self.relay_host,
            'ready': self.ready,
            'completions': self.completions,
        }


@dataclass(frozen=True)
class Grant:
    token: str
    downloads_initiated: int
    remaining: int
    descriptor: FileDescriptor

    granted = True


@dataclass(frozen=True)
class Refusal:
    token: str
    reason: RefusalReason

    granted = False


@dataclass(frozen=True)
class ResolveResult:
    status: TokenStatus
    descriptor: Optional[FileDescriptor] = None
    mode: Optional[ShareMode] = None
    swarm_id: Optional[str] = None
    relay_host: Optional[str] = None
    relay_key: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            'status': self.status.value,
            'descriptor': self.descriptor.to_dict() if self.descriptor else None,
            'mode': self.mode.value if self.mode else None,
            'swarm_id': self.swarm_id,
            'relay_host': self.relay_host,
            'relay_key': self.relay_key,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ResolveResult':
        desc = data.get('descriptor')
        mode = data.get('mode')
        return cls(
            status=TokenStatus(data['status']),
            descriptor=FileDescriptor.from_dict(desc) if desc else None,
            mode=ShareMode(mode) if mode else None,
            swarm_id=data.get('swarm_id'),
            relay_host=data.get('relay_host'),
            relay_key=data.get('relay_key'),
        )


@dataclass(frozen=True)
class SwarmMember:
    endpoint: str
    availability: Tuple[bool, ...]

    def to_dict(self) -> dict:
        return {'endpoint': self.endpoint, 'availability': bitmap_to_text(self.availability)}


@dataclass
class _Swarm:
    chunk_count: int
    members: Dict[str, Tuple[bool, ...]] = field(default_factory=dict)
    chunk_digests: Optional[List[str]] = None


def bitmap_to_text(bits: Sequence[bool]) -> str:
    return ''.join('1' if b else '0' for b in bits)


def normalize_availability(availability: Union[str, Sequence[bool]]) -> Tuple[bool, ...]:
    if isinstance(availability, str):
        if any(ch not in '01' for ch in availability):
            raise InvalidAvailabilityError("Availability text may only contain '0' and '1'")
        return tuple(ch == '1' for ch in availability)
    return tuple(bool(b) for b in availability)


@dataclass
class _RelayEntry:
    owner_token: str
    created_at: int
    size: int
    blob: Optional[bytes] = None
    path: Optional[str] = None
    readers: int = 0
    retired: bool = False


class RelayStore:
    """
    Staged relay blobs keyed by relay key.

    Blobs above ``spill_threshold`` bytes, or larger than half the available
    memory when psutil is installed, are written to a private temp directory.
    """

    def __init__(self, spill_threshold: int = DEFAULT_CONFIG['relay_spill_threshold_bytes'],
                 spill_dir: Optional[str] = None):
        self.spill_threshold = spill_threshold
        self._spill_dir = spill_dir
        self._owns_spill_dir = spill_dir is None
        self.entries: Dict[str, _RelayEntry] = {}

    def _should_spill(self, size: int) -> bool:
        if size > self.spill_threshold:
            return True
        if psutil is not None and size > 0:
            try:
                return psutil.virtual_memory().available < LOW_MEMORY_FACTOR * size
            except Exception:
                return False
        return False

    def _spill_path(self) -> str:
        if self._spill_dir is None:
            self._spill_dir = tempfile.mkdtemp(prefix='covertpipe-relay-')
        os.makedirs(self._spill_dir, exist_ok=True)
        while True:
            path = os.path.join(self._spill_dir, derive_dir_name(new_entropy_seed(DIR_SEED_BYTES)))
            if not os.path.exists(path):
                return path

    def put(self, key: str, owner_token: str, blob: bytes, now: int) -> _RelayEntry:
        entry = _RelayEntry(owner_token=owner_token, created_at=now, size=len(blob))
        if self._should_spill(len(blob)):
            entry.path = self._spill_path()
            with open(entry.path, 'wb') as f:
                f.write(blob)
        else:
            entry.blob = bytes(blob)
        self.entries[key] = entry
        return entry

    @staticmethod
    def read(entry: _RelayEntry) -> bytes:
        if entry.blob is not None:
            return entry.blob
        with open(entry.path, 'rb') as f:
            return f.read()

    def discard(self, key: str) -> Optional[_RelayEntry]:
        entry = self.entries.pop(key, None)
        if entry is not None:
            entry.retired = True
        return entry

    @staticmethod
    def unlink(entry: Optional[_RelayEntry]) -> None:
        """Remove a spilled file unless a reader still holds it; the last reader removes it then."""
        if entry is not None and entry.path and entry.readers == 0:
            try:
                os.remove(entry.path)
            except OSError:
                pass

    def close(self) -> None:
        for key in list(self.entries):
            self.unlink(self.discard(key))
        if self._owns_spill_dir and self._spill_dir and os.path.isdir(self._spill_dir):
            shutil.rmtree(self._spill_dir, ignore_errors=True)


class Rendezvous:
    """The shared coordination service. Clock is logical seconds."""

    def __init__(
        self,
        clock: Optional[Callable[[], int]] = None,
        host: str = 'rendezvous.local',
        scheme: str = 'http',
        port: Optional[int] = None,
        relay_host: Optional[str] = None,
        config: Optional[dict] = None,
        rng: Optional[random.Random] = None,
        spill_dir: Optional[str] = None,
        event_db: Optional[str] = None,
        verbose: bool = True,
    ):
        self.config = config or DEFAULT_CONFIG
        self.clock = clock or (lambda: int(time.time()))
        self.host = host
        self.scheme = scheme
        self.port = port
        self.relay_host = relay_host or host
        self.rng = rng
        self.event_db = event_db
        self.verbose = verbose
        self.records: Dict[str, ShareRecord] = {}
        self.swarms: Dict[str, _Swarm] = {}
        self.relay = RelayStore(self.config['relay_spill_threshold_bytes'], spill_dir)
        self._lock = threading.RLock()

    # --- helpers ---

    def _now(self, now: Optional[int]) -> int:
        return self.clock() if now is None else now

    def _log(self, event_type: str, token: Optional[str], message: str) -> None:
        if self.verbose:
            log(COMPONENT_ID, message)
        log_service_event(self.event_db, COMPONENT_ID, event_type, token, message)

    def _evaluate(self, record: ShareRecord, now: int) -> ShareState:
        state = record.effective_state(now)
        if state is not record.state:
            record.state = state
            if state is not ShareState.ACTIVE and record.relay_key:
                RelayStore.unlink(self.relay.discard(record.relay_key))
        return state

    def _new_token(self, mode: ShareMode) -> str:
        for _ in range(TOKEN_RETRIES):
            if mode is ShareMode.DIRECT:
                token = derive_slug(new_entropy_seed(16, self.rng))
            else:
                token = generate_short_token(self.rng)
            if token not in self.records:
                return token
        raise CapacityError(f"Could not allocate a unique {mode.value} token after {TOKEN_RETRIES} attempts")

    @staticmethod
    def _status_for(record: ShareRecord, state: ShareState) -> TokenStatus:
        if state is ShareState.EXPIRED:
            return TokenStatus.EXPIRED
        if state is ShareState.EXHAUSTED:
            return TokenStatus.EXHAUSTED
        return TokenStatus.READY if record.ready else TokenStatus.UPLOAD_WAITING

    # --- operations ---

    def register_share(
        self,
        descriptor: FileDescriptor,
        policy: Optional[SharePolicy] = None,
        mode: Union[ShareMode, str] = ShareMode.DIRECT,
        now: Optional[int] = None,
        swarm_id: Optional[str] = None,
        host: Optional[str] = None,
        scheme: Optional[str] = None,
        port: Optional[int] = None,
    ) -> Tuple[str, str]:
        """Register a share offer; returns (token, url)."""
        try:
            mode = ShareMode(mode)
        except ValueError:
            raise InvalidDescriptorError(f"Unknown share mode: {mode!r}")
        descriptor.validate()
        policy = policy or SharePolicy.for_mode(mode, self.config)
        policy.validate()
        if swarm_id is not None and len(swarm_id) != SWARM_ID_LENGTH:
            raise InvalidDescriptorError("Swarm id must be 32 hex characters")
        now = self._now(now)

        with self._lock:
            token = self._new_token(mode)
            record = ShareRecord(
                token=token,
                descriptor=descriptor,
                policy=policy,
                created_at=now,
                mode=mode,
                swarm_id=swarm_id,
                relay_host=self.relay_host if mode is ShareMode.RELAY else None,
            )
            self.records[token] = record

        if host is None:
            host, scheme, port = self.host, self.scheme, self.port
        url = compose_share_url(host, token, scheme or self.scheme, port)
        self._log('SHARE_REGISTERED', token,
                  f"Registered {mode.value} share '{descriptor.name}' ({descriptor.size} bytes)"
                  f" ttl={policy.ttl_seconds}s max_downloads={policy.max_downloads}")
        return token, url

    def resolve_token(self, token: str, now: Optional[int] = None) -> ResolveResult:
        """Status plus descriptor; never mutates the registry."""
        now = self._now(now)
        with self._lock:
            record = self.records.get(token)
            if record is None:
                return ResolveResult(TokenStatus.UNKNOWN)
            status = self._status_for(record, record.effective_state(now))
            return ResolveResult(
                status=status,
                descriptor=record.descriptor,
                mode=record.mode,
                swarm_id=record.swarm_id,
                relay_host=record.relay_host,
                relay_key=record.relay_key,
            )

    def poll_status(self, token: str, now: Optional[int] = None) -> TokenStatus:
        return self.resolve_token(token, now).status

    def consume_download(self, token: str, now: Optional[int] = None) -> Union[Grant, Refusal]:
        """Take one download grant atomically."""
        now = self._now(now)
        with self._lock:
            outcome = self._consume_locked(token, now)
        if isinstance(outcome, Grant):
            self._log('DOWNLOAD_GRANTED', token,
                      f"Granted download {outcome.downloads_initiated}/"
                      f"{outcome.downloads_initiated + outcome.remaining} for {token}")
        else:
            self._log('DOWNLOAD_REFUSED', token, f"Refused {token}: {outcome.reason.value}")
        return outcome

    def _consume_locked(self, token: str, now: int) -> Union[Grant, Refusal]:
        record = self.records.get(token)
        if record is None:
            return Refusal(token, RefusalReason.UNKNOWN)
        state = self._evaluate(record, now)
        if state is ShareState.EXPIRED:
            return Refusal(token, RefusalReason.EXPIRED)
        if state is ShareState.EXHAUSTED:
            return Refusal(token, RefusalReason.EXHAUSTED)
        record.downloads_initiated += 1
        if record.downloads_initiated >= record.policy.max_downloads:
            record.state = ShareState.EXHAUSTED
        return Grant(
            token=token,
            downloads_initiated=record.downloads_initiated,
            remaining=record.policy.max_downloads - record.downloads_initiated,
            descriptor=record.descriptor,
        )

    def expire_sweep(self, now: Optional[int] = None) -> int:
        """Mark every aged-out record expired; returns how many changed."""
        now = self._now(now)
        count = 0
        with self._lock:
            for record in self.records.values():
                if record.state is not ShareState.EXPIRED and now > record.deadline:
                    self._evaluate(record, now)
                    count += 1
        if count:
            self._log('SHARES_EXPIRED', None, f"Expired {count} share(s)")
        return count

    def mark_ready(self, token: str, now: Optional[int] = None) -> TokenStatus:
        now = self._now(now)
        with self._lock:
            record = self.records.get(token)
            if record is None:
                return TokenStatus.UNKNOWN
            record.ready = True
            return self._status_for(record, record.effective_state(now))

    def notify_complete(self, token: str) -> int:
        with self._lock:
            record = self.records.get(token)
            if record is None:
                return 0
            record.completions += 1
            count = record.completions
        self._log('TRANSFER_COMPLETE', token, f"Downloader reported completion for {token}")
        return count

    def transfer_completions(self, token: str) -> int:
        with self._lock:
            record = self.records.get(token)
            return record.completions if record else 0

    def join_swarm(
        self,
        swarm_id: str,
        endpoint: str,
        availability: Union[str, Sequence[bool]],
        chunk_digests: Optional[Sequence[str]] = None,
    ) -> List[SwarmMember]:
        """Record an endpoint's availability; returns the other members."""
        bits = normalize_availability(availability)
        with self._lock:
            swarm = self.swarms.get(swarm_id)
            if swarm is None:
                swarm = _Swarm(chunk_count=len(bits))
                self.swarms[swarm_id] = swarm
            elif len(bits) != swarm.chunk_count:
                raise InvalidAvailabilityError(
                    f"Availability has {len(bits)} chunks, swarm {swarm_id} has {swarm.chunk_count}")
            if chunk_digests is not None:
                digests = list(chunk_digests)
                if len(digests) != swarm.chunk_count:
                    raise InvalidAvailabilityError("Chunk digest list length does not match chunk count")
                if swarm.chunk_digests is None:
                    swarm.chunk_digests = digests
            swarm.members[endpoint] = bits
            return [SwarmMember(ep, av) for ep, av in sorted(swarm.members.items()) if ep != endpoint]

    def leave_swarm(self, swarm_id: str, endpoint: str) -> bool:
        with self._lock:
            swarm = self.swarms.get(swarm_id)
            if swarm is None or endpoint not in swarm.members:
                return False
            del swarm.members[endpoint]
            if not swarm.members:
                del self.swarms[swarm_id]
            return True

    def swarm_members(self, swarm_id: str) -> List[SwarmMember]:
        with self._lock:
            swarm = self.swarms.get(swarm_id)
            if swarm is None:
                return []
            return [SwarmMember(ep, av) for ep, av in sorted(swarm.members.items())]

    def swarm_chunk_digests(self, swarm_id: str) -> Optional[List[str]]:
        with self._lock:
            swarm = self.swarms.get(swarm_id)
            return list(swarm.chunk_digests) if swarm and swarm.chunk_digests is not None else None

    def relay_put(self, key: str, blob: bytes, now: Optional[int] = None, owner_token: Optional[str] = None) -> None:
        """Stage a relay blob for a relay-mode share."""
        if not is_valid_relay_key(key):
            raise RelayConflictError(f"Malformed relay key: {key!r}")
        now = self._now(now)
        with self._lock:
            if key in self.relay.entries:
                raise RelayConflictError(f"Relay key {key} already holds a blob")
            record = self.records.get(owner_token) if owner_token else None
            if record is None or record.mode is not ShareMode.RELAY:
                raise RelayConflictError(f"Relay key {key} has no relay-mode owner share")
            if record.relay_key is not None:
                raise RelayConflictError(f"Share {owner_token} already staged under key {record.relay_key}")
            if self._evaluate(record, now) is not ShareState.ACTIVE:
                raise RelayConflictError(f"Share {owner_token} is no longer active")
            if len(blob) != record.descriptor.size:
                raise InvalidDescriptorError(
                    f"Relay blob is {len(blob)} bytes, descriptor says {record.descriptor.size}")
            self.relay.put(key, owner_token, blob, now)
            record.relay_key = key
            record.ready = True
        self._log('RELAY_STAGED', owner_token, f"Staged {len(blob)} bytes under relay key {key}")

    def relay_get(self, key: str, now: Optional[int] = None) -> bytes:
        """Return the staged bytes and consume one grant of the owning share."""
        now = self._now(now)
        with self._lock:
            entry = self.relay.entries.get(key)
            if entry is None:
                raise RelayRefusedError(RefusalReason.UNKNOWN, key)
            ttl = self.config['relay_ttl_seconds']
            record = self.records.get(entry.owner_token)
            if record is not None:
                ttl = record.policy.ttl_seconds
            if now > entry.created_at + ttl:
                if record is not None:
                    self._evaluate(record, now)
                RelayStore.unlink(self.relay.discard(key))
                raise RelayRefusedError(RefusalReason.EXPIRED, key)
            outcome = self._consume_locked(entry.owner_token, now)
            if isinstance(outcome, Refusal):
                raise RelayRefusedError(outcome.reason, key)
            if outcome.remaining == 0:
                self.relay.discard(key)
            blob = entry.blob
            if blob is None:
                entry.readers += 1
        if blob is None:
            try:
                blob = RelayStore.read(entry)
            except OSError as e:
                raise RelayReadError(f"Could not read staged blob for relay key {key}: {e}")
            finally:
                with self._lock:
                    entry.readers -= 1
                    if entry.retired:
                        RelayStore.unlink(entry)
        self._log('DOWNLOAD_GRANTED', entry.owner_token, f"Relay key {key} served {len(blob)} bytes")
        return blob

    def state_digest(self) -> str:
        with self._lock:
            snapshot = {
                'records': [r.to_dict() for _, r in sorted(self.records.items())],
                'swarms': {
                    sid: {
                        'chunk_count': s.chunk_count,
                        'members': {ep: bitmap_to_text(av) for ep, av in sorted(s.members.items())},
                        'chunk_digests': s.chunk_digests,
                    }
                    for sid, s in sorted(self.swarms.items())
                },
                'relay': sorted(self.relay.entries),
            }
        return hashlib.sha256(canonical_json(snapshot)).hexdigest()

    def close(self) -> None:
        with self._lock:
            self.relay.close()
