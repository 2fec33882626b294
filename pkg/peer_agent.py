#!/usr/bin/env python3
"""
Uploader and downloader agents.

An agent offers content through the rendezvous service (direct swarm mode or
cleartext relay mode) and fetches shares by URL: resolve, take a grant,
connect to the seeders, pull chunks rarest-first, verify every chunk and the
whole file, then report completion. The peer transport is pluggable: the
simulated backend here drives transport_sim, peer_link drives real TCP.
"""
import hashlib
import json
import math
import random
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple, Union

from covertpipe_utils import (
    CovertPipeError,
    DEFAULT_CONFIG,
    EXIT_INVALID_TOKEN,
    EXIT_NETWORK,
    EXIT_VERIFICATION,
    canonical_json,
    log,
)
from ident_derive import (
    ONION_SCHEME,
    derive_onion_id,
    derive_swarm_id,
    generate_relay_key,
    parse_share_url,
)
from rendezvous_core import (
    FileDescriptor,
    Refusal,
    RelayRefusedError,
    ShareMode,
    SharePolicy,
    TokenStatus,
)
from transport_sim import (
    ChannelError,
    HandshakeError,
    Path,
    SimError,
    SimNetwork,
    random_bytes,
    seal,
    unseal,
)

# --- Configuration ---
COMPONENT_ID = 'peer_agent'
CHUNK_RETRIES = 3
# --- End Configuration ---


class PeerAgentError(CovertPipeError):
    exit_code = EXIT_NETWORK


class SessionStateError(PeerAgentError):
    pass


class RegistrationError(PeerAgentError):
    exit_code = EXIT_NETWORK


class InvalidTokenError(PeerAgentError):
    exit_code = EXIT_INVALID_TOKEN

    def __init__(self, token: str, reason: str):
        super().__init__(f"Share {token} is not downloadable: {reason}")
        self.token = token
        self.reason = reason


class TransferError(PeerAgentError):
    exit_code = EXIT_NETWORK


class VerificationError(PeerAgentError):
    exit_code = EXIT_VERIFICATION


class ChunkFetchError(PeerAgentError):
    """A single chunk request failed in transit."""


class ChunkIndexError(PeerAgentError, IndexError):
    pass


class UploadState(str, Enum):
    IDLE = 'idle'
    REGISTERED = 'registered'
    WAITING_PEER = 'waiting_peer'
    TRANSFERRING = 'transferring'
    COMPLETE = 'complete'
    EXPIRED = 'expired'


class DownloadState(str, Enum):
    RESOLVING = 'resolving'
    GRANTED = 'granted'
    CONNECTING = 'connecting'
    TRANSFERRING = 'transferring'
    VERIFYING = 'verifying'
    DONE = 'done'
    FAILED = 'failed'


UPLOAD_ORDER = [UploadState.IDLE, UploadState.REGISTERED, UploadState.WAITING_PEER,
                UploadState.TRANSFERRING, UploadState.COMPLETE]
DOWNLOAD_ORDER = [DownloadState.RESOLVING, DownloadState.GRANTED, DownloadState.CONNECTING,
                  DownloadState.TRANSFERRING, DownloadState.VERIFYING, DownloadState.DONE]


def split_chunks(content: bytes, chunk_size: int) -> List[bytes]:
    return [content[i:i + chunk_size] for i in range(0, len(content), chunk_size)]


def chunk_digests(content: bytes, chunk_size: int) -> List[bytes]:
    return [hashlib.sha256(c).digest() for c in split_chunks(content, chunk_size)]


@dataclass
class ChunkMap:
    chunk_size: int
    total_chunks: int
    have: List[bool]
    chunk_digests: List[bytes]

    def __post_init__(self):
        if self.chunk_size <= 0:
            raise ValueError("chunk_size must be positive")
        if len(self.have) != self.total_chunks or len(self.chunk_digests) != self.total_chunks:
            raise ValueError("Bitmap and digest list must both have total_chunks entries")

    @classmethod
    def for_content(cls, content: bytes, chunk_size: int) -> 'ChunkMap':
        digests = chunk_digests(content, chunk_size)
        return cls(chunk_size, len(digests), [True] * len(digests), digests)

    @classmethod
    def empty(cls, size: int, chunk_size: int, digests: Sequence[bytes]) -> 'ChunkMap':
        total = math.ceil(size / chunk_size)
        if len(digests) != total:
            raise VerificationError(f"Expected {total} chunk digests, swarm advertises {len(digests)}")
        return cls(chunk_size, total, [False] * total, list(digests))

    def missing(self) -> List[int]:
        return [i for i, held in enumerate(self.have) if not held]

    @property
    def complete(self) -> bool:
        return all(self.have)


@dataclass
class ChunkSchedule:
    assignment: Dict[int, str]
    unassignable: List[int]


def schedule_chunks(availabilities: Mapping[str, Sequence[bool]], chunk_map: ChunkMap) -> ChunkSchedule:
    """
    Assign every missing chunk some peer holds to exactly one peer.

    Chunks are taken rarest first (fewest holders, then lowest index). Each
    goes to the holder with the fewest chunks assigned so far this round,
    ties to the lexicographically smallest peer id.
    """
    missing = chunk_map.missing()
    holders: Dict[int, List[str]] = {}
    unassignable = []
    for index in missing:
        who = sorted(p for p, bits in availabilities.items() if index < len(bits) and bits[index])
        if who:
            holders[index] = who
        else:
            unassignable.append(index)

    load: Dict[str, int] = defaultdict(int)
    assignment: Dict[int, str] = {}
    for index in sorted(holders, key=lambda i: (len(holders[i]), i)):
        peer = min(holders[index], key=lambda p: (load[p], p))
        assignment[index] = peer
        load[peer] += 1
    return ChunkSchedule(assignment, unassignable)


class UploadSession:
    def __init__(self, mode: Union[ShareMode, str]):
        self.mode = ShareMode(mode)
        self.state = UploadState.IDLE
        self.token: Optional[str] = None
        self.url: Optional[str] = None
        self.swarm_id: Optional[str] = None
        self.relay_key: Optional[str] = None
        self.max_downloads = DEFAULT_CONFIG['max_downloads']

    def advance(self, new_state: UploadState) -> None:
        if new_state is self.state:
            return
        if self.state in (UploadState.COMPLETE, UploadState.EXPIRED):
            raise SessionStateError(f"Upload already {self.state.value}")
        if new_state is UploadState.EXPIRED:
            self.state = new_state
            return
        if UPLOAD_ORDER.index(new_state) != UPLOAD_ORDER.index(self.state) + 1:
            raise SessionStateError(f"Illegal upload transition {self.state.value} -> {new_state.value}")
        self.state = new_state


class DownloadSession:
    def __init__(self, url: str):
        self.url = url
        self.state = DownloadState.RESOLVING
        self.token: Optional[str] = None
        self.descriptor: Optional[FileDescriptor] = None
        self.chunk_map: Optional[ChunkMap] = None
        self.chunks: Dict[int, bytes] = {}
        self.rejected: List[int] = []
        self.failures: Dict[int, int] = defaultdict(int)
        self.error: Optional[str] = None

    def advance(self, new_state: DownloadState) -> None:
        if self.state in (DownloadState.DONE, DownloadState.FAILED):
            raise SessionStateError(f"Download already {self.state.value}")
        if new_state is DownloadState.FAILED:
            self.state = new_state
            return
        if DOWNLOAD_ORDER.index(new_state) != DOWNLOAD_ORDER.index(self.state) + 1:
            raise SessionStateError(f"Illegal download transition {self.state.value} -> {new_state.value}")
        self.state = new_state

    def fail(self, error: Exception) -> None:
        self.error = str(error)
        if self.state not in (DownloadState.DONE, DownloadState.FAILED):
            self.state = DownloadState.FAILED

    def assemble(self) -> bytes:
        return b''.join(self.chunks[i] for i in range(self.chunk_map.total_chunks))


def ingest_chunk(session: DownloadSession, index: int, data: bytes) -> DownloadSession:
    """Verify a delivered chunk and record it; bad chunks are re-queued."""
    chunk_map = session.chunk_map
    if not 0 <= index < chunk_map.total_chunks:
        raise ChunkIndexError(f"Chunk index {index} out of range 0..{chunk_map.total_chunks - 1}")
    if chunk_map.have[index]:
        return session
    if hashlib.sha256(data).digest() != chunk_map.chunk_digests[index]:
        session.rejected.append(index)
        session.failures[index] += 1
        return session
    session.chunks[index] = bytes(data)
    chunk_map.have[index] = True
    return session


# --- transfer backends ---

class PeerChannel:
    """An authenticated channel to one seeder."""

    def fetch_chunk(self, swarm_id: str, index: int) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class TransferBackend:
    """Peer transport plus hooks for the observable side of each flow."""

    def local_endpoint(self, agent_id: str) -> str:
        return agent_id

    def serve(self, endpoint: str, swarm_id: str, content: bytes, chunk_size: int) -> None:
        raise NotImplementedError

    def open_channel(self, local: str, peer: str) -> PeerChannel:
        raise NotImplementedError

    def on_offer(self, endpoint: str, mode: ShareMode, token: str) -> None:
        pass

    def on_relay_upload(self, endpoint: str, relay_host: str, key: str, content: bytes) -> None:
        pass

    def on_resolve(self, endpoint: str, token: str) -> None:
        pass

    def on_relay_download(self, endpoint: str, relay_host: str, key: str, content: bytes) -> None:
        pass

    def on_complete(self, endpoint: str, token: str) -> None:
        pass


class _SimSeeder:
    def __init__(self, content: bytes, chunk_size: int):
        self.chunks = split_chunks(content, chunk_size)


class SimChannel(PeerChannel):
    def __init__(self, backend: 'SimTransferBackend', local: str, peer: str, path: Path, keys_local, keys_peer):
        self.backend = backend
        self.local = local
        self.peer = peer
        self.path = path
        self.keys_local = keys_local
        self.keys_peer = keys_peer

    def fetch_chunk(self, swarm_id: str, index: int) -> bytes:
        net = self.backend.net
        request = seal(self.keys_local, canonical_json({'swarm_id': swarm_id, 'index': index}))
        if not net.send_frame(self.path, self.local, request):
            raise ChunkFetchError(f"Request for chunk {index} to {self.peer} lost")
        ask = json.loads(unseal(self.keys_peer, request))
        seeder = self.backend.seeders.get((self.peer, ask['swarm_id']))
        if seeder is None or not 0 <= ask['index'] < len(seeder.chunks):
            raise ChunkFetchError(f"{self.peer} does not hold chunk {index}")
        frame = seal(self.keys_peer, seeder.chunks[ask['index']])
        if not net.send_frame(self.path, self.peer, frame):
            raise ChunkFetchError(f"Chunk {index} from {self.peer} lost")
        if self.backend.inject_fault:
            frame = flip_bit(frame)
        return unseal(self.keys_local, frame)


def flip_bit(frame: bytes) -> bytes:
    flipped = bytearray(frame)
    flipped[-1] ^= 0x01
    return bytes(flipped)


class SimTransferBackend(TransferBackend):
    """Peer transfers over a SimNetwork; relay flows emitted as cleartext HTTP."""

    def __init__(self, net: SimNetwork, stun_server: str, turn_relay: Optional[str] = None,
                 rng: Optional[random.Random] = None, chunk_size: int = DEFAULT_CONFIG['chunk_size'],
                 inject_fault: bool = False):
        self.net = net
        self.stun_server = stun_server
        self.turn_relay = turn_relay
        self.rng = rng or net.rng
        self.chunk_size = chunk_size
        self.inject_fault = inject_fault
        self.seeders: Dict[Tuple[str, str], _SimSeeder] = {}
        self.paths: Dict[frozenset, Tuple[Path, object, object, str]] = {}

    def serve(self, endpoint: str, swarm_id: str, content: bytes, chunk_size: int) -> None:
        self.seeders[(endpoint, swarm_id)] = _SimSeeder(content, chunk_size)

    def open_channel(self, local: str, peer: str) -> PeerChannel:
        key = frozenset((local, peer))
        cached = self.paths.get(key)
        if cached is None or not cached[0].active:
            path = self.net.establish_path(local, peer, self.stun_server, self.turn_relay)
            rng_local = random.Random(self.rng.getrandbits(64))
            rng_peer = random.Random(self.rng.getrandbits(64))
            keys_local, keys_peer = self.net.handshake(path, rng_local, rng_peer)
            cached = (path, keys_local, keys_peer, local)
            self.paths[key] = cached
        path, keys_a, keys_b, initiator = cached
        if initiator == local:
            return SimChannel(self, local, peer, path, keys_a, keys_b)
        return SimChannel(self, local, peer, path, keys_b, keys_a)

    def close_paths(self, endpoint: Optional[str] = None) -> int:
        closed = 0
        for key, (path, _, _, _) in list(self.paths.items()):
            if endpoint is None or endpoint in key:
                if path.active:
                    self.net.close_path(path)
                    closed += 1
                del self.paths[key]
        return closed

    def _rendezvous(self) -> str:
        return self.net.rendezvous_host

    def on_offer(self, endpoint: str, mode: ShareMode, token: str) -> None:
        target = '/upload' if mode is ShareMode.DIRECT else '/getkey.php'
        self.net.http_request(endpoint, self._rendezvous(), 'POST', target, body_len=512, response_len=256)

    def on_relay_upload(self, endpoint: str, relay_host: str, key: str, content: bytes) -> None:
        self.net.http_request(endpoint, relay_host, 'POST', f"/put.py?key={key}")
        self.net.send_cleartext(endpoint, relay_host, content, self.chunk_size)
        self.net.http_request(endpoint, relay_host, 'GET', f"/status.php?key={key}", response_len=64)

    def on_resolve(self, endpoint: str, token: str) -> None:
        self.net.http_request(endpoint, self._rendezvous(), 'GET', f"/{token}", response_len=1024)

    def on_relay_download(self, endpoint: str, relay_host: str, key: str, content: bytes) -> None:
        self.net.http_request(endpoint, relay_host, 'GET', f"/get.php?key={key}")
        self.net.send_cleartext(relay_host, endpoint, content, self.chunk_size)

    def on_complete(self, endpoint: str, token: str) -> None:
        self.net.http_request(endpoint, self._rendezvous(), 'POST', '/complete', body_len=64, response_len=64)


# --- the agent ---

class PeerAgent:
    """One participant; talks to a Rendezvous or a RendezvousClient."""

    def __init__(self, agent_id: str, rendezvous, backend: TransferBackend,
                 chunk_size: int = DEFAULT_CONFIG['chunk_size'], rng: Optional[random.Random] = None,
                 verbose: bool = False, reseed: bool = True):
        self.agent_id = agent_id
        self.reseed = reseed
        self.rendezvous = rendezvous
        self.backend = backend
        self.chunk_size = chunk_size
        self.rng = rng
        self.verbose = verbose
        self.endpoint = backend.local_endpoint(agent_id)
        self.uploads: Dict[str, UploadSession] = {}
        self.downloads: List[DownloadSession] = []

    def _log(self, message: str) -> None:
        if self.verbose:
            log(COMPONENT_ID, f"{self.agent_id}: {message}")

    def offer_file(self, content: bytes, policy: Optional[SharePolicy] = None,
                   mode: Union[ShareMode, str] = ShareMode.DIRECT, name: str = 'file.bin',
                   url_scheme: Optional[str] = None, url_host: Optional[str] = None,
                   url_port: Optional[int] = None) -> str:
        """Register content for sharing and start serving it; returns the URL."""
        mode = ShareMode(mode)
        session = UploadSession(mode)
        if policy is not None:
            session.max_downloads = policy.max_downloads
        descriptor = FileDescriptor.from_content(name, content)
        if url_scheme == ONION_SCHEME and url_host is None:
            url_host = derive_onion_id(random_bytes(self.rng, 32))

        swarm_id = derive_swarm_id(content) if mode is ShareMode.DIRECT else None
        try:
            token, url = self.rendezvous.register_share(
                descriptor, policy, mode, swarm_id=swarm_id,
                host=url_host, scheme=url_scheme if url_host else None, port=url_port)
        except (OSError, SimError) as e:
            raise RegistrationError(f"Could not register share: {e}")
        except CovertPipeError as e:
            if e.exit_code == EXIT_NETWORK:
                raise RegistrationError(f"Could not register share: {e}")
            raise
        session.token, session.url, session.swarm_id = token, url, swarm_id
        session.advance(UploadState.REGISTERED)
        self.backend.on_offer(self.endpoint, mode, token)

        if mode is ShareMode.DIRECT:
            chunk_map = ChunkMap.for_content(content, self.chunk_size)
            self.backend.serve(self.endpoint, swarm_id, content, self.chunk_size)
            self.rendezvous.join_swarm(swarm_id, self.endpoint, chunk_map.have,
                                       [d.hex() for d in chunk_map.chunk_digests])
            self.rendezvous.mark_ready(token)
        else:
            key = generate_relay_key(self.rng)
            relay_host = self.rendezvous.resolve_token(token).relay_host
            self.backend.on_relay_upload(self.endpoint, relay_host, key, content)
            self.rendezvous.relay_put(key, content, owner_token=token)
            session.relay_key = key
        session.advance(UploadState.WAITING_PEER)
        self.uploads[token] = session
        self._log(f"offering {name} ({len(content)} bytes) at {url}")
        return url

    def poll_upload(self, token: str) -> UploadState:
        """Refresh an upload session from the rendezvous status."""
        session = self.uploads[token]
        if session.state in (UploadState.COMPLETE, UploadState.EXPIRED):
            return session.state
        status = self.rendezvous.poll_status(token)
        completions = self.rendezvous.transfer_completions(token)
        if status is TokenStatus.EXPIRED or status is TokenStatus.UNKNOWN:
            session.advance(UploadState.EXPIRED)
        elif completions and session.state is UploadState.WAITING_PEER:
            session.advance(UploadState.TRANSFERRING)
        if status is TokenStatus.EXHAUSTED and session.state is UploadState.TRANSFERRING \
                and completions >= session.max_downloads:
            session.advance(UploadState.COMPLETE)
        return session.state

    def fetch(self, url: str) -> bytes:
        """Download a share by URL and return the verified bytes."""
        session = DownloadSession(url)
        self.downloads.append(session)
        try:
            data = self._fetch(session)
        except CovertPipeError as e:
            session.fail(e)
            raise
        self._log(f"fetched {len(data)} bytes from {url}")
        return data

    def _fetch(self, session: DownloadSession) -> bytes:
        token = parse_share_url(session.url).token
        session.token = token
        self.backend.on_resolve(self.endpoint, token)
        result = self.rendezvous.resolve_token(token)
        if result.status in (TokenStatus.UNKNOWN, TokenStatus.EXPIRED, TokenStatus.EXHAUSTED):
            raise InvalidTokenError(token, result.status.value)
        session.descriptor = result.descriptor

        if result.mode is ShareMode.RELAY:
            if result.relay_key is None:
                raise TransferError(f"Share {token} has not been staged yet")
            try:
                blob = self.rendezvous.relay_get(result.relay_key)
            except RelayRefusedError as e:
                raise InvalidTokenError(token, e.reason.value)
            session.advance(DownloadState.GRANTED)
            session.advance(DownloadState.CONNECTING)
            session.advance(DownloadState.TRANSFERRING)
            self.backend.on_relay_download(self.endpoint, result.relay_host, result.relay_key, blob)
            session.chunk_map = ChunkMap.for_content(blob, self.chunk_size)
            session.chunks = dict(enumerate(split_chunks(blob, self.chunk_size)))
        else:
            outcome = self.rendezvous.consume_download(token)
            if isinstance(outcome, Refusal):
                raise InvalidTokenError(token, outcome.reason.value)
            session.advance(DownloadState.GRANTED)
            self._fetch_swarm(session, result.swarm_id)

        session.advance(DownloadState.VERIFYING)
        data = session.assemble()
        if len(data) != session.descriptor.size or \
                hashlib.sha256(data).digest() != session.descriptor.content_digest:
            raise VerificationError(f"Content digest mismatch for {token}")
        session.advance(DownloadState.DONE)
        self.rendezvous.notify_complete(token)
        self.backend.on_complete(self.endpoint, token)
        return data

    def _fetch_swarm(self, session: DownloadSession, swarm_id: str) -> None:
        descriptor = session.descriptor
        digests = [bytes.fromhex(d) for d in (self.rendezvous.swarm_chunk_digests(swarm_id) or [])]
        if descriptor.size == 0:
            digests = []
        session.chunk_map = ChunkMap.empty(descriptor.size, self.chunk_size, digests)
        session.advance(DownloadState.CONNECTING)
        members = self.rendezvous.join_swarm(swarm_id, self.endpoint, session.chunk_map.have)
        availabilities = {m.endpoint: m.availability for m in members}
        session.advance(DownloadState.TRANSFERRING)
        try:
            self._pull_chunks(session, swarm_id, availabilities)
        except CovertPipeError:
            self.rendezvous.leave_swarm(swarm_id, self.endpoint)
            raise
        if self.reseed:
            self.backend.serve(self.endpoint, swarm_id, session.assemble(), self.chunk_size)
            self.rendezvous.join_swarm(swarm_id, self.endpoint, session.chunk_map.have)
        else:
            self.rendezvous.leave_swarm(swarm_id, self.endpoint)

    def _pull_chunks(self, session: DownloadSession, swarm_id: str,
                     availabilities: Dict[str, Tuple[bool, ...]]) -> None:
        chunk_map = session.chunk_map
        channels: Dict[str, PeerChannel] = {}
        dead: Set[str] = set()
        excluded: Dict[int, Set[str]] = defaultdict(set)
        last_error: Optional[Exception] = None
        verification_failed = False

        try:
            while not chunk_map.complete:
                usable = {
                    peer: tuple(bit and peer not in excluded[i] for i, bit in enumerate(bits))
                    for peer, bits in availabilities.items() if peer not in dead
                }
                plan = schedule_chunks(usable, chunk_map)
                if not plan.assignment:
                    break
                for index, peer in sorted(plan.assignment.items()):
                    if peer in dead:
                        continue
                    channel = channels.get(peer)
                    if channel is None:
                        try:
                            channel = self.backend.open_channel(self.endpoint, peer)
                        except (CovertPipeError, OSError) as e:
                            dead.add(peer)
                            last_error = e
                            verification_failed = verification_failed or isinstance(e, HandshakeError)
                            continue
                        channels[peer] = channel
                    for _ in range(1 + CHUNK_RETRIES):
                        try:
                            ingest_chunk(session, index, channel.fetch_chunk(swarm_id, index))
                        except ChannelError as e:
                            last_error, verification_failed = e, True
                            session.failures[index] += 1
                            continue
                        except (ChunkFetchError, SimError, OSError) as e:
                            last_error = e
                            session.failures[index] += 1
                            continue
                        except CovertPipeError as e:
                            last_error = e
                            session.failures[index] += 1
                            channels.pop(peer, None)
                            break
                        if chunk_map.have[index]:
                            break
                        last_error, verification_failed = VerificationError(
                            f"Chunk {index} from {peer} failed its digest"), True
                    if not chunk_map.have[index]:
                        excluded[index].add(peer)
        finally:
            for channel in channels.values():
                channel.close()

        if not chunk_map.complete:
            missing = chunk_map.missing()
            detail = f"{len(missing)} chunk(s) missing; last error: {last_error}"
            if verification_failed:
                raise VerificationError(f"Transfer could not be verified: {detail}")
            raise TransferError(f"Transfer incomplete: {detail}")
