#!/usr/bin/env python3
"""
Discrete-event network simulator for covertpipe.

Endpoints sit behind NAT boxes (none, full_cone or symmetric), discover their
public mapping through STUN-style binds, and connect either directly or
through a TURN-style relay when both sides are symmetric. Active paths emit a
bind/confirm keepalive pair every ``keepalive_interval_ms``. Peer channels run
an X25519 + HKDF handshake with key confirmation and carry AES-256-GCM frames
with an explicit 64-bit counter.

Everything observable is appended to an in-memory trace of FlowEvents and can
be written as newline-delimited JSON. Time is integer milliseconds and only
moves when the simulation advances it.
"""
import base64
import binascii
import hmac
import hashlib
import io
import json
import math
import os
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, TextIO, Tuple, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from covertpipe_utils import (
    CovertPipeError,
    DEFAULT_CONFIG,
    EXIT_BAD_INPUT,
    EXIT_NETWORK,
    EXIT_VERIFICATION,
    canonical_json,
)

# --- Configuration ---
DEFAULT_LATENCY_MS = 20
DEFAULT_BANDWIDTH_BPS = 8_000_000
STUN_REQUEST_BYTES = 20
STUN_RESPONSE_BYTES = 32
SIGNAL_BYTES = 256
STUN_RETRIES = 3
HANDSHAKE_RETRIES = 3
PUBLIC_KEY_BYTES = 32
CONFIRM_MAC_BYTES = 32
COUNTER_BYTES = 8
TAG_BYTES = 16
FIRST_PUBLIC_PORT = 40000
SESSION_INFO = b'covertpipe session v1'
# --- End Configuration ---

TRANSPORTS = ('udp', 'tcp')
EVENT_KINDS = ('stun_bind', 'stun_confirm', 'handshake', 'data', 'signal', 'http_get', 'http_post')
EVENT_FIELDS = ('ts_ms', 'src', 'dst', 'transport', 'kind', 'len', 'meta')

Address = Tuple[str, int]


class SimError(CovertPipeError):
    exit_code = EXIT_NETWORK


class UnknownEndpointError(SimError):
    exit_code = EXIT_BAD_INPUT


class StunTimeoutError(SimError):
    pass


class PathFailureError(SimError):
    pass


class HandshakeError(SimError):
    exit_code = EXIT_VERIFICATION


class ChannelError(CovertPipeError):
    exit_code = EXIT_VERIFICATION


class ReplayError(ChannelError):
    pass


class AuthenticationError(ChannelError):
    pass


class TraceFormatError(CovertPipeError):
    exit_code = EXIT_BAD_INPUT


class NatKind(str, Enum):
    NONE = 'none'
    FULL_CONE = 'full_cone'
    SYMMETRIC = 'symmetric'


class PathKind(str, Enum):
    DIRECT = 'direct'
    RELAYED = 'relayed'


class NatBox:
    """Private→public binding table for one endpoint's NAT."""

    def __init__(self, kind: Union[NatKind, str], public_host: str, first_port: int = FIRST_PUBLIC_PORT):
        self.kind = NatKind(kind)
        self.public_host = public_host
        self.table: Dict[tuple, Address] = {}
        self._next_port = first_port

    def map(self, private: Address, destination: Address) -> Address:
        if self.kind is NatKind.NONE:
            return private
        key = private if self.kind is NatKind.FULL_CONE else (private, destination)
        binding = self.table.get(key)
        if binding is None:
            binding = (self.public_host, self._next_port)
            self._next_port += 1
            self.table[key] = binding
        return binding

    @property
    def admits_inbound(self) -> bool:
        return self.kind is not NatKind.SYMMETRIC


@dataclass
class SimEndpoint:
    id: str
    private_address: Address
    nat: NatBox
    role: Optional[str] = None
    reachable: bool = True


@dataclass
class Path:
    path_id: int
    kind: PathKind
    endpoints: Tuple[str, str]
    relay: Optional[str]
    started_ms: int
    keepalive_interval_ms: int = DEFAULT_CONFIG['keepalive_interval_ms']
    last_keepalive_ms: int = 0
    active: bool = True

    def __post_init__(self):
        if (self.kind is PathKind.RELAYED) != (self.relay is not None):
            raise ValueError("A path is relayed exactly when it has a relay")
        if self.keepalive_interval_ms <= 0:
            raise ValueError("keepalive_interval_ms must be positive")

    def hops(self, src: str) -> List[Tuple[str, str]]:
        """Link-level hops for traffic sent from ``src`` to the other end."""
        a, b = self.endpoints
        if src not in self.endpoints:
            raise UnknownEndpointError(f"{src} is not an endpoint of path {self.path_id}")
        dst = b if src == a else a
        if self.relay is None:
            return [(src, dst)]
        return [(src, self.relay), (self.relay, dst)]


@dataclass
class SessionKeys:
    shared_secret: bytes
    role: str
    send_counter: int = 0
    recv_counter: int = 0
    send_key: bytes = field(default=b'', repr=False)
    recv_key: bytes = field(default=b'', repr=False)

    def __post_init__(self):
        if len(self.shared_secret) != 32:
            raise ValueError("shared_secret must be 32 bytes")
        if self.role not in ('initiator', 'responder'):
            raise ValueError(f"Unknown session role: {self.role}")
        i2r = _hkdf(self.shared_secret, b'initiator->responder')
        r2i = _hkdf(self.shared_secret, b'responder->initiator')
        self.send_key, self.recv_key = (i2r, r2i) if self.role == 'initiator' else (r2i, i2r)


@dataclass
class FlowEvent:
    ts_ms: int
    src: str
    dst: str
    transport: str
    kind: str
    len: int
    meta: Optional[str] = None
    payload: Optional[str] = None

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in EVENT_FIELDS}
        if self.payload is not None:
            d['payload'] = self.payload
        return d

    def to_json(self) -> str:
        return canonical_json(self.to_dict()).decode('utf-8')

    @classmethod
    def from_dict(cls, d: dict) -> 'FlowEvent':
        if not isinstance(d, dict):
            raise TraceFormatError("Trace record must be a JSON object")
        missing = [f for f in EVENT_FIELDS if f not in d and f != 'meta']
        if missing:
            raise TraceFormatError(f"Trace record missing {', '.join(missing)}")
        unknown = set(d) - set(EVENT_FIELDS) - {'payload'}
        if unknown:
            raise TraceFormatError(f"Trace record has unknown field(s) {', '.join(sorted(unknown))}")
        for name in ('ts_ms', 'len'):
            v = d[name]
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise TraceFormatError(f"{name} must be a non-negative integer")
        if d['transport'] not in TRANSPORTS:
            raise TraceFormatError(f"Unknown transport {d['transport']!r}")
        if d['kind'] not in EVENT_KINDS:
            raise TraceFormatError(f"Unknown event kind {d['kind']!r}")
        for name in ('src', 'dst'):
            if not isinstance(d[name], str) or not d[name]:
                raise TraceFormatError(f"{name} must be a non-empty string")
        for name in ('meta', 'payload'):
            if d.get(name) is not None and not isinstance(d[name], str):
                raise TraceFormatError(f"{name} must be a string or null")
        if d.get('payload') is not None:
            try:
                base64.b64decode(d['payload'], validate=True)
            except binascii.Error:
                raise TraceFormatError("payload is not valid base64")
        return cls(d['ts_ms'], d['src'], d['dst'], d['transport'], d['kind'], d['len'],
                   d.get('meta'), d.get('payload'))


def random_bytes(rng: Optional[random.Random], count: int) -> bytes:
    if rng is None:
        return os.urandom(count)
    return rng.getrandbits(8 * count).to_bytes(count, 'big')


def _hkdf(secret: bytes, info: bytes, salt: Optional[bytes] = None) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=salt, info=info).derive(secret)


def _raw_public(key: X25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def _agree(private: X25519PrivateKey, peer_public: bytes, transcript: bytes) -> bytes:
    if len(peer_public) != PUBLIC_KEY_BYTES:
        raise HandshakeError("Peer public key has the wrong length")
    try:
        raw = private.exchange(X25519PublicKey.from_public_bytes(peer_public))
    except ValueError as e:
        raise HandshakeError(f"Key agreement failed: {e}")
    return _hkdf(raw, SESSION_INFO, salt=hashlib.sha256(transcript).digest())


def _confirm_mac(secret: bytes, role: str, transcript: bytes) -> bytes:
    key = _hkdf(secret, b'key confirmation')
    return hmac.new(key, role.encode('ascii') + transcript, hashlib.sha256).digest()


# --- handshake messages, shared by the simulator and the TCP peer link ---

def handshake_initiate(rng: Optional[random.Random] = None) -> Tuple[X25519PrivateKey, bytes]:
    """Initiator's ephemeral key and HELLO message."""
    private = X25519PrivateKey.from_private_bytes(random_bytes(rng, 32))
    return private, _raw_public(private)


def handshake_respond(hello: bytes, rng: Optional[random.Random] = None) -> Tuple[SessionKeys, bytes]:
    """Responder keys plus HELLO_REPLY (public key || responder confirmation)."""
    private = X25519PrivateKey.from_private_bytes(random_bytes(rng, 32))
    reply_public = _raw_public(private)
    transcript = bytes(hello) + reply_public
    secret = _agree(private, bytes(hello), transcript)
    return SessionKeys(secret, 'responder'), reply_public + _confirm_mac(secret, 'responder', transcript)


def handshake_finish(private: X25519PrivateKey, hello: bytes, reply: bytes) -> Tuple[SessionKeys, bytes]:
    """Check the responder's confirmation; returns initiator keys and CONFIRM."""
    if len(reply) != PUBLIC_KEY_BYTES + CONFIRM_MAC_BYTES:
        raise HandshakeError("HELLO_REPLY has the wrong length")
    reply_public, mac = reply[:PUBLIC_KEY_BYTES], reply[PUBLIC_KEY_BYTES:]
    transcript = bytes(hello) + reply_public
    secret = _agree(private, reply_public, transcript)
    if not hmac.compare_digest(mac, _confirm_mac(secret, 'responder', transcript)):
        raise HandshakeError("Responder key confirmation failed")
    return SessionKeys(secret, 'initiator'), _confirm_mac(secret, 'initiator', transcript)


def handshake_verify(keys: SessionKeys, hello: bytes, reply: bytes, confirm: bytes) -> None:
    transcript = bytes(hello) + bytes(reply[:PUBLIC_KEY_BYTES])
    if not hmac.compare_digest(bytes(confirm), _confirm_mac(keys.shared_secret, 'initiator', transcript)):
        raise HandshakeError("Initiator key confirmation failed")


# --- channel ---

def seal(keys: SessionKeys, plaintext: bytes) -> bytes:
    """counter (8 bytes, big endian) || AES-GCM(ciphertext || tag)."""
    counter = keys.send_counter
    if counter >= 2 ** 64 - 1:
        raise ChannelError("Send counter exhausted; a new handshake is required")
    header = counter.to_bytes(COUNTER_BYTES, 'big')
    nonce = b'\x00' * 4 + header
    frame = header + AESGCM(keys.send_key).encrypt(nonce, bytes(plaintext), header)
    keys.send_counter = counter + 1
    return frame


def unseal(keys: SessionKeys, frame: bytes) -> bytes:
    if len(frame) < COUNTER_BYTES + TAG_BYTES:
        raise AuthenticationError("Frame too short")
    header = bytes(frame[:COUNTER_BYTES])
    counter = int.from_bytes(header, 'big')
    try:
        plaintext = AESGCM(keys.recv_key).decrypt(b'\x00' * 4 + header, bytes(frame[COUNTER_BYTES:]), header)
    except InvalidTag:
        raise AuthenticationError(f"Frame {counter} failed authentication")
    if counter < keys.recv_counter:
        raise ReplayError(f"Frame counter {counter} already used")
    keys.recv_counter = counter + 1
    return plaintext


def sealed_length(plaintext_len: int) -> int:
    return COUNTER_BYTES + plaintext_len + TAG_BYTES


# --- simulator ---

@dataclass
class _Link:
    latency_ms: int = DEFAULT_LATENCY_MS
    bandwidth_bps: int = DEFAULT_BANDWIDTH_BPS
    loss: float = 0.0


class SimNetwork:
    """One single-threaded simulation instance."""

    def __init__(self, seed: int = 0, loss: float = 0.0,
                 keepalive_interval_ms: int = DEFAULT_CONFIG['keepalive_interval_ms'],
                 latency_ms: int = DEFAULT_LATENCY_MS, bandwidth_bps: int = DEFAULT_BANDWIDTH_BPS):
        if not 0.0 <= loss < 1.0:
            raise ValueError("loss must be in [0, 1)")
        self.seed = seed
        self.rng = random.Random(seed)
        self.keepalive_interval_ms = keepalive_interval_ms
        self.default_link = _Link(latency_ms, bandwidth_bps, loss)
        self.links: Dict[frozenset, _Link] = {}
        self.endpoints: Dict[str, SimEndpoint] = {}
        self.paths: List[Path] = []
        self.events: List[FlowEvent] = []
        self.now_ms = 0
        self.rendezvous_host: Optional[str] = None

    # --- topology ---

    def add_endpoint(self, endpoint_id: str, nat: Union[NatKind, str] = NatKind.NONE,
                     private_address: Optional[Address] = None, role: Optional[str] = None) -> SimEndpoint:
        if endpoint_id in self.endpoints:
            raise UnknownEndpointError(f"Endpoint id {endpoint_id} already registered")
        n = len(self.endpoints) + 1
        nat = NatKind(nat)
        if private_address is None:
            private_address = (f"10.{n // 250}.{n % 250}.2", 50000 + n) if nat is not NatKind.NONE \
                else (f"198.51.{n // 250}.{n % 250}", 3478 if role in ('stun', 'turn') else 443)
        endpoint = SimEndpoint(endpoint_id, private_address, NatBox(nat, f"203.0.{n // 250}.{n % 250}"), role)
        self.endpoints[endpoint_id] = endpoint
        if role == 'rendezvous' and self.rendezvous_host is None:
            self.rendezvous_host = endpoint_id
        return endpoint

    def set_link(self, a: str, b: str, latency_ms: Optional[int] = None,
                 bandwidth_bps: Optional[int] = None, loss: Optional[float] = None) -> None:
        base = self._link(a, b)
        self.links[frozenset((a, b))] = _Link(
            base.latency_ms if latency_ms is None else latency_ms,
            base.bandwidth_bps if bandwidth_bps is None else bandwidth_bps,
            base.loss if loss is None else loss,
        )

    def set_reachable(self, endpoint_id: str, reachable: bool) -> None:
        self._get(endpoint_id).reachable = reachable

    def _get(self, endpoint_id: str) -> SimEndpoint:
        endpoint = self.endpoints.get(endpoint_id)
        if endpoint is None:
            raise UnknownEndpointError(f"Unknown endpoint: {endpoint_id}")
        return endpoint

    def _link(self, a: str, b: str) -> _Link:
        return self.links.get(frozenset((a, b)), self.default_link)

    def _delivered(self, a: str, b: str) -> bool:
        loss = self._link(a, b).loss
        return loss <= 0 or self.rng.random() >= loss

    def _transfer_ms(self, a: str, b: str, length: int) -> int:
        link = self._link(a, b)
        return link.latency_ms + math.ceil(length * 8 * 1000 / link.bandwidth_bps)

    # --- trace ---

    def emit(self, ts_ms: int, src: str, dst: str, transport: str, kind: str, length: int,
             meta: Optional[str] = None, payload: Optional[bytes] = None) -> FlowEvent:
        event = FlowEvent(ts_ms, src, dst, transport, kind, length, meta,
                          base64.b64encode(payload).decode('ascii') if payload is not None else None)
        self.events.append(event)
        return event

    def trace_lines(self) -> List[str]:
        return [e.to_json() for e in sorted(self.events, key=lambda e: e.ts_ms)]

    def write_trace(self, out: Union[str, TextIO]) -> int:
        """Write the trace as NDJSON sorted by ts_ms; returns the event count."""
        lines = self.trace_lines()
        if isinstance(out, str):
            with open(out, 'w', encoding='utf-8', newline='\n') as f:
                return self.write_trace(f)
        for line in lines:
            out.write(line + '\n')
        return len(lines)

    def trace_text(self) -> str:
        buf = io.StringIO()
        self.write_trace(buf)
        return buf.getvalue()

    # --- clock ---

    def advance(self, ms: int) -> List[FlowEvent]:
        """Move the clock forward, running keepalives on every active path."""
        if ms < 0:
            raise ValueError("Cannot move simulated time backwards")
        self.now_ms += ms
        emitted = []
        for path in self.paths:
            if path.active:
                emitted.extend(self.keepalive_tick(path, self.now_ms))
        return emitted

    # --- operations ---

    def stun_bind(self, endpoint_id: str, stun_server: str) -> Address:
        """Learn the endpoint's public mapping as seen by ``stun_server``."""
        endpoint = self._get(endpoint_id)
        server = self._get(stun_server)
        for _ in range(STUN_RETRIES):
            self.emit(self.now_ms, endpoint_id, stun_server, 'udp', 'stun_bind', STUN_REQUEST_BYTES)
            rtt = 2 * self._link(endpoint_id, stun_server).latency_ms
            if server.reachable and self._delivered(endpoint_id, stun_server):
                mapped = endpoint.nat.map(endpoint.private_address, server.private_address)
                self.emit(self.now_ms + rtt, stun_server, endpoint_id, 'udp', 'stun_confirm',
                          STUN_RESPONSE_BYTES)
                self.advance(rtt)
                return mapped
            self.advance(rtt)
        raise StunTimeoutError(f"STUN server {stun_server} did not answer {endpoint_id}")

    def signal(self, src: str, dst: str, meta: Optional[str] = None, length: int = SIGNAL_BYTES) -> None:
        """Control message relayed through the rendezvous host."""
        via = self.rendezvous_host
        if via is None:
            raise PathFailureError("No rendezvous host to carry signaling")
        self._get(src)
        self._get(dst)
        self.emit(self.now_ms, src, via, 'tcp', 'signal', length, meta)
        self.advance(self._link(src, via).latency_ms)
        self.emit(self.now_ms, via, dst, 'tcp', 'signal', length, meta)
        self.advance(self._link(via, dst).latency_ms)

    def establish_path(self, a: str, b: str, stun_server: str, turn_relay: Optional[str] = None,
                       keepalive_interval_ms: Optional[int] = None) -> Path:
        """
        Bind both sides, exchange offer/answer through the rendezvous host and
        pick a direct path unless both NATs are symmetric.
        """
        ea, eb = self._get(a), self._get(b)
        self.stun_bind(a, stun_server)
        self.stun_bind(b, stun_server)
        self.signal(a, b, 'offer')
        self.signal(b, a, 'answer')

        relay = None
        if not (ea.nat.admits_inbound or eb.nat.admits_inbound):
            if turn_relay is None:
                raise PathFailureError(f"No direct route between {a} and {b} and no relay configured")
            relay_ep = self._get(turn_relay)
            if not relay_ep.reachable:
                raise PathFailureError(f"Relay {turn_relay} unreachable")
            self.stun_bind(a, turn_relay)
            self.stun_bind(b, turn_relay)
            relay = turn_relay

        path = Path(
            path_id=len(self.paths) + 1,
            kind=PathKind.RELAYED if relay else PathKind.DIRECT,
            endpoints=(a, b),
            relay=relay,
            started_ms=self.now_ms,
            keepalive_interval_ms=keepalive_interval_ms or self.keepalive_interval_ms,
            last_keepalive_ms=self.now_ms,
        )
        self.paths.append(path)
        return path

    def keepalive_tick(self, path: Path, now_ms: int) -> List[FlowEvent]:
        """One bind/confirm pair per whole interval elapsed since the last tick."""
        if not path.active or now_ms <= path.last_keepalive_ms:
            return []
        interval = path.keepalive_interval_ms
        count = (now_ms - path.last_keepalive_ms) // interval
        a, b = path.endpoints
        peer = path.relay or b
        rtt = min(2 * self._link(a, peer).latency_ms, interval - 1)
        emitted = []
        for i in range(1, count + 1):
            ts = path.last_keepalive_ms + i * interval
            emitted.append(self.emit(ts, a, peer, 'udp', 'stun_bind', STUN_REQUEST_BYTES))
            emitted.append(self.emit(ts + rtt, peer, a, 'udp', 'stun_confirm', STUN_RESPONSE_BYTES))
        path.last_keepalive_ms += count * interval
        return emitted

    def close_path(self, path: Path) -> None:
        self.keepalive_tick(path, self.now_ms)
        path.active = False

    def _send_on_path(self, path: Path, src: str, kind: str, message: bytes,
                      meta: Optional[str] = None) -> Optional[bytes]:
        """Carry one message across the path hops; None when a hop drops it."""
        delivered = message
        for hop_src, hop_dst in path.hops(src):
            self.emit(self.now_ms, hop_src, hop_dst, 'udp', kind, len(delivered), meta)
            self.advance(self._transfer_ms(hop_src, hop_dst, len(delivered)))
            if not self._delivered(hop_src, hop_dst):
                return None
        return delivered

    def _reliable(self, path: Path, src: str, kind: str, message: bytes, retries: int) -> bytes:
        for _ in range(retries):
            delivered = self._send_on_path(path, src, kind, message)
            if delivered is not None:
                return delivered
        raise HandshakeError(f"{kind} message from {src} lost {retries} times")

    def handshake(self, path: Path, initiator_rng: Optional[random.Random] = None,
                  responder_rng: Optional[random.Random] = None,
                  tamper_message: Optional[int] = None) -> Tuple[SessionKeys, SessionKeys]:
        """
        Ephemeral key agreement across the path. ``tamper_message`` (0 hello,
        1 reply, 2 confirm) flips one byte of that message in transit.
        """
        a, b = path.endpoints

        def transit(index: int, src: str, message: bytes) -> bytes:
            delivered = self._reliable(path, src, 'handshake', message, HANDSHAKE_RETRIES)
            if tamper_message == index:
                flipped = bytearray(delivered)
                flipped[len(flipped) // 2] ^= 0x01
                return bytes(flipped)
            return delivered

        private, hello = handshake_initiate(initiator_rng)
        hello_rx = transit(0, a, hello)
        keys_b, reply = handshake_respond(hello_rx, responder_rng)
        reply_rx = transit(1, b, reply)
        keys_a, confirm = handshake_finish(private, hello, reply_rx)
        confirm_rx = transit(2, a, confirm)
        handshake_verify(keys_b, hello_rx, reply, confirm_rx)
        return keys_a, keys_b

    def send_frame(self, path: Path, src: str, frame: bytes) -> bool:
        """Encrypted data frame; the trace records only its length."""
        return self._send_on_path(path, src, 'data', frame) is not None

    def http_request(self, client: str, server: str, method: str, target: str,
                     body_len: int = 0, response_len: int = 0) -> None:
        """One cleartext HTTP exchange; the request line is visible in meta."""
        self._get(client)
        self._get(server)
        kind = 'http_post' if method.upper() == 'POST' else 'http_get'
        request_line = f"{method.upper()} {target}"
        self.emit(self.now_ms, client, server, 'tcp', kind, len(request_line) + body_len, request_line)
        self.advance(self._transfer_ms(client, server, len(request_line) + body_len))
        if response_len:
            self.emit(self.now_ms, server, client, 'tcp', 'data', response_len)
            self.advance(self._transfer_ms(server, client, response_len))

    def send_cleartext(self, src: str, dst: str, content: bytes, chunk_size: int) -> int:
        """Plain TCP body with payload bytes carried in the trace; returns event count."""
        self._get(src)
        self._get(dst)
        if not content:
            self.emit(self.now_ms, src, dst, 'tcp', 'data', 0, 'offset=0', b'')
            return 1
        count = 0
        for offset in range(0, len(content), chunk_size):
            piece = content[offset:offset + chunk_size]
            self.emit(self.now_ms, src, dst, 'tcp', 'data', len(piece), f"offset={offset}", piece)
            self.advance(self._transfer_ms(src, dst, len(piece)))
            count += 1
        return count

    def nat_kind(self, endpoint_id: str) -> NatKind:
        return self._get(endpoint_id).nat.kind

    def summary(self) -> dict:
        flows = {(frozenset((e.src, e.dst)), e.transport) for e in self.events}
        first = min((e.ts_ms for e in self.events), default=0)
        last = max((e.ts_ms for e in self.events), default=0)
        return {'events': len(self.events), 'flows': len(flows), 'duration_ms': last - first}


def iter_events(lines: Iterable[str]) -> Iterable[FlowEvent]:
    for line in lines:
        if line.strip():
            yield FlowEvent.from_dict(json.loads(line))
