#!/usr/bin/env python3
"""
Framed wire protocol for the rendezvous service and the peer channel.

Frame: 4-byte big-endian payload length, 1 type byte, payload. Payloads are
canonical JSON objects; binary fields are base64 text. Replies reuse the
request's type byte, failures come back as an ERROR frame {code, message}.
"""
import base64
import json
import socket
import socketserver
import struct
import threading
from enum import IntEnum
from typing import Any, Dict, List, Optional, Tuple, Union

from covertpipe_utils import (
    CovertPipeError,
    EXIT_BAD_INPUT,
    EXIT_NETWORK,
    canonical_json,
    log,
    log_service_event,
)
from rendezvous_core import (
    FileDescriptor,
    Grant,
    RefusalReason,
    Refusal,
    RelayRefusedError,
    Rendezvous,
    ResolveResult,
    SharePolicy,
    SwarmMember,
    TokenStatus,
    normalize_availability,
)

# --- Configuration ---
COMPONENT_ID = 'rendezvous_server'
FRAME_HEADER = struct.Struct('>IB')
MAX_FRAME_BYTES = 512 * 1024 * 1024
SWEEP_INTERVAL_SECONDS = 30
CLIENT_TIMEOUT_SECONDS = 30
LISTEN_BACKLOG = 128
# --- End Configuration ---


class FrameType(IntEnum):
    REGISTER = 0x01
    RESOLVE = 0x02
    CONSUME = 0x03
    STATUS = 0x04
    JOIN_SWARM = 0x05
    RELAY_PUT = 0x06
    RELAY_GET = 0x07
    MARK_READY = 0x08
    LEAVE_SWARM = 0x09
    NOTIFY_COMPLETE = 0x0A
    SWARM_INFO = 0x0B
    HELLO = 0x10
    HELLO_REPLY = 0x11
    CONFIRM = 0x12
    CHUNK_REQUEST = 0x13
    CHUNK_DATA = 0x14
    ERROR = 0x7F


class WireError(CovertPipeError):
    exit_code = EXIT_NETWORK


class FrameError(WireError):
    exit_code = EXIT_BAD_INPUT


class ConnectionClosedError(WireError):
    pass


class RemoteError(CovertPipeError):
    """An ERROR frame; ``exit_code`` is the code the server sent."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.exit_code = code


def b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode('ascii')


def b64decode(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode('ascii'), validate=True)
    except (ValueError, AttributeError) as e:
        raise FrameError(f"Bad base64 field: {e}")


def encode_frame(frame_type: int, payload: Dict[str, Any]) -> bytes:
    body = canonical_json(payload)
    if len(body) > MAX_FRAME_BYTES:
        raise FrameError(f"Frame payload of {len(body)} bytes exceeds limit")
    return FRAME_HEADER.pack(len(body), int(frame_type)) + body


def decode_payload(body: bytes) -> Dict[str, Any]:
    try:
        payload = json.loads(body.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameError(f"Frame payload is not JSON: {e}")
    if not isinstance(payload, dict):
        raise FrameError("Frame payload must be a JSON object")
    return payload


def recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        try:
            chunk = sock.recv(min(remaining, 1024 * 1024))
        except socket.timeout:
            raise WireError("Timed out waiting for frame data")
        except OSError as e:
            raise ConnectionClosedError(f"Connection error: {e}")
        if not chunk:
            raise ConnectionClosedError("Connection closed mid-frame" if chunks else "Connection closed")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


def read_frame(sock: socket.socket) -> Tuple[int, Dict[str, Any]]:
    length, frame_type = FRAME_HEADER.unpack(recv_exact(sock, FRAME_HEADER.size))
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"Incoming frame of {length} bytes exceeds limit")
    return frame_type, decode_payload(recv_exact(sock, length))


def write_frame(sock: socket.socket, frame_type: int, payload: Dict[str, Any]) -> None:
    try:
        sock.sendall(encode_frame(frame_type, payload))
    except OSError as e:
        raise ConnectionClosedError(f"Could not send frame: {e}")


def error_payload(error: Exception) -> Dict[str, Any]:
    code = getattr(error, 'exit_code', EXIT_BAD_INPUT)
    payload = {'code': code, 'message': str(error)}
    if isinstance(error, RelayRefusedError):
        payload['reason'] = error.reason.value
    return payload


def _require(payload: Dict[str, Any], *names: str) -> List[Any]:
    missing = [n for n in names if n not in payload]
    if missing:
        raise FrameError(f"Missing field(s): {', '.join(missing)}")
    return [payload[n] for n in names]


# --- Server side ---

def dispatch(service: Rendezvous, frame_type: int, payload: Dict[str, Any]) -> Dict[str, Any]:
    """Run one request against the service and build the reply payload."""
    if frame_type == FrameType.REGISTER:
        (desc,) = _require(payload, 'descriptor')
        policy = payload.get('policy')
        token, url = service.register_share(
            FileDescriptor.from_dict(desc),
            SharePolicy(**policy) if policy else None,
            payload.get('mode', 'direct'),
            swarm_id=payload.get('swarm_id'),
            host=payload.get('host'),
            scheme=payload.get('scheme'),
            port=payload.get('port'),
        )
        return {'token': token, 'url': url}

    if frame_type == FrameType.RESOLVE:
        (token,) = _require(payload, 'token')
        return service.resolve_token(token).to_dict()

    if frame_type == FrameType.CONSUME:
        (token,) = _require(payload, 'token')
        outcome = service.consume_download(token)
        if isinstance(outcome, Grant):
            return {'granted': True, 'downloads_initiated': outcome.downloads_initiated,
                    'remaining': outcome.remaining, 'descriptor': outcome.descriptor.to_dict()}
        return {'granted': False, 'reason': outcome.reason.value}

    if frame_type == FrameType.STATUS:
        (token,) = _require(payload, 'token')
        return {'status': service.poll_status(token).value,
                'completions': service.transfer_completions(token)}

    if frame_type == FrameType.JOIN_SWARM:
        swarm_id, endpoint, availability = _require(payload, 'swarm_id', 'endpoint', 'availability')
        members = service.join_swarm(swarm_id, endpoint, availability, payload.get('chunk_digests'))
        return {'members': [m.to_dict() for m in members]}

    if frame_type == FrameType.RELAY_PUT:
        key, owner, blob = _require(payload, 'key', 'owner_token', 'blob')
        service.relay_put(key, b64decode(blob), owner_token=owner)
        return {'ok': True}

    if frame_type == FrameType.RELAY_GET:
        (key,) = _require(payload, 'key')
        return {'blob': b64encode(service.relay_get(key))}

    if frame_type == FrameType.MARK_READY:
        (token,) = _require(payload, 'token')
        return {'status': service.mark_ready(token).value}

    if frame_type == FrameType.LEAVE_SWARM:
        swarm_id, endpoint = _require(payload, 'swarm_id', 'endpoint')
        return {'left': service.leave_swarm(swarm_id, endpoint)}

    if frame_type == FrameType.NOTIFY_COMPLETE:
        (token,) = _require(payload, 'token')
        return {'completions': service.notify_complete(token)}

    if frame_type == FrameType.SWARM_INFO:
        (swarm_id,) = _require(payload, 'swarm_id')
        return {'members': [m.to_dict() for m in service.swarm_members(swarm_id)],
                'chunk_digests': service.swarm_chunk_digests(swarm_id)}

    raise FrameError(f"Unknown request type 0x{frame_type:02x}")


class RendezvousRequestHandler(socketserver.BaseRequestHandler):
    """Serves frames on one connection until the client hangs up."""

    def handle(self) -> None:
        peer = f"{self.client_address[0]}:{self.client_address[1]}"
        while True:
            try:
                frame_type, payload = read_frame(self.request)
            except ConnectionClosedError:
                return
            except CovertPipeError as e:
                log(COMPONENT_ID, f"Dropping {peer}: {e}")
                try:
                    write_frame(self.request, FrameType.ERROR, error_payload(e))
                except WireError:
                    pass
                return
            try:
                reply = dispatch(self.server.service, frame_type, payload)
                reply_type = frame_type
            except (CovertPipeError, TypeError, ValueError) as e:
                reply, reply_type = error_payload(e), FrameType.ERROR
            try:
                write_frame(self.request, reply_type, reply)
            except WireError:
                return


class RendezvousServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False
    request_queue_size = LISTEN_BACKLOG

    def __init__(self, address: Tuple[str, int], service: Rendezvous,
                 sweep_interval: float = SWEEP_INTERVAL_SECONDS):
        self.service = service
        self.sweep_interval = sweep_interval
        self._stop_sweep = threading.Event()
        self._sweeper = threading.Thread(target=self._sweep_loop, name='expire-sweep', daemon=True)
        # server_close also runs when the bind fails
        super().__init__(address, RendezvousRequestHandler)

    def _sweep_loop(self) -> None:
        while not self._stop_sweep.wait(self.sweep_interval):
            self.service.expire_sweep()

    def serve_forever(self, poll_interval: float = 0.5) -> None:
        host, port = self.server_address[:2]
        log(COMPONENT_ID, f"Listening on {host}:{port}")
        log_service_event(self.service.event_db, COMPONENT_ID, 'SERVER_STARTED', None, f"Listening on {host}:{port}")
        if not self._sweeper.is_alive():
            self._sweeper.start()
        super().serve_forever(poll_interval)

    def server_close(self) -> None:
        self._stop_sweep.set()
        super().server_close()
        self.service.close()
        log_service_event(self.service.event_db, COMPONENT_ID, 'SERVER_STOPPED', None, 'Server stopped')


def start_background_server(service: Rendezvous, host: str = '127.0.0.1', port: int = 0) -> RendezvousServer:
    """Bind and serve from a daemon thread; used by send and by tests."""
    server = RendezvousServer((host, port), service)
    thread = threading.Thread(target=server.serve_forever, name='rendezvous-server', daemon=True)
    thread.start()
    return server


# --- Client side ---

class RendezvousClient:
    """Speaks the wire protocol; mirrors the Rendezvous method names."""

    def __init__(self, host: str, port: int, timeout: float = CLIENT_TIMEOUT_SECONDS):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            except OSError as e:
                raise WireError(f"Rendezvous server {self.host}:{self.port} unreachable: {e}")
        return self._sock

    def request(self, frame_type: FrameType, payload: Dict[str, Any]) -> Dict[str, Any]:
        with self._lock:
            sock = self._connect()
            try:
                write_frame(sock, frame_type, payload)
                reply_type, reply = read_frame(sock)
            except WireError:
                self.close()
                raise
        if reply_type == FrameType.ERROR:
            if 'reason' in reply:
                raise RelayRefusedError(RefusalReason(reply['reason']), payload.get('key', ''))
            raise RemoteError(reply.get('code', EXIT_BAD_INPUT), reply.get('message', 'remote error'))
        if reply_type != frame_type:
            raise FrameError(f"Reply type 0x{reply_type:02x} does not match request 0x{int(frame_type):02x}")
        return reply

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self) -> 'RendezvousClient':
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def register_share(self, descriptor: FileDescriptor, policy: Optional[SharePolicy] = None,
                       mode: str = 'direct', now: Optional[int] = None, swarm_id: Optional[str] = None,
                       host: Optional[str] = None, scheme: Optional[str] = None,
                       port: Optional[int] = None) -> Tuple[str, str]:
        payload = {'descriptor': descriptor.to_dict(), 'mode': getattr(mode, 'value', mode)}
        if policy is not None:
            payload['policy'] = policy.to_dict()
        for name, value in (('swarm_id', swarm_id), ('host', host), ('scheme', scheme), ('port', port)):
            if value is not None:
                payload[name] = value
        reply = self.request(FrameType.REGISTER, payload)
        return reply['token'], reply['url']

    def resolve_token(self, token: str, now: Optional[int] = None) -> ResolveResult:
        return ResolveResult.from_dict(self.request(FrameType.RESOLVE, {'token': token}))

    def consume_download(self, token: str, now: Optional[int] = None) -> Union[Grant, Refusal]:
        reply = self.request(FrameType.CONSUME, {'token': token})
        if reply['granted']:
            return Grant(token, reply['downloads_initiated'], reply['remaining'],
                         FileDescriptor.from_dict(reply['descriptor']))
        return Refusal(token, RefusalReason(reply['reason']))

    def poll_status(self, token: str, now: Optional[int] = None) -> TokenStatus:
        return TokenStatus(self.request(FrameType.STATUS, {'token': token})['status'])

    def transfer_completions(self, token: str) -> int:
        return self.request(FrameType.STATUS, {'token': token})['completions']

    def join_swarm(self, swarm_id: str, endpoint: str, availability, chunk_digests=None) -> List[SwarmMember]:
        bits = normalize_availability(availability)
        payload = {'swarm_id': swarm_id, 'endpoint': endpoint,
                   'availability': ''.join('1' if b else '0' for b in bits)}
        if chunk_digests is not None:
            payload['chunk_digests'] = list(chunk_digests)
        reply = self.request(FrameType.JOIN_SWARM, payload)
        return [SwarmMember(m['endpoint'], normalize_availability(m['availability'])) for m in reply['members']]

    def leave_swarm(self, swarm_id: str, endpoint: str) -> bool:
        return self.request(FrameType.LEAVE_SWARM, {'swarm_id': swarm_id, 'endpoint': endpoint})['left']

    def swarm_members(self, swarm_id: str) -> List[SwarmMember]:
        reply = self.request(FrameType.SWARM_INFO, {'swarm_id': swarm_id})
        return [SwarmMember(m['endpoint'], normalize_availability(m['availability'])) for m in reply['members']]

    def swarm_chunk_digests(self, swarm_id: str) -> Optional[List[str]]:
        return self.request(FrameType.SWARM_INFO, {'swarm_id': swarm_id})['chunk_digests']

    def relay_put(self, key: str, blob: bytes, now: Optional[int] = None, owner_token: Optional[str] = None) -> None:
        self.request(FrameType.RELAY_PUT, {'key': key, 'owner_token': owner_token, 'blob': b64encode(blob)})

    def relay_get(self, key: str, now: Optional[int] = None) -> bytes:
        return b64decode(self.request(FrameType.RELAY_GET, {'key': key})['blob'])

    def mark_ready(self, token: str, now: Optional[int] = None) -> TokenStatus:
        return TokenStatus(self.request(FrameType.MARK_READY, {'token': token})['status'])

    def notify_complete(self, token: str) -> int:
        return self.request(FrameType.NOTIFY_COMPLETE, {'token': token})['completions']
