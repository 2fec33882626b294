#!/usr/bin/env python3
"""
TCP peer link used by the ``send``/``recv`` commands.

A seeder listens on a socket and answers, per connection: HELLO with
HELLO_REPLY, then a CONFIRM, then any number of sealed CHUNK_REQUESTs with
sealed CHUNK_DATA. Frames use the rendezvous wire codec; sealed bodies travel
base64-encoded in a ``frame`` field.
"""
import json
import random
import socket
import socketserver
import threading
from typing import Dict, Optional, Tuple

from covertpipe_utils import CovertPipeError, canonical_json, log, parse_host_port
from peer_agent import ChunkFetchError, PeerChannel, TransferBackend, flip_bit, split_chunks
from rendezvous_wire import (
    FrameType,
    RemoteError,
    WireError,
    b64decode,
    b64encode,
    error_payload,
    read_frame,
    write_frame,
)
from transport_sim import (
    HandshakeError,
    SessionKeys,
    handshake_finish,
    handshake_initiate,
    handshake_respond,
    handshake_verify,
    seal,
    unseal,
)

# --- Configuration ---
COMPONENT_ID = 'peer_link'
CONNECT_TIMEOUT_SECONDS = 10
LISTEN_BACKLOG = 64
# --- End Configuration ---


def _expect(sock: socket.socket, frame_type: FrameType) -> dict:
    got, payload = read_frame(sock)
    if got == FrameType.ERROR:
        raise RemoteError(payload.get('code', 3), payload.get('message', 'peer error'))
    if got != frame_type:
        raise WireError(f"Expected {frame_type.name}, peer sent 0x{got:02x}")
    return payload


class SeederHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        try:
            keys = self._handshake()
        except (CovertPipeError, KeyError) as e:
            log(COMPONENT_ID, f"Handshake with {self.client_address[0]} failed: {e}")
            return
        while True:
            try:
                frame_type, payload = read_frame(self.request)
            except WireError:
                return
            if frame_type != FrameType.CHUNK_REQUEST:
                write_frame(self.request, FrameType.ERROR, {'code': 5, 'message': 'expected CHUNK_REQUEST'})
                return
            try:
                ask = json.loads(unseal(keys, b64decode(payload['frame'])))
                chunk = self.server.chunk(ask['swarm_id'], ask['index'])
                write_frame(self.request, FrameType.CHUNK_DATA, {'frame': b64encode(seal(keys, chunk))})
            except (CovertPipeError, KeyError, ValueError) as e:
                try:
                    write_frame(self.request, FrameType.ERROR, error_payload(e))
                except WireError:
                    return

    def _handshake(self) -> SessionKeys:
        hello = b64decode(_expect(self.request, FrameType.HELLO)['key'])
        keys, reply = handshake_respond(hello)
        write_frame(self.request, FrameType.HELLO_REPLY, {'reply': b64encode(reply)})
        confirm = b64decode(_expect(self.request, FrameType.CONFIRM)['mac'])
        handshake_verify(keys, hello, reply, confirm)
        return keys


class SeederServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = LISTEN_BACKLOG

    def __init__(self, address: Tuple[str, int]):
        super().__init__(address, SeederHandler)
        self.content: Dict[str, list] = {}
        self._lock = threading.Lock()

    def add(self, swarm_id: str, content: bytes, chunk_size: int) -> None:
        with self._lock:
            self.content[swarm_id] = split_chunks(content, chunk_size)

    def chunk(self, swarm_id: str, index: int) -> bytes:
        with self._lock:
            chunks = self.content.get(swarm_id)
        if chunks is None:
            raise ChunkFetchError(f"Not seeding swarm {swarm_id}")
        if not isinstance(index, int) or not 0 <= index < len(chunks):
            raise ChunkFetchError(f"No chunk {index} in swarm {swarm_id}")
        return chunks[index]


class TcpChannel(PeerChannel):
    def __init__(self, peer: str, inject_fault: bool = False, rng: Optional[random.Random] = None):
        host, port = parse_host_port(peer)
        try:
            self.sock = socket.create_connection((host, port), timeout=CONNECT_TIMEOUT_SECONDS)
        except OSError as e:
            raise WireError(f"Seeder {peer} unreachable: {e}")
        self.peer = peer
        self.inject_fault = inject_fault
        try:
            self.keys = self._handshake(rng)
        except (CovertPipeError, KeyError):
            self.close()
            raise

    def _handshake(self, rng: Optional[random.Random]) -> SessionKeys:
        private, hello = handshake_initiate(rng)
        write_frame(self.sock, FrameType.HELLO, {'key': b64encode(hello)})
        reply = b64decode(_expect(self.sock, FrameType.HELLO_REPLY)['reply'])
        keys, confirm = handshake_finish(private, hello, reply)
        write_frame(self.sock, FrameType.CONFIRM, {'mac': b64encode(confirm)})
        return keys

    def fetch_chunk(self, swarm_id: str, index: int) -> bytes:
        request = seal(self.keys, canonical_json({'swarm_id': swarm_id, 'index': index}))
        write_frame(self.sock, FrameType.CHUNK_REQUEST, {'frame': b64encode(request)})
        try:
            payload = _expect(self.sock, FrameType.CHUNK_DATA)
        except RemoteError as e:
            raise ChunkFetchError(str(e))
        frame = b64decode(payload['frame'])
        if self.inject_fault:
            frame = flip_bit(frame)
        return unseal(self.keys, frame)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class TcpTransferBackend(TransferBackend):
    """Real sockets: a seeder server started on first ``serve``."""

    def __init__(self, listen_host: str = '127.0.0.1', listen_port: int = 0,
                 advertise_host: Optional[str] = None, inject_fault: bool = False):
        self.listen = (listen_host, listen_port)
        self.advertise_host = advertise_host or listen_host
        self.inject_fault = inject_fault
        self.server: Optional[SeederServer] = None
        self._thread: Optional[threading.Thread] = None

    def _start(self) -> SeederServer:
        if self.server is None:
            try:
                self.server = SeederServer(self.listen)
            except OSError as e:
                raise WireError(f"Could not bind seeder on {self.listen[0]}:{self.listen[1]}: {e}")
            self._thread = threading.Thread(target=self.server.serve_forever, name='seeder', daemon=True)
            self._thread.start()
            log(COMPONENT_ID, f"Seeding on {self.endpoint_address}")
        return self.server

    @property
    def endpoint_address(self) -> str:
        port = self.server.server_address[1] if self.server else self.listen[1]
        return f"{self.advertise_host}:{port}"

    def local_endpoint(self, agent_id: str) -> str:
        return self.endpoint_address if self.server else agent_id

    def bind(self) -> str:
        """Start listening now and return the advertised host:port."""
        self._start()
        return self.endpoint_address

    def serve(self, endpoint: str, swarm_id: str, content: bytes, chunk_size: int) -> None:
        self._start().add(swarm_id, content, chunk_size)

    def open_channel(self, local: str, peer: str) -> PeerChannel:
        try:
            return TcpChannel(peer, self.inject_fault)
        except HandshakeError:
            raise
        except (OSError, ValueError) as e:
            raise WireError(f"Could not reach seeder {peer}: {e}")

    def shutdown(self) -> None:
        if self.server is not None:
            self.server.shutdown()
            self.server.server_close()
            self.server = None
