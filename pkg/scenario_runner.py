#!/usr/bin/env python3
"""
Scenario scripts: load, validate and run a JSON scenario on a SimNetwork.

A scenario names its servers and peers, the files they share and an ordered
list of actions (offer, fetch, wait, browse, close, sweep). Running it is
deterministic for a given seed; the result carries the NDJSON trace, the
source files and the outcome of every fetch. PROTOCOL.md documents the schema.
"""
import json
import os
import random
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union

from covertpipe_utils import CovertPipeError, DEFAULT_CONFIG, EXIT_BAD_INPUT
from ident_derive import ONION_SCHEME
from peer_agent import (
    InvalidTokenError,
    PeerAgent,
    SimTransferBackend,
    TransferError,
    VerificationError,
)
from rendezvous_core import Rendezvous, ShareMode, SharePolicy
from transport_sim import NatKind, SimError, SimNetwork

# --- Configuration ---
SERVER_ROLES = ('rendezvous', 'stun', 'turn', 'relay')
NETWORK_KEYS = ('latency_ms', 'bandwidth_bps', 'loss', 'keepalive_interval_ms')
OPS = {
    'offer': ({'peer', 'file'}, {'mode', 'as', 'max_downloads', 'ttl', 'url_scheme', 'name'}),
    'fetch': ({'peer', 'share'}, {'expect'}),
    'wait': ({'ms'}, set()),
    'browse': ({'peer', 'host'}, {'path', 'bytes'}),
    'close': (set(), {'peer'}),
    'sweep': (set(), set()),
}
OUTCOMES = ('ok', 'invalid_token', 'verification_failed', 'transfer_failed')
DEFAULT_BROWSE_BYTES = 16384
# --- End Configuration ---

_ACTIONS_KEY_RE = re.compile(r'"actions"\s*:\s*\[')


class ScenarioError(CovertPipeError):
    exit_code = EXIT_BAD_INPUT


@dataclass
class ScenarioResult:
    name: str
    seed: int
    network: SimNetwork
    files: Dict[str, bytes] = field(default_factory=dict)
    shares: Dict[str, str] = field(default_factory=dict)
    outcomes: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def trace_lines(self) -> List[str]:
        return self.network.trace_lines()

    def write_trace(self, path: str) -> int:
        return self.network.write_trace(path)

    def summary(self) -> Dict[str, Any]:
        return {'scenario': self.name, 'seed': self.seed, **self.network.summary()}


def action_lines(text: str) -> List[int]:
    """1-based source line of every element of the top-level actions array."""
    match = _ACTIONS_KEY_RE.search(text)
    if match is None:
        return []
    decoder = json.JSONDecoder()
    pos = match.end()
    lines = []
    while True:
        while pos < len(text) and text[pos] in ' \t\r\n,':
            pos += 1
        if pos >= len(text) or text[pos] == ']':
            return lines
        lines.append(text.count('\n', 0, pos) + 1)
        try:
            _, pos = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            return lines


def load_scenario(path: str) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ScenarioError(f"Could not read scenario {path}: {e}")
    return parse_scenario(text)


def parse_scenario(text: str) -> Dict[str, Any]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"$: invalid JSON: {e.msg} (line {e.lineno})")
    if not isinstance(doc, dict):
        raise ScenarioError("$: scenario must be a JSON object (line 1)")
    doc['_action_lines'] = action_lines(text)
    return doc


def _fail(path: str, message: str, line: Optional[int] = None) -> None:
    suffix = f" (line {line})" if line else ''
    raise ScenarioError(f"{path}: {message}{suffix}")


def _positive_int(value: Any, allow_zero: bool = False) -> bool:
    if isinstance(value, bool) or not isinstance(value, int):
        return False
    return value >= 0 if allow_zero else value > 0


def validate_scenario(doc: Dict[str, Any]) -> None:
    """Raise ScenarioError naming the JSON path of the first problem."""
    known = {'name', 'seed', 'servers', 'entities', 'files', 'actions', 'network', 'url_scheme',
             'chunk_size', '_action_lines', 'description'}
    for key in doc:
        if key not in known:
            _fail(f"$.{key}", "unknown key")
    if 'seed' in doc and not _positive_int(doc['seed'], allow_zero=True):
        _fail('$.seed', 'must be a non-negative integer')
    if 'chunk_size' in doc and not _positive_int(doc['chunk_size']):
        _fail('$.chunk_size', 'must be a positive integer')

    servers = doc.get('servers', {})
    if not isinstance(servers, dict):
        _fail('$.servers', 'must be an object')
    for role, host in servers.items():
        if role not in SERVER_ROLES:
            _fail(f"$.servers.{role}", f"unknown server role (expected one of {', '.join(SERVER_ROLES)})")
        if host is not None and (not isinstance(host, str) or not host):
            _fail(f"$.servers.{role}", 'must be a host name')

    network = doc.get('network', {})
    if not isinstance(network, dict):
        _fail('$.network', 'must be an object')
    for key, value in network.items():
        if key not in NETWORK_KEYS:
            _fail(f"$.network.{key}", 'unknown key')
        if key == 'loss':
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0 <= value < 1:
                _fail('$.network.loss', 'must be a number in [0, 1)')
        elif not _positive_int(value):
            _fail(f"$.network.{key}", 'must be a positive integer')

    entity_ids = set()
    entities = doc.get('entities', [])
    if not isinstance(entities, list):
        _fail('$.entities', 'must be a list')
    for i, entity in enumerate(entities):
        where = f"$.entities[{i}]"
        if not isinstance(entity, dict) or not isinstance(entity.get('id'), str) or not entity['id']:
            _fail(where, 'needs a string id')
        if entity['id'] in entity_ids or entity['id'] in servers.values():
            _fail(f"{where}.id", f"duplicate endpoint id {entity['id']!r}")
        try:
            NatKind(entity.get('nat', 'none'))
        except ValueError:
            _fail(f"{where}.nat", f"unknown NAT kind {entity.get('nat')!r}")
        entity_ids.add(entity['id'])

    files = doc.get('files', {})
    if not isinstance(files, dict):
        _fail('$.files', 'must be an object')
    for name, file_def in files.items():
        where = f"$.files.{name}"
        if not isinstance(file_def, dict) or ('size' in file_def) == ('text' in file_def):
            _fail(where, "needs exactly one of 'size' or 'text'")
        if 'size' in file_def and not _positive_int(file_def['size'], allow_zero=True):
            _fail(f"{where}.size", 'must be a non-negative integer')
        if 'text' in file_def and not isinstance(file_def['text'], str):
            _fail(f"{where}.text", 'must be a string')

    actions = doc.get('actions', [])
    if not isinstance(actions, list):
        _fail('$.actions', 'must be a list')
    lines = doc.get('_action_lines', [])
    shares = set()
    for i, action in enumerate(actions):
        where = f"$.actions[{i}]"
        line = lines[i] if i < len(lines) else None
        if not isinstance(action, dict):
            _fail(where, 'must be an object', line)
        op = action.get('op')
        if op not in OPS:
            _fail(f"{where}.op", f"unknown op {op!r}", line)
        required, optional = OPS[op]
        for key in required - set(action):
            _fail(f"{where}.{key}", 'is required', line)
        for key in set(action) - required - optional - {'op'}:
            _fail(f"{where}.{key}", 'unknown key', line)
        if 'peer' in action and action['peer'] not in entity_ids:
            _fail(f"{where}.peer", f"unknown entity {action['peer']!r}", line)

        if op == 'offer':
            if action['file'] not in files:
                _fail(f"{where}.file", f"unknown file {action['file']!r}", line)
            if action.get('mode', 'direct') not in ('direct', 'relay'):
                _fail(f"{where}.mode", "must be 'direct' or 'relay'", line)
            if not servers.get('rendezvous'):
                _fail('$.servers.rendezvous', 'is required by offer actions', line)
            if action.get('mode', 'direct') == 'relay' and not servers.get('relay'):
                _fail('$.servers.relay', 'is required by relay-mode offers', line)
            if action.get('mode', 'direct') == 'direct' and not servers.get('stun'):
                _fail('$.servers.stun', 'is required by direct-mode offers', line)
            for key in ('max_downloads', 'ttl'):
                if key in action and not _positive_int(action[key]):
                    _fail(f"{where}.{key}", 'must be a positive integer', line)
            shares.add(action.get('as', f"share{i}"))
        elif op == 'fetch':
            if action['share'] not in shares:
                _fail(f"{where}.share", f"no earlier offer defines {action['share']!r}", line)
            if action.get('expect', 'ok') not in OUTCOMES:
                _fail(f"{where}.expect", f"must be one of {', '.join(OUTCOMES)}", line)
        elif op == 'wait':
            if not _positive_int(action['ms'], allow_zero=True):
                _fail(f"{where}.ms", 'must be a non-negative integer', line)
        elif op == 'browse':
            if not isinstance(action['host'], str) or not action['host']:
                _fail(f"{where}.host", 'must be a host name', line)
            if 'bytes' in action and not _positive_int(action['bytes'], allow_zero=True):
                _fail(f"{where}.bytes", 'must be a non-negative integer', line)


def _file_bytes(name: str, file_def: Dict[str, Any], seed: int) -> bytes:
    if 'text' in file_def:
        return file_def['text'].encode('utf-8')
    return random.Random(f"{seed}:file:{name}").randbytes(file_def['size'])


def run_scenario(script: Union[Dict[str, Any], str], seed: Optional[int] = None,
                 config: Optional[Dict[str, Any]] = None) -> ScenarioResult:
    """Validate and run a scenario document (or the path of one)."""
    doc = load_scenario(script) if isinstance(script, (str, os.PathLike)) else dict(script)
    validate_scenario(doc)
    config = config or DEFAULT_CONFIG
    seed = doc.get('seed', 0) if seed is None else seed
    network = doc.get('network', {})
    servers = {role: host for role, host in doc.get('servers', {}).items() if host}
    chunk_size = doc.get('chunk_size', config['chunk_size'])

    net = SimNetwork(
        seed=seed,
        loss=network.get('loss', 0.0),
        keepalive_interval_ms=network.get('keepalive_interval_ms', config['keepalive_interval_ms']),
        **{k: network[k] for k in ('latency_ms', 'bandwidth_bps') if k in network},
    )
    for role in SERVER_ROLES:
        host = servers.get(role)
        if host and host not in net.endpoints:
            net.add_endpoint(host, 'none', role=role)
    for entity in doc.get('entities', []):
        net.add_endpoint(entity['id'], entity.get('nat', 'none'))

    rendezvous = Rendezvous(
        clock=lambda: net.now_ms // 1000,
        host=servers.get('rendezvous', 'rendezvous.local'),
        scheme=doc.get('url_scheme', 'http'),
        relay_host=servers.get('relay'),
        config=config,
        rng=random.Random(f"{seed}:tokens"),
        verbose=False,
    )
    backend = SimTransferBackend(net, servers.get('stun'), servers.get('turn'),
                                 rng=random.Random(f"{seed}:keys"), chunk_size=chunk_size)
    agents: Dict[str, PeerAgent] = {}

    def agent(peer: str) -> PeerAgent:
        if peer not in agents:
            agents[peer] = PeerAgent(peer, rendezvous, backend, chunk_size,
                                     rng=random.Random(f"{seed}:agent:{peer}"))
        return agents[peer]

    result = ScenarioResult(doc.get('name', 'scenario'), seed, net)
    share_files: Dict[str, str] = {}
    for name, file_def in doc.get('files', {}).items():
        result.files[name] = _file_bytes(name, file_def, seed)

    lines = doc.get('_action_lines', [])
    try:
        for i, action in enumerate(doc.get('actions', [])):
            where = f"$.actions[{i}]"
            line = lines[i] if i < len(lines) else None
            op = action['op']
            if op == 'offer':
                mode = ShareMode(action.get('mode', 'direct'))
                base = SharePolicy.for_mode(mode, config)
                policy = SharePolicy(action.get('ttl', base.ttl_seconds),
                                     action.get('max_downloads', base.max_downloads))
                scheme = action.get('url_scheme')
                url = agent(action['peer']).offer_file(
                    result.files[action['file']], policy, mode, action.get('name', action['file']),
                    url_scheme=scheme if scheme == ONION_SCHEME else None)
                alias = action.get('as', f"share{i}")
                result.shares[alias] = url
                share_files[alias] = action['file']
            elif op == 'fetch':
                outcome = _run_fetch(agent(action['peer']), result.shares[action['share']],
                                     result.files[share_files[action['share']]])
                expected = action.get('expect', 'ok')
                result.outcomes.append({'action': i, 'peer': action['peer'], 'share': action['share'],
                                        'outcome': outcome})
                if outcome != expected:
                    _fail(where, f"fetch outcome {outcome!r}, expected {expected!r}", line)
            elif op == 'wait':
                net.advance(action['ms'])
            elif op == 'browse':
                host = action['host']
                if host not in net.endpoints:
                    net.add_endpoint(host, 'none', role='web')
                net.http_request(action['peer'], host, 'GET', action.get('path', '/'),
                                 response_len=action.get('bytes', DEFAULT_BROWSE_BYTES))
            elif op == 'close':
                backend.close_paths(action.get('peer'))
            elif op == 'sweep':
                rendezvous.expire_sweep()
    finally:
        backend.close_paths()
        rendezvous.close()
    return result


def _run_fetch(peer: PeerAgent, url: str, source: bytes) -> str:
    try:
        data = peer.fetch(url)
    except InvalidTokenError:
        return 'invalid_token'
    except VerificationError:
        return 'verification_failed'
    except (TransferError, SimError):
        return 'transfer_failed'
    return 'ok' if data == source else 'verification_failed'
