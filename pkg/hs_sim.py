#!/usr/bin/env python3
"""
Hidden-service lifecycle simulation.

A service picks an Ed25519 identity, builds three introduction circuits,
signs a descriptor naming the last relay of each and publishes it to a
simulated DHT indexed by time period. A client looks the descriptor up, asks
an introduction relay to pass the rendezvous relay (RP) to the service, and
both sides build circuits that meet at the RP. Every relay on the rendezvous
route records only the hops adjacent to it.

The harvesting and directory-impersonation attacks run against the same DHT.
"""
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from covertpipe_utils import (
    CovertPipeError,
    EXIT_BAD_INPUT,
    EXIT_INVALID_TOKEN,
    EXIT_NETWORK,
    canonical_json,
)
from ident_derive import derive_onion_id
from scenario_runner import ScenarioError
from transport_sim import random_bytes

# --- Configuration ---
TIME_PERIOD_SECONDS = 3600
CIRCUIT_LENGTH = 3
INTRO_CIRCUITS = 3
HOP_DELAY_MS = 10
# --- End Configuration ---


class HsError(CovertPipeError):
    exit_code = EXIT_BAD_INPUT


class InsufficientRelaysError(HsError):
    pass


class DescriptorNotFoundError(HsError):
    exit_code = EXIT_INVALID_TOKEN


class DescriptorIntegrityError(HsError):
    exit_code = EXIT_INVALID_TOKEN


class IntroductionError(HsError):
    exit_code = EXIT_NETWORK


class RendezvousFailedError(HsError):
    exit_code = EXIT_NETWORK

    def __init__(self, message: str, circuit: Optional['RendezvousCircuit'] = None):
        super().__init__(message)
        self.circuit = circuit


@dataclass(frozen=True)
class HsIdentity:
    identity_key_public: bytes
    identity_key_secret: bytes = field(repr=False)

    @property
    def onion_id(self) -> str:
        return derive_onion_id(self.identity_key_public)

    def sign(self, data: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.identity_key_secret).sign(data)

    def verify(self, data: bytes, signature: bytes) -> bool:
        return verify_signature(self.identity_key_public, data, signature)


def verify_signature(public_key: bytes, data: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(bytes(signature), data)
        return True
    except (InvalidSignature, ValueError):
        return False


def gen_identity(rng: Optional[random.Random] = None) -> HsIdentity:
    """Fresh Ed25519 keypair; reproducible when ``rng`` is seeded."""
    private = Ed25519PrivateKey.from_private_bytes(random_bytes(rng, 32))
    public = private.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    secret = private.private_bytes(serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
                                   serialization.NoEncryption())
    return HsIdentity(public, secret)


@dataclass(frozen=True)
class Circuit:
    relays: Tuple[str, ...]

    def __post_init__(self):
        if len(self.relays) != CIRCUIT_LENGTH:
            raise ValueError(f"A circuit has exactly {CIRCUIT_LENGTH} relays")
        if len(set(self.relays)) != CIRCUIT_LENGTH:
            raise ValueError("Relays within a circuit must be distinct")

    @property
    def last(self) -> str:
        return self.relays[-1]


def build_intro_circuits(identity: HsIdentity, relay_pool: Iterable[str], rng: Optional[random.Random] = None,
                         distinct_across: bool = False) -> List[Circuit]:
    """Three 3-relay circuits; with ``distinct_across`` no relay is reused."""
    pool = sorted(set(relay_pool))
    rng = rng or random.SystemRandom()
    if len(pool) < CIRCUIT_LENGTH:
        raise InsufficientRelaysError(f"Need at least {CIRCUIT_LENGTH} relays, pool has {len(pool)}")
    needed = CIRCUIT_LENGTH * INTRO_CIRCUITS
    if distinct_across:
        if len(pool) < needed:
            raise InsufficientRelaysError(f"Distinct circuits need {needed} relays, pool has {len(pool)}")
        picked = rng.sample(pool, needed)
        return [Circuit(tuple(picked[i:i + CIRCUIT_LENGTH])) for i in range(0, needed, CIRCUIT_LENGTH)]
    return [Circuit(tuple(rng.sample(pool, CIRCUIT_LENGTH))) for _ in range(INTRO_CIRCUITS)]


@dataclass(frozen=True)
class HsDescriptor:
    onion_id: str
    intro_relays: Tuple[str, ...]
    time_period: int
    identity_key: bytes
    signature: bytes

    @staticmethod
    def signed_bytes(onion_id: str, intro_relays: Sequence[str], time_period: int, identity_key: bytes) -> bytes:
        return canonical_json({
            'onion_id': onion_id,
            'intro_relays': list(intro_relays),
            'time_period': time_period,
            'identity_key': bytes(identity_key).hex(),
        })

    def verify(self) -> bool:
        if derive_onion_id(self.identity_key) != self.onion_id:
            return False
        data = self.signed_bytes(self.onion_id, self.intro_relays, self.time_period, self.identity_key)
        return verify_signature(self.identity_key, data, self.signature)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'onion_id': self.onion_id,
            'intro_relays': list(self.intro_relays),
            'time_period': self.time_period,
            'identity_key': self.identity_key.hex(),
            'signature': self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'HsDescriptor':
        return cls(d['onion_id'], tuple(d['intro_relays']), d['time_period'],
                   bytes.fromhex(d['identity_key']), bytes.fromhex(d['signature']))


class SimDht:
    """Descriptor store keyed by (onion id, time period)."""

    def __init__(self, period_seconds: int = TIME_PERIOD_SECONDS):
        self.period_seconds = period_seconds
        self.store: Dict[Tuple[str, int], HsDescriptor] = {}
        self.node_ids: List[str] = []
        self.publications: List[Tuple[str, int, int]] = []
        self.hijacked: Set[str] = set()

    def time_period(self, now: int) -> int:
        return now // self.period_seconds

    def add_nodes(self, prefix: str, count: int) -> List[str]:
        start = len(self.node_ids)
        new = [f"{prefix}{start + i}" for i in range(count)]
        self.node_ids.extend(new)
        return new


def publish_descriptor(dht: SimDht, identity: HsIdentity, intro_relays: Sequence[str], now: int) -> HsDescriptor:
    """Sign and store a descriptor under the current time period."""
    period = dht.time_period(now)
    onion_id = identity.onion_id
    data = HsDescriptor.signed_bytes(onion_id, intro_relays, period, identity.identity_key_public)
    descriptor = HsDescriptor(onion_id, tuple(intro_relays), period, identity.identity_key_public,
                              identity.sign(data))
    dht.publications.append((onion_id, period, now))
    # impersonated directories swallow the upload
    if onion_id not in dht.hijacked:
        dht.store[(onion_id, period)] = descriptor
    return descriptor


def lookup_descriptor(dht: SimDht, onion_id: str, now: int) -> HsDescriptor:
    if onion_id in dht.hijacked:
        raise DescriptorNotFoundError(f"No descriptor for {onion_id}")
    descriptor = dht.store.get((onion_id, dht.time_period(now)))
    if descriptor is None:
        raise DescriptorNotFoundError(f"No descriptor for {onion_id} in period {dht.time_period(now)}")
    if descriptor.onion_id != onion_id or not descriptor.verify():
        raise DescriptorIntegrityError(f"Descriptor for {onion_id} does not verify")
    return descriptor


def harvest_dht(dht: SimDht, attacker_nodes: int, window: Tuple[int, int]) -> List[str]:
    """
    Onion ids published during the inclusive period window. Attacker nodes see
    every publication once they join the DHT.
    """
    if attacker_nodes <= 0:
        return []
    dht.add_nodes('attacker-', attacker_nodes)
    first, last = window
    return sorted({onion for onion, period, _ in dht.publications if first <= period <= last})


class ImpersonationHandle:
    def __init__(self, dht: SimDht, onion_id: str):
        self.dht = dht
        self.onion_id = onion_id
        self.active = True

    def release(self) -> None:
        if self.active:
            self.dht.hijacked.discard(self.onion_id)
            self.active = False


def impersonate_directories(dht: SimDht, onion_id: str) -> ImpersonationHandle:
    """Take over the directories responsible for ``onion_id``; they drop its descriptors."""
    dht.hijacked.add(onion_id)
    for key in [k for k in dht.store if k[0] == onion_id]:
        del dht.store[key]
    return ImpersonationHandle(dht, onion_id)


@dataclass(frozen=True)
class ObservationRecord:
    relay_id: str
    saw_prev: str
    saw_next: str
    ts_ms: int

    def to_json(self) -> str:
        return canonical_json({'relay_id': self.relay_id, 'saw_prev': self.saw_prev,
                               'saw_next': self.saw_next, 'ts_ms': self.ts_ms}).decode('utf-8')


@dataclass
class RendezvousCircuit:
    rp: str
    client_circuit: Circuit
    service_circuit: Circuit
    intro_relay: str
    client_id: str
    service_id: str
    ping_delivered: bool = False
    observations: List[ObservationRecord] = field(default_factory=list)

    def route(self) -> List[str]:
        """client, client relays, RP, service relays reversed, service."""
        return ([self.client_id] + list(self.client_circuit.relays)
                + list(reversed(self.service_circuit.relays[:-1])) + [self.service_id])


@dataclass
class HiddenService:
    identity: HsIdentity
    circuits: List[Circuit]
    descriptor: Optional[HsDescriptor] = None


class HsSimulation:
    """Relay pool, DHT and services for one scenario run."""

    def __init__(self, relay_pool: Iterable[str], seed: int = 0, dht: Optional[SimDht] = None,
                 distinct_across: bool = False):
        self.relay_pool: List[str] = sorted(set(relay_pool))
        self.rng = random.Random(seed)
        self.dht = dht or SimDht()
        self.distinct_across = distinct_across
        self.services: Dict[str, HiddenService] = {}
        self.rendezvous_log: List[RendezvousCircuit] = []
        self.departures: Dict[str, int] = {}

    def create_service(self, now: int) -> HiddenService:
        identity = gen_identity(self.rng)
        circuits = build_intro_circuits(identity, self.relay_pool, self.rng, self.distinct_across)
        service = HiddenService(identity, circuits)
        service.descriptor = publish_descriptor(self.dht, identity, [c.last for c in circuits], now)
        self.services[identity.onion_id] = service
        return service

    def republish(self, onion_id: str, now: int) -> HsDescriptor:
        service = self.services[onion_id]
        service.descriptor = publish_descriptor(self.dht, service.identity, [c.last for c in service.circuits], now)
        return service.descriptor

    def remove_relay(self, relay_id: str) -> None:
        if relay_id in self.relay_pool:
            self.relay_pool.remove(relay_id)

    def _pick(self, count: int, avoid: Set[str], fallback_avoid: Set[str]) -> List[str]:
        preferred = [r for r in self.relay_pool if r not in avoid]
        if len(preferred) >= count:
            return self.rng.sample(preferred, count)
        allowed = [r for r in self.relay_pool if r not in fallback_avoid]
        if len(allowed) < count:
            raise InsufficientRelaysError(f"Relay pool too small for {count} more relays")
        return self.rng.sample(allowed, count)

    def establish_rendezvous(self, client_id: str, onion_id: str, now: int) -> RendezvousCircuit:
        """Run introduction and rendezvous for a client; a ping cell must round-trip the route."""
        try:
            descriptor = lookup_descriptor(self.dht, onion_id, now)
        except (DescriptorNotFoundError, DescriptorIntegrityError) as e:
            raise IntroductionError(f"Cannot introduce to {onion_id}: {e}")
        service = self.services.get(onion_id)
        if service is None:
            raise IntroductionError(f"Service {onion_id} is not running")

        base = now * 1000
        for relay_id, departs in list(self.departures.items()):
            if departs <= base:
                self.remove_relay(relay_id)

        intro = self.rng.choice(list(descriptor.intro_relays))
        if intro not in self.relay_pool:
            raise IntroductionError(f"Introduction relay {intro} unreachable")

        service_intro = {r for c in service.circuits for r in c.relays}
        client_intro = self._pick(CIRCUIT_LENGTH - 1, service_intro | {intro}, {intro}) + [intro]
        intro_relays = service_intro | set(client_intro)

        rp = self._pick(1, intro_relays, set())[0]
        client_relays = self._pick(CIRCUIT_LENGTH - 1, intro_relays | {rp}, {rp})
        service_relays = self._pick(CIRCUIT_LENGTH - 1, intro_relays | {rp} | set(client_relays),
                                    {rp} | set(client_relays))

        # INTRODUCE: client circuit to the intro relay, then the service's own circuit back to it
        intro_circuit = next(c for c in service.circuits if c.last == intro)
        introduce_path = [client_id] + client_intro + list(reversed(intro_circuit.relays[:-1])) + [onion_id]
        delivered, ts, dropped_at = self._relay_message(introduce_path, base)
        if not delivered:
            raise IntroductionError(f"Introduction to {onion_id} dropped at relay {dropped_at}")

        rendezvous = RendezvousCircuit(
            rp=rp,
            client_circuit=Circuit(tuple(client_relays) + (rp,)),
            service_circuit=Circuit(tuple(service_relays) + (rp,)),
            intro_relay=intro,
            client_id=client_id,
            service_id=onion_id,
        )
        route = rendezvous.route()

        def observe(hop: int, at_ms: int) -> None:
            rendezvous.observations.append(ObservationRecord(route[hop], route[hop - 1], route[hop + 1], at_ms))

        delivered, ts, dropped_at = self._relay_message(route, ts, observe)
        if delivered:
            delivered, ts, dropped_at = self._relay_message(route[::-1], ts)
        rendezvous.ping_delivered = delivered
        self.rendezvous_log.append(rendezvous)
        if not delivered:
            raise RendezvousFailedError(
                f"Ping between {client_id} and {onion_id} lost at relay {dropped_at}", rendezvous)
        return rendezvous

    def schedule_departure(self, relay_id: str, at_ms: int) -> None:
        """The relay stops forwarding from ``at_ms`` on and leaves the pool when that is noticed."""
        self.departures[relay_id] = at_ms

    def _relay_message(self, path: Sequence[str], start_ms: int,
                       on_hop: Optional[Callable[[int, int], None]] = None) -> Tuple[bool, int, Optional[str]]:
        """Forward a cell along ``path`` one relay per hop; (delivered, end ts, relay that dropped it)."""
        ts = start_ms
        for hop in range(1, len(path) - 1):
            ts += HOP_DELAY_MS
            relay_id = path[hop]
            departs = self.departures.get(relay_id)
            if departs is not None and ts >= departs:
                self.remove_relay(relay_id)
            if relay_id not in self.relay_pool:
                return False, ts, relay_id
            if on_hop is not None:
                on_hop(hop, ts)
        return True, ts + HOP_DELAY_MS, None

    def observation_lines(self) -> List[str]:
        return [o.to_json() for r in self.rendezvous_log for o in r.observations]


def _parse_window(value: Any) -> Tuple[int, int]:
    try:
        if isinstance(value, str):
            first, _, last = value.partition(':')
            return int(first), int(last or first)
        first, last = value
        return int(first), int(last)
    except (TypeError, ValueError):
        raise ScenarioError(f"window must be 'first:last' or [first, last], got {value!r}")


def _named(table: Dict[str, Any], name: Any, what: str) -> Any:
    try:
        return table[name]
    except (KeyError, TypeError):
        raise ScenarioError(f"Unknown {what} {name!r}")


def _entries(doc: Dict[str, Any], key: str) -> List[Dict[str, Any]]:
    entries = doc.get(key, [])
    if not isinstance(entries, list) or not all(isinstance(e, dict) for e in entries):
        raise ScenarioError(f"{key} must be a list of objects")
    return entries


def run_hs_scenario(doc: Dict[str, Any]) -> Dict[str, Any]:
    """
    Run an hs scenario document and return a JSON-ready report.

    Keys: seed, relays (count or list), services ([{name, publish_at}]),
    attacker_nodes, window ("first:last" periods), impersonate ([name]),
    departures ({relay: ms}), rendezvous ([{client, service, at, release,
    republish}]).
    """
    if not isinstance(doc, dict):
        raise ScenarioError("hs scenario must be a JSON object")
    relays = doc.get('relays', 20)
    pool = [f"relay{i}" for i in range(relays)] if isinstance(relays, int) else list(relays)
    sim = HsSimulation(pool, seed=doc.get('seed', 0), distinct_across=doc.get('distinct_across', False))
    departures = doc.get('departures', {})
    if not isinstance(departures, dict) or not all(isinstance(v, int) for v in departures.values()):
        raise ScenarioError("departures must map relay ids to integer ms")
    for relay_id, at_ms in departures.items():
        sim.schedule_departure(relay_id, at_ms)

    names: Dict[str, str] = {}
    for entry in _entries(doc, 'services'):
        if 'name' not in entry:
            raise ScenarioError("Every service needs a name")
        service = sim.create_service(entry.get('publish_at', 0))
        names[entry['name']] = service.identity.onion_id

    report: Dict[str, Any] = {'services': names, 'rendezvous': []}
    if 'window' in doc:
        report['harvested'] = harvest_dht(sim.dht, doc.get('attacker_nodes', 1), _parse_window(doc['window']))
    handles = {name: impersonate_directories(sim.dht, _named(names, name, 'service'))
               for name in doc.get('impersonate', [])}

    for attempt in _entries(doc, 'rendezvous'):
        onion = _named(names, attempt.get('service'), 'service')
        for name in attempt.get('release', []):
            _named(handles, name, 'impersonation handle').release()
        if attempt.get('republish'):
            sim.republish(onion, attempt.get('at', 0))
        try:
            circuit = sim.establish_rendezvous(attempt.get('client', 'client'), onion, attempt.get('at', 0))
            report['rendezvous'].append({'service': attempt['service'], 'ok': True, 'rp': circuit.rp})
        except HsError as e:
            report['rendezvous'].append({'service': attempt['service'], 'ok': False, 'error': str(e)})
    report['observations'] = [json.loads(line) for line in sim.observation_lines()]
    return report
