import dataclasses
import os
import random
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from ident_derive import derive_onion_id
from scenario_runner import ScenarioError
from hs_sim import (
    Circuit,
    DescriptorIntegrityError,
    DescriptorNotFoundError,
    HsDescriptor,
    HsSimulation,
    InsufficientRelaysError,
    IntroductionError,
    RendezvousFailedError,
    SimDht,
    build_intro_circuits,
    gen_identity,
    harvest_dht,
    impersonate_directories,
    lookup_descriptor,
    publish_descriptor,
    run_hs_scenario,
)

RELAYS = [f"relay{i}" for i in range(20)]


def test_identity_is_reproducible_and_signs():
    a, b = gen_identity(random.Random(5)), gen_identity(random.Random(5))
    assert a == b
    assert a.onion_id == derive_onion_id(a.identity_key_public)
    assert len(a.onion_id) == 16
    signature = a.sign(b"descriptor")
    assert a.verify(b"descriptor", signature)
    assert not a.verify(b"descriptor!", signature)
    assert not gen_identity(random.Random(6)).verify(b"descriptor", signature)


def test_circuit_invariants():
    with pytest.raises(ValueError):
        Circuit(('r1', 'r2'))
    with pytest.raises(ValueError):
        Circuit(('r1', 'r1', 'r2'))
    assert Circuit(('r1', 'r2', 'r3')).last == 'r3'


def test_intro_circuits_distinct_across_nine_relays():
    identity = gen_identity(random.Random(1))
    pool = RELAYS[:9]
    circuits = build_intro_circuits(identity, pool, random.Random(2), distinct_across=True)
    assert len(circuits) == 3
    used = [r for c in circuits for r in c.relays]
    assert sorted(used) == sorted(pool)


def test_intro_circuits_pool_too_small():
    identity = gen_identity(random.Random(1))
    with pytest.raises(InsufficientRelaysError):
        build_intro_circuits(identity, RELAYS[:8], random.Random(2), distinct_across=True)
    with pytest.raises(InsufficientRelaysError):
        build_intro_circuits(identity, RELAYS[:2], random.Random(2))
    circuits = build_intro_circuits(identity, RELAYS[:3], random.Random(2))
    assert all(sorted(c.relays) == RELAYS[:3] for c in circuits)


def test_descriptor_signature_verifies():
    dht = SimDht()
    identity = gen_identity(random.Random(3))
    descriptor = publish_descriptor(dht, identity, ['relay1', 'relay2', 'relay3'], now=100)
    assert descriptor.verify()
    assert descriptor.time_period == 0
    assert HsDescriptor.from_dict(descriptor.to_dict()) == descriptor
    assert not dataclasses.replace(descriptor, intro_relays=('relay1', 'relay2', 'relay9')).verify()
    assert not dataclasses.replace(descriptor, time_period=1).verify()


def test_lookup_by_time_period():
    dht = SimDht()
    identity = gen_identity(random.Random(3))
    publish_descriptor(dht, identity, ['relay1', 'relay2', 'relay3'], now=0)
    assert lookup_descriptor(dht, identity.onion_id, 3599).onion_id == identity.onion_id
    with pytest.raises(DescriptorNotFoundError) as excinfo:
        lookup_descriptor(dht, identity.onion_id, 3600)
    assert excinfo.value.exit_code == 2
    with pytest.raises(DescriptorNotFoundError):
        lookup_descriptor(dht, 'a' * 16, 0)


def test_lookup_rejects_tampered_descriptor():
    dht = SimDht()
    identity = gen_identity(random.Random(3))
    descriptor = publish_descriptor(dht, identity, ['relay1', 'relay2', 'relay3'], now=0)
    dht.store[(identity.onion_id, 0)] = dataclasses.replace(descriptor, intro_relays=('evil1', 'evil2', 'evil3'))
    with pytest.raises(DescriptorIntegrityError):
        lookup_descriptor(dht, identity.onion_id, 0)


@pytest.mark.parametrize("window,expected", [((0, 0), ['early']), ((0, 1), ['early']), ((0, 2), ['early', 'late']),
                                             ((2, 2), ['late']), ((3, 9), [])])
def test_harvest_window_is_inclusive(window, expected):
    dht = SimDht()
    ids = {}
    for name, seed, now in (('early', 1, 10), ('late', 2, 7300)):
        identity = gen_identity(random.Random(seed))
        publish_descriptor(dht, identity, ['r1', 'r2', 'r3'], now)
        ids[name] = identity.onion_id
    assert harvest_dht(dht, 2, window) == sorted(ids[n] for n in expected)
    assert len([n for n in dht.node_ids if n.startswith('attacker-')]) == 2


def test_harvest_without_attackers():
    dht = SimDht()
    publish_descriptor(dht, gen_identity(random.Random(1)), ['r1', 'r2', 'r3'], 0)
    assert harvest_dht(dht, 0, (0, 10)) == []


def test_impersonation_blocks_lookup_until_release_and_republish():
    sim = HsSimulation(RELAYS, seed=4)
    service = sim.create_service(now=0)
    onion = service.identity.onion_id
    handle = impersonate_directories(sim.dht, onion)

    with pytest.raises(DescriptorNotFoundError):
        lookup_descriptor(sim.dht, onion, 10)
    with pytest.raises(IntroductionError) as excinfo:
        sim.establish_rendezvous('alice', onion, 10)
    assert excinfo.value.exit_code == 3

    sim.republish(onion, 20)
    with pytest.raises(DescriptorNotFoundError):
        lookup_descriptor(sim.dht, onion, 20)

    handle.release()
    with pytest.raises(DescriptorNotFoundError):
        lookup_descriptor(sim.dht, onion, 30)
    sim.republish(onion, 30)
    assert sim.establish_rendezvous('alice', onion, 30).ping_delivered


def test_rendezvous_observations_stay_local():
    sim = HsSimulation(RELAYS, seed=9)
    onion = sim.create_service(now=0).identity.onion_id
    for i in range(20):
        circuit = sim.establish_rendezvous(f"client{i}", onion, 100 + i)
        route = circuit.route()
        assert route[0] == f"client{i}" and route[-1] == onion
        assert len(set(route)) == len(route)
        assert circuit.rp not in {r for c in sim.services[onion].circuits for r in c.relays}
        assert circuit.rp != circuit.intro_relay
        assert len(circuit.observations) == len(route) - 2
        for hop, record in enumerate(circuit.observations, start=1):
            assert (record.saw_prev, record.relay_id, record.saw_next) == tuple(route[hop - 1:hop + 2])
            assert {record.saw_prev, record.saw_next} != {f"client{i}", onion}
            assert record.relay_id in RELAYS


def test_rendezvous_fails_when_intro_relays_gone():
    sim = HsSimulation(RELAYS, seed=2)
    service = sim.create_service(now=0)
    for circuit in service.circuits:
        sim.remove_relay(circuit.last)
    with pytest.raises(IntroductionError):
        sim.establish_rendezvous('alice', service.identity.onion_id, 5)


def test_unknown_service_cannot_be_introduced():
    sim = HsSimulation(RELAYS, seed=2)
    with pytest.raises(IntroductionError):
        sim.establish_rendezvous('alice', 'b' * 16, 0)


def test_run_hs_scenario():
    report = run_hs_scenario({
        'seed': 1,
        'relays': 20,
        'services': [{'name': 'blog', 'publish_at': 0}, {'name': 'shop', 'publish_at': 4000}],
        'attacker_nodes': 2,
        'window': '0:0',
        'impersonate': ['blog'],
        'rendezvous': [
            {'client': 'alice', 'service': 'blog', 'at': 10},
            {'client': 'alice', 'service': 'blog', 'at': 20, 'release': ['blog'], 'republish': True},
            {'client': 'bob', 'service': 'shop', 'at': 4100},
        ],
    })
    assert report['harvested'] == [report['services']['blog']]
    assert [r['ok'] for r in report['rendezvous']] == [False, True, True]
    assert len(report['observations']) == 10
    assert set(report['observations'][0]) == {'relay_id', 'saw_prev', 'saw_next', 'ts_ms'}


def test_relay_knowledge_over_seeded_runs():
    for seed in range(100):
        sim = HsSimulation(RELAYS, seed=seed)
        onion = sim.create_service(now=0).identity.onion_id
        circuit = sim.establish_rendezvous('client', onion, 60)
        for record in circuit.observations:
            assert not {'client', onion} <= {record.saw_prev, record.relay_id, record.saw_next}
        assert [o.relay_id for o in circuit.observations] == circuit.route()[1:-1]


def test_ping_lost_when_route_relay_departs():
    sim = HsSimulation(RELAYS, seed=9)
    service = sim.create_service(now=0)
    onion = service.identity.onion_id
    intro_side = {r for c in service.circuits for r in c.relays}
    # introduction finishes 60 ms in, the ping reaches its first relay at 70 ms
    for relay in RELAYS:
        if relay not in intro_side:
            sim.schedule_departure(relay, 100 * 1000 + 65)

    with pytest.raises(RendezvousFailedError) as excinfo:
        sim.establish_rendezvous('alice', onion, 100)
    assert excinfo.value.exit_code == 3
    circuit = excinfo.value.circuit
    assert not circuit.ping_delivered
    assert circuit.observations == []
    assert circuit.route()[1] not in sim.relay_pool
    assert sim.rendezvous_log == [circuit]


def test_introduction_dropped_when_service_circuit_breaks():
    sim = HsSimulation(RELAYS, seed=3, distinct_across=True)
    service = sim.create_service(now=0)
    for circuit in service.circuits:
        sim.remove_relay(circuit.relays[0])
    with pytest.raises(IntroductionError) as excinfo:
        sim.establish_rendezvous('alice', service.identity.onion_id, 5)
    assert 'dropped at relay' in str(excinfo.value)
    assert sim.rendezvous_log == []


def test_ping_survives_departures_after_round_trip():
    sim = HsSimulation(RELAYS, seed=9)
    onion = sim.create_service(now=0).identity.onion_id
    for relay in RELAYS:
        sim.schedule_departure(relay, 100 * 1000 + 10_000)
    circuit = sim.establish_rendezvous('alice', onion, 100)
    assert circuit.ping_delivered
    assert len(circuit.observations) == len(circuit.route()) - 2
    assert [o.ts_ms for o in circuit.observations] == sorted(o.ts_ms for o in circuit.observations)


def test_scenario_with_departed_relays_reports_failure():
    report = run_hs_scenario({
        'seed': 9,
        'relays': 20,
        'services': [{'name': 'blog'}],
        'departures': {f"relay{i}": 0 for i in range(20)},
        'rendezvous': [{'client': 'alice', 'service': 'blog', 'at': 1}],
    })
    assert [r['ok'] for r in report['rendezvous']] == [False]


@pytest.mark.parametrize("doc", [
    {'services': [{'name': 'blog'}], 'rendezvous': [{'service': 'shop'}]},
    {'services': [{'name': 'blog'}], 'rendezvous': [{'service': 'blog', 'release': ['shop']}]},
    {'services': [{'name': 'blog'}], 'impersonate': ['shop']},
    {'services': [{'publish_at': 0}]},
    {'services': 'blog'},
    {'window': 'first:last'},
    {'departures': {'relay0': 'soon'}},
    [],
])
def test_scenario_input_errors(doc):
    with pytest.raises(ScenarioError) as excinfo:
        run_hs_scenario(doc)
    assert excinfo.value.exit_code == 5
