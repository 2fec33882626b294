#!/usr/bin/env python3
"""
Control script for covertpipe.
Single entry point for the rendezvous server, one-time link transfers, the
network simulator, the hidden-service simulator and trace forensics.
"""
import argparse
import hashlib
import json
import os
import sys
import time
from typing import Any, Dict, List, Optional

from covertpipe_utils import (
    CovertPipeError,
    EXIT_NETWORK,
    EXIT_OK,
    create_event_schema,
    create_required_directories,
    load_config,
    log,
    parse_host_port,
)
from detector import (
    LABEL_BENIGN,
    LABEL_CLEARTEXT,
    classify,
    compute_flow_stats,
    correlate,
    emit_blacklist,
    ingest,
    reconstruct_cleartext,
    sample,
)
from hs_sim import (
    DescriptorNotFoundError,
    HsError,
    HsSimulation,
    harvest_dht,
    impersonate_directories,
    lookup_descriptor,
    run_hs_scenario,
)
from ident_derive import ContentReadError, parse_share_url
from peer_agent import PeerAgent, UploadState, flip_bit
from peer_link import TcpTransferBackend
from rendezvous_core import Rendezvous, ShareMode, SharePolicy
from rendezvous_wire import RendezvousClient, RendezvousServer, WireError
from scenario_runner import ScenarioError, run_scenario

# --- Configuration ---
COMPONENT_ID = 'control'
SEND_POLL_SECONDS = 1.0
HS_COMMANDS = ['publish', 'lookup', 'rendezvous', 'harvest', 'impersonate']
DEFAULT_HS_RELAYS = 20
# --- End Configuration ---


class FaultInjectingClient(RendezvousClient):
    """Flips one bit of every relay blob; exercises the digest check in recv."""

    def relay_get(self, key: str, now: Optional[int] = None) -> bytes:
        return flip_bit(super().relay_get(key, now))


class CovertPipeController:
    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        self.config = load_config(config_path, overrides)
        # seeders left running by `send --no-wait` when driven in-process
        self.backends: List[TcpTransferBackend] = []

    def _server_address(self, server: Optional[str]):
        return parse_host_port(server or self.config['listen'])

    # --- serve ---

    def cmd_serve(self, args: argparse.Namespace) -> int:
        """Host the rendezvous service on the framed wire protocol until interrupted."""
        host, port = self._server_address(None)
        event_db = self.config.get('event_db')
        if event_db:
            create_event_schema(event_db)
        service = Rendezvous(host=host, port=port, config=self.config, event_db=event_db)
        try:
            server = RendezvousServer((host, port), service)
        except OSError as e:
            service.close()
            raise WireError(f"Could not bind {host}:{port}: {e}")
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            log(COMPONENT_ID, "Interrupted, shutting down")
        finally:
            server.server_close()
        return EXIT_OK

    # --- send / recv ---

    def cmd_send(self, args: argparse.Namespace) -> int:
        if not args.target:
            raise ContentReadError("send needs a file to share")
        try:
            with open(args.target, 'rb') as f:
                content = f.read()
        except OSError as e:
            raise ContentReadError(f"Cannot read {args.target}: {e}")

        mode = ShareMode(args.mode)
        base = SharePolicy.for_mode(mode, self.config)
        policy = SharePolicy(
            base.ttl_seconds if args.ttl is None else args.ttl,
            base.max_downloads if args.max_downloads is None else args.max_downloads,
        )
        policy.validate()

        host, port = self._server_address(args.server)
        client = RendezvousClient(host, port)
        backend = TcpTransferBackend(args.seed_host, args.seed_port, args.advertise)
        if mode is ShareMode.DIRECT:
            backend.bind()
        agent = PeerAgent('sender', client, backend, chunk_size=self.config['chunk_size'], verbose=True)
        try:
            url = agent.offer_file(content, policy, mode, name=os.path.basename(args.target))
        except CovertPipeError:
            backend.shutdown()
            client.close()
            raise
        print(url, flush=True)

        if mode is ShareMode.RELAY or args.no_wait:
            client.close()
            if mode is ShareMode.DIRECT:
                self.backends.append(backend)
            return EXIT_OK

        token = parse_share_url(url).token
        log(COMPONENT_ID, f"Seeding until {policy.max_downloads} download(s) complete or the link expires")
        try:
            while agent.poll_upload(token) not in (UploadState.COMPLETE, UploadState.EXPIRED):
                time.sleep(SEND_POLL_SECONDS)
            log(COMPONENT_ID, f"Share {token} {agent.uploads[token].state.value}")
        except KeyboardInterrupt:
            log(COMPONENT_ID, "Interrupted, no longer seeding")
        finally:
            backend.shutdown()
            client.close()
        return EXIT_OK

    def cmd_recv(self, args: argparse.Namespace) -> int:
        if not args.target:
            raise ContentReadError("recv needs a share URL")
        share = parse_share_url(args.target)
        server = args.server
        if server is None and share.port is not None:
            server = f"{share.host}:{share.port}"
        host, port = self._server_address(server)

        client_cls = FaultInjectingClient if args.inject_fault else RendezvousClient
        backend = TcpTransferBackend(inject_fault=args.inject_fault)
        with client_cls(host, port) as client:
            agent = PeerAgent(f"recv-{os.getpid()}", client, backend,
                              chunk_size=self.config['chunk_size'], verbose=True, reseed=False)
            data = agent.fetch(args.target)
            name = agent.downloads[-1].descriptor.name

        out = args.out or os.path.basename(name) or share.token
        try:
            with open(out, 'wb') as f:
                f.write(data)
        except OSError as e:
            raise ContentReadError(f"Cannot write {out}: {e}")
        log(COMPONENT_ID, f"Wrote {len(data)} bytes to {out} (sha256 {hashlib.sha256(data).hexdigest()})")
        print(out)
        return EXIT_OK

    # --- simulate / detect ---

    def cmd_simulate(self, args: argparse.Namespace) -> int:
        if not args.target:
            raise ScenarioError("simulate needs a scenario file")
        result = run_scenario(args.target, seed=args.seed, config=self.config)
        if args.trace:
            count = result.write_trace(args.trace)
            log(COMPONENT_ID, f"Wrote {count} events to {args.trace}")
        summary = result.summary()
        if args.stats:
            summary['outcomes'] = result.outcomes
            summary['shares'] = result.shares
        print(json.dumps(summary, sort_keys=True))
        return EXIT_OK

    def cmd_detect(self, args: argparse.Namespace) -> int:
        if not args.target:
            raise ScenarioError("detect needs a trace file")
        threshold = self.config['stun_threshold_pairs_per_s']
        trace = ingest(args.target)
        if trace.malformed:
            log(COMPONENT_ID, f"Skipped {len(trace.malformed)} malformed line(s)")

        verdicts = classify(trace, threshold_pairs_per_s=threshold)
        for verdict in verdicts:
            print(verdict.to_json())

        if args.stats:
            for stats in compute_flow_stats(trace).values():
                log(COMPONENT_ID, json.dumps(stats.to_dict(), sort_keys=True))

        if args.emit_blacklist:
            rules = emit_blacklist(verdicts)
            with open(args.emit_blacklist, 'w', encoding='utf-8') as f:
                for rule in rules:
                    f.write(f"{rule.pattern}\t# {rule.rationale}\n")
            log(COMPONENT_ID, f"Wrote {len(rules)} blacklist rule(s) to {args.emit_blacklist}")

        if args.reconstruct:
            if not create_required_directories(args.reconstruct):
                raise ContentReadError(f"Cannot create {args.reconstruct}")
            for verdict in verdicts:
                if verdict.label != LABEL_CLEARTEXT:
                    continue
                data = reconstruct_cleartext(trace, verdict.flow)
                if data is None:
                    continue
                path = os.path.join(args.reconstruct, f"{verdict.flow.a}_{verdict.flow.b}.bin")
                with open(path, 'wb') as f:
                    f.write(data)
                log(COMPONENT_ID, f"Recovered {len(data)} bytes to {path} "
                                  f"(sha256 {hashlib.sha256(data).hexdigest()})")

        if args.correlate:
            other = ingest(args.correlate)
            seed = args.seed or 0
            if args.sample_rate is not None:
                trace = sample(trace, args.sample_rate, seed)
                other = sample(other, args.sample_rate, seed + 1)
            report = correlate(trace, other)
            print(json.dumps({'correlation': report.to_dict()}, sort_keys=True))

        flagged = sum(1 for v in verdicts if v.label != LABEL_BENIGN)
        log(COMPONENT_ID, f"{len(verdicts)} flow(s), {flagged} flagged")
        return EXIT_OK

    # --- hidden services ---

    def cmd_hs(self, args: argparse.Namespace) -> int:
        if args.scenario:
            try:
                with open(args.scenario, 'r', encoding='utf-8') as f:
                    doc = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise ScenarioError(f"{args.scenario}: {e}")
            report = run_hs_scenario(doc)
            print(json.dumps(report, sort_keys=True))
            return EXIT_OK if all(r['ok'] for r in report['rendezvous']) else EXIT_NETWORK

        if args.target not in HS_COMMANDS:
            raise HsError(f"hs needs one of: {', '.join(HS_COMMANDS)}")
        if args.services < 1:
            raise HsError("--services must be at least 1")
        seed = args.seed or 0
        sim = HsSimulation([f"relay{i}" for i in range(args.relays)], seed=seed)
        services = [sim.create_service(args.at) for _ in range(args.services)]
        first = services[0].identity.onion_id

        if args.target == 'publish':
            for service in services:
                print(json.dumps(service.descriptor.to_dict(), sort_keys=True))
        elif args.target == 'lookup':
            when = args.at if args.lookup_at is None else args.lookup_at
            descriptor = lookup_descriptor(sim.dht, args.onion or first, when)
            print(json.dumps(descriptor.to_dict(), sort_keys=True))
        elif args.target == 'rendezvous':
            if args.impersonate:
                impersonate_directories(sim.dht, first)
            when = args.at if args.lookup_at is None else args.lookup_at
            circuit = sim.establish_rendezvous(args.client, args.onion or first, when)
            print(json.dumps({'rp': circuit.rp, 'intro_relay': circuit.intro_relay,
                              'route': circuit.route()}, sort_keys=True))
            for line in sim.observation_lines():
                print(line)
        elif args.target == 'harvest':
            first_period, _, last_period = (args.window or '').partition(':')
            period = sim.dht.time_period(args.at)
            window = (int(first_period or period), int(last_period or first_period or period))
            ids = harvest_dht(sim.dht, args.attacker_nodes, window)
            print(json.dumps({'count': len(ids), 'onion_ids': ids}, sort_keys=True))
        elif args.target == 'impersonate':
            impersonate_directories(sim.dht, first)
            try:
                lookup_descriptor(sim.dht, first, args.at)
                lookup = 'found'
            except DescriptorNotFoundError:
                lookup = 'not_found'
            print(json.dumps({'onion_id': first, 'hijacked': True, 'lookup': lookup}, sort_keys=True))
        return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='covertpipe',
        description='covertpipe one-time link sharing, simulation and forensics',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s serve --listen 127.0.0.1:7000              # Run the rendezvous server
  %(prog)s send report.pdf --mode direct              # Share a file, seed until downloaded
  %(prog)s send report.pdf --mode relay --ttl 600     # Stage a file on the relay
  %(prog)s recv http://127.0.0.1:7000/k3v9q --out r.pdf
  %(prog)s simulate scenarios/sharefest.json --trace t.ndjson --seed 7
  %(prog)s detect t.ndjson --emit-blacklist bl.txt --reconstruct out/
  %(prog)s detect a.ndjson --correlate b.ndjson --sample-rate 0.0005
  %(prog)s hs publish --services 3                    # Print signed descriptors
  %(prog)s hs rendezvous --impersonate                # Exits 3: directories hijacked
  %(prog)s hs --scenario hs.json

Exit codes: 0 ok, 2 invalid/expired token or lookup miss, 3 network/path/bind
failure, 4 verification failure, 5 bad input or config.
        """
    )
    parser.add_argument('command', choices=['serve', 'send', 'recv', 'simulate', 'detect', 'hs'],
                        help='Command to execute')
    parser.add_argument('target', nargs='?',
                        help='File (send), URL (recv), scenario (simulate), trace (detect) '
                             f"or hs subcommand ({'|'.join(HS_COMMANDS)})")
    parser.add_argument('--config', help='JSON config file (default: $COVERTPIPE_CONFIG)')
    parser.add_argument('--seed', type=int, help='Seed for deterministic runs')

    serve = parser.add_argument_group('serve')
    serve.add_argument('--listen', help='host:port for the rendezvous server')
    serve.add_argument('--event-db', help='SQLite file for the service event journal')

    send = parser.add_argument_group('send/recv')
    send.add_argument('--mode', choices=[m.value for m in ShareMode], default='direct', help='Share mode')
    send.add_argument('--ttl', type=int, help='Link lifetime in seconds')
    send.add_argument('--max-downloads', type=int, help='Download grants before the link is exhausted')
    send.add_argument('--server', help='Rendezvous server host:port')
    send.add_argument('--no-wait', action='store_true', help='Print the URL and return without seeding')
    send.add_argument('--chunk-size', type=int, help='Chunk size in bytes (recv must match send)')
    send.add_argument('--seed-host', default='127.0.0.1', help='Address the seeder listens on')
    send.add_argument('--seed-port', type=int, default=0, help='Seeder port (0 picks a free one)')
    send.add_argument('--advertise', help='Host other peers should use to reach the seeder')
    send.add_argument('--out', help='Where recv writes the file')
    send.add_argument('--inject-fault', action='store_true', help='Flip a bit of every received frame')

    sim = parser.add_argument_group('simulate/detect')
    sim.add_argument('--trace', help='Write the simulated trace (NDJSON)')
    sim.add_argument('--stats', action='store_true', help='Print extra per-run or per-flow statistics')
    sim.add_argument('--stun-threshold', type=float, help='STUN pairs/s that flag a flow')
    sim.add_argument('--emit-blacklist', help='Write host globs for flagged flows')
    sim.add_argument('--reconstruct', help='Directory for recovered cleartext transfers')
    sim.add_argument('--correlate', help='Second trace to correlate flows against')
    sim.add_argument('--sample-rate', type=float, help='Sample both traces before correlating')

    hs = parser.add_argument_group('hs')
    hs.add_argument('--scenario', help='Run an hs scenario JSON document')
    hs.add_argument('--relays', type=int, default=DEFAULT_HS_RELAYS, help='Relay pool size')
    hs.add_argument('--services', type=int, default=1, help='Hidden services to create')
    hs.add_argument('--at', type=int, default=0, help='Publication time in seconds')
    hs.add_argument('--lookup-at', type=int, help='Lookup/rendezvous time (default: --at)')
    hs.add_argument('--onion', help='Onion id to look up (default: first service)')
    hs.add_argument('--client', default='client', help='Client id for rendezvous')
    hs.add_argument('--impersonate', action='store_true', help='Hijack the directories before rendezvous')
    hs.add_argument('--attacker-nodes', type=int, default=1, help='Attacker DHT nodes for harvest')
    hs.add_argument('--window', help='Harvest window first:last time periods')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        'listen': args.listen,
        'event_db': args.event_db,
        'chunk_size': args.chunk_size,
        'stun_threshold_pairs_per_s': args.stun_threshold,
    }
    try:
        controller = CovertPipeController(args.config, overrides)
        return getattr(controller, f"cmd_{args.command}")(args)
    except CovertPipeError as e:
        log(COMPONENT_ID, f"ERROR: {e}")
        return e.exit_code
    except OSError as e:
        log(COMPONENT_ID, f"ERROR: {e}")
        return EXIT_NETWORK


if __name__ == "__main__":
    sys.exit(main())
