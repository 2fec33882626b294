#!/usr/bin/env python3
"""
Forensic analysis of covertpipe traces.

Reads NDJSON FlowEvent traces, groups events into flows (unordered endpoint
pair plus transport), fingerprints STUN keepalive cadence, labels each flow
covert_p2p_suspected, cleartext_transfer or benign, recovers cleartext
payloads, samples traces 1-in-N, correlates sampled traces from two vantage
points and turns non-benign verdicts into firewall host globs.
"""
import base64
import binascii
import json
import re
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, TextIO, Tuple, Union

import numpy as np

from covertpipe_utils import CovertPipeError, DEFAULT_CONFIG, EXIT_BAD_INPUT, canonical_json
from transport_sim import FlowEvent, TraceFormatError

# --- Configuration ---
DEFAULT_WINDOW_S = 10
DEFAULT_THRESHOLD = DEFAULT_CONFIG['stun_threshold_pairs_per_s']
PAIR_MATCH_MS = 1000
MAX_MALFORMED_RATIO = 0.01
DEFAULT_SAMPLE_RATE = 1 / 2000
CORRELATION_WINDOW_S = 5
SAMPLE_BLOCK = 65536
MAX_REPORTED_LINES = 20
# --- End Configuration ---

TOKEN_REQUEST_RE = re.compile(
    r'(GET|POST) (/get\.php\?key=[1-9][0-9]{14}|/put\.py\?key=[1-9][0-9]{14}|/[a-z0-9]{5})')
OFFSET_RE = re.compile(r'offset=(\d+)')
IPV4_RE = re.compile(r'\d{1,3}(\.\d{1,3}){3}')

LABEL_COVERT = 'covert_p2p_suspected'
LABEL_CLEARTEXT = 'cleartext_transfer'
LABEL_BENIGN = 'benign'


class DetectorError(CovertPipeError):
    exit_code = EXIT_BAD_INPUT


class IngestionError(DetectorError):
    def __init__(self, message: str, lines: List[int]):
        super().__init__(message)
        self.lines = lines


class CorrelationError(DetectorError):
    pass


class SamplingError(DetectorError):
    pass


class PartialReconstructionWarning(UserWarning):
    pass


class FlowKey(NamedTuple):
    a: str
    b: str
    transport: str

    @classmethod
    def of(cls, src: str, dst: str, transport: str) -> 'FlowKey':
        a, b = (src, dst) if src <= dst else (dst, src)
        return cls(a, b, transport)

    def __str__(self) -> str:
        return f"{self.a}<->{self.b}/{self.transport}"

    def to_dict(self) -> Dict[str, str]:
        return {'a': self.a, 'b': self.b, 'transport': self.transport}


def flow_of(event: FlowEvent) -> FlowKey:
    return FlowKey.of(event.src, event.dst, event.transport)


@dataclass
class TraceLog:
    events: List[FlowEvent]
    malformed: List[int] = field(default_factory=list)
    total_lines: int = 0

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[FlowEvent]:
        return iter(self.events)

    def flows(self) -> Dict[FlowKey, List[FlowEvent]]:
        grouped: Dict[FlowKey, List[FlowEvent]] = defaultdict(list)
        for event in self.events:
            grouped[flow_of(event)].append(event)
        return dict(grouped)

    def to_lines(self) -> List[str]:
        return [e.to_json() for e in self.events]


def _lines(source: Union[str, TextIO, Iterable[str]]) -> Iterator[str]:
    if isinstance(source, str):
        with open(source, 'r', encoding='utf-8') as f:
            yield from f
    else:
        yield from source


def ingest(source: Union[str, TextIO, Iterable[str]], max_malformed_ratio: float = MAX_MALFORMED_RATIO) -> TraceLog:
    """Parse and validate a trace; more than 1% bad lines is an error."""
    events = []
    malformed = []
    total = 0
    try:
        for number, line in enumerate(_lines(source), start=1):
            if not line.strip():
                continue
            total += 1
            try:
                events.append(FlowEvent.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TraceFormatError, TypeError):
                malformed.append(number)
    except OSError as e:
        raise DetectorError(f"Could not read trace: {e}")
    if total and len(malformed) / total > max_malformed_ratio:
        shown = ', '.join(str(n) for n in malformed[:MAX_REPORTED_LINES])
        raise IngestionError(f"{len(malformed)} of {total} trace lines malformed (lines {shown})", malformed)
    events.sort(key=lambda e: e.ts_ms)
    return TraceLog(events, malformed, total)


def match_stun_pairs(events: Iterable[FlowEvent]) -> List[int]:
    """Bind timestamps of matched bind/confirm pairs on one flow."""
    unmatched: List[int] = []
    matched: List[int] = []
    for event in sorted(events, key=lambda e: e.ts_ms):
        if event.kind == 'stun_bind':
            unmatched.append(event.ts_ms)
        elif event.kind == 'stun_confirm':
            while unmatched and event.ts_ms - unmatched[-1] > PAIR_MATCH_MS:
                unmatched.pop()
            if unmatched:
                matched.append(unmatched.pop())
    return sorted(matched)


def pair_rate_series(pair_ts: List[int], window_s: int) -> List[Tuple[int, float]]:
    """(window start seconds, pairs per second) over absolute-aligned windows."""
    if not pair_ts:
        return []
    width = window_s * 1000
    counts = np.bincount(np.asarray(pair_ts, dtype=np.int64) // width)
    first = pair_ts[0] // width
    return [(int(i) * window_s, float(counts[i]) / window_s) for i in range(first, len(counts))]


@dataclass
class FlowStats:
    flow: FlowKey
    counts: Dict[str, int]
    bytes_total: int
    first_ts_ms: int
    last_ts_ms: int
    stun_pair_rates: List[Tuple[int, float]]

    def to_dict(self) -> Dict:
        return {
            'flow': self.flow.to_dict(),
            'counts': dict(sorted(self.counts.items())),
            'bytes_total': self.bytes_total,
            'first_ts_ms': self.first_ts_ms,
            'last_ts_ms': self.last_ts_ms,
            'stun_pair_rates': [[start, rate] for start, rate in self.stun_pair_rates],
        }


def compute_flow_stats(log: TraceLog, window_s: int = DEFAULT_WINDOW_S) -> Dict[FlowKey, FlowStats]:
    stats = {}
    for key, events in sorted(log.flows().items()):
        counts: Dict[str, int] = defaultdict(int)
        for event in events:
            counts[event.kind] += 1
        stats[key] = FlowStats(
            flow=key,
            counts=dict(counts),
            bytes_total=sum(e.len for e in events),
            first_ts_ms=min(e.ts_ms for e in events),
            last_ts_ms=max(e.ts_ms for e in events),
            stun_pair_rates=pair_rate_series(match_stun_pairs(events), window_s),
        )
    return stats


def stun_fingerprint(log: TraceLog, window_s: int = DEFAULT_WINDOW_S,
                     threshold_pairs_per_s: float = DEFAULT_THRESHOLD) -> Dict[FlowKey, List[Tuple[int, float]]]:
    """Flows with some window at or above the pair-rate threshold, with their series."""
    flagged = {}
    for key, events in sorted(log.flows().items()):
        if not any(e.kind == 'stun_bind' for e in events):
            continue
        series = pair_rate_series(match_stun_pairs(events), window_s)
        if any(rate >= threshold_pairs_per_s for _, rate in series):
            flagged[key] = series
    return flagged


@dataclass
class Verdict:
    flow: FlowKey
    label: str
    evidence: List[str]
    hosts: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {'flow': self.flow.to_dict(), 'label': self.label,
                'evidence': list(self.evidence), 'hosts': list(self.hosts)}

    def to_json(self) -> str:
        return canonical_json(self.to_dict()).decode('utf-8')


def _server_endpoints(log: TraceLog) -> Dict[str, set]:
    """endpoint -> peers it signaled with, plus which endpoints answer STUN for several clients."""
    signal_peers: Dict[str, set] = defaultdict(set)
    stun_clients: Dict[str, set] = defaultdict(set)
    for event in log.events:
        if event.kind == 'signal':
            signal_peers[event.src].add(event.dst)
            signal_peers[event.dst].add(event.src)
        elif event.kind == 'stun_bind':
            stun_clients[event.dst].add(event.src)
    return {'signal_peers': signal_peers, 'stun_servers': {h for h, c in stun_clients.items() if len(c) > 1}}


def classify(log: TraceLog, window_s: int = DEFAULT_WINDOW_S,
             threshold_pairs_per_s: float = DEFAULT_THRESHOLD) -> List[Verdict]:
    flagged = stun_fingerprint(log, window_s, threshold_pairs_per_s)
    servers = _server_endpoints(log)
    verdicts = []
    for key, events in sorted(log.flows().items()):
        data_events = [e for e in events if e.kind == 'data']
        token_requests = [e for e in events if e.kind in ('http_get', 'http_post')
                          and e.meta and TOKEN_REQUEST_RE.fullmatch(e.meta)]
        if token_requests and data_events:
            evidence = list(dict.fromkeys(e.meta for e in token_requests))
            payload_bytes = sum(e.len for e in data_events if e.payload is not None)
            if payload_bytes:
                evidence.append(f"{payload_bytes} cleartext payload bytes observed")
            hosts = sorted({e.dst for e in token_requests})
            verdicts.append(Verdict(key, LABEL_CLEARTEXT, evidence, hosts))
            continue

        if key in flagged:
            handshakes = [e.ts_ms for e in events if e.kind == 'handshake']
            after = [e for e in data_events if handshakes and e.ts_ms >= min(handshakes)]
            if after:
                start, peak = max(flagged[key], key=lambda item: item[1])
                evidence = [
                    f"stun keepalive {peak:.1f} pairs/s in window starting {start}s",
                    f"{len(handshakes)} handshake messages then {len(after)} opaque data events",
                ]
                hosts = set()
                for endpoint in (key.a, key.b):
                    hosts |= servers['signal_peers'].get(endpoint, set())
                    if endpoint in servers['stun_servers']:
                        hosts.add(endpoint)
                hosts -= {key.a, key.b} - servers['stun_servers']
                verdicts.append(Verdict(key, LABEL_COVERT, evidence, sorted(hosts)))
                continue

        verdicts.append(Verdict(key, LABEL_BENIGN, []))
    return verdicts


def reconstruct_cleartext(log: TraceLog, flow: FlowKey) -> Optional[bytes]:
    """Concatenate the observed payloads of a flow by offset; None without payloads."""
    pieces = []
    for event in log.events:
        if event.kind != 'data' or event.payload is None or flow_of(event) != flow:
            continue
        match = OFFSET_RE.fullmatch(event.meta or '')
        if match is None:
            continue
        try:
            data = base64.b64decode(event.payload, validate=True)
        except binascii.Error:
            raise DetectorError(f"Undecodable payload at {event.ts_ms} ms in {flow}")
        pieces.append((int(match.group(1)), data))
    if not pieces:
        return None

    pieces.sort(key=lambda p: p[0])
    out = bytearray()
    expected = 0
    for offset, data in pieces:
        if offset > expected:
            warnings.warn(f"Gap of {offset - expected} bytes at offset {expected} in {flow}",
                          PartialReconstructionWarning)
            expected = offset
        if offset < expected:
            # overlapping retransmission
            data = data[expected - offset:]
        out.extend(data)
        expected += len(data)
    return bytes(out)


def sample_mask(count: int, rate: float, seed: int) -> np.ndarray:
    if not 0 < rate <= 1:
        raise SamplingError(f"Sample rate must be in (0, 1], got {rate}")
    return np.random.default_rng(seed).random(count) < rate


def sample(log: Union[TraceLog, Iterable[FlowEvent]], rate: float = DEFAULT_SAMPLE_RATE, seed: int = 0) -> TraceLog:
    """Keep each event independently with probability ``rate``."""
    if not 0 < rate <= 1:
        raise SamplingError(f"Sample rate must be in (0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    kept = []
    block: List[FlowEvent] = []

    def flush() -> None:
        mask = rng.random(len(block)) < rate
        kept.extend(e for e, keep in zip(block, mask) if keep)
        block.clear()

    for event in log:
        block.append(event)
        if len(block) == SAMPLE_BLOCK:
            flush()
    if block:
        flush()
    return TraceLog(kept, [], len(kept))


@dataclass
class CorrelationReport:
    pairs: List[Tuple[FlowKey, FlowKey, float]]

    def to_dict(self) -> Dict:
        return {'pairs': [{'a': str(a), 'b': str(b), 'score': round(score, 6)} for a, b, score in self.pairs]}


def _window_vectors(log: TraceLog, start_ms: int, end_ms: int, width: int) -> Tuple[List[FlowKey], np.ndarray]:
    n_windows = (end_ms - start_ms) // width + 1
    keys = []
    rows = []
    for key, events in sorted(log.flows().items()):
        ts = np.array([e.ts_ms for e in events if start_ms <= e.ts_ms <= end_ms], dtype=np.int64)
        if ts.size == 0:
            continue
        keys.append(key)
        rows.append(np.bincount((ts - start_ms) // width, minlength=n_windows).astype(float))
    return keys, np.array(rows).reshape(len(rows), n_windows)


def correlate(sampled_a: TraceLog, sampled_b: TraceLog, window_s: int = CORRELATION_WINDOW_S) -> CorrelationReport:
    """Greedy one-to-one pairing of flows by cosine similarity of windowed counts."""
    if not sampled_a.events or not sampled_b.events:
        raise CorrelationError("Both traces need events to correlate")
    start = max(sampled_a.events[0].ts_ms, sampled_b.events[0].ts_ms)
    end = min(sampled_a.events[-1].ts_ms, sampled_b.events[-1].ts_ms)
    if start > end:
        raise CorrelationError("Traces do not overlap in time")
    width = window_s * 1000
    keys_a, mat_a = _window_vectors(sampled_a, start, end, width)
    keys_b, mat_b = _window_vectors(sampled_b, start, end, width)
    if not keys_a or not keys_b:
        raise CorrelationError("No flows fall in the overlapping time range")

    norm_a = np.linalg.norm(mat_a, axis=1, keepdims=True)
    norm_b = np.linalg.norm(mat_b, axis=1, keepdims=True)
    scores = (mat_a / np.where(norm_a == 0, 1, norm_a)) @ (mat_b / np.where(norm_b == 0, 1, norm_b)).T

    candidates = sorted(
        ((float(scores[i, j]), i, j) for i in range(len(keys_a)) for j in range(len(keys_b))),
        key=lambda c: (-c[0], c[1], c[2]))
    used_a, used_b = set(), set()
    pairs = []
    for score, i, j in candidates:
        if i in used_a or j in used_b or score <= 0:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((keys_a[i], keys_b[j], score))
    return CorrelationReport(pairs)


@dataclass(frozen=True)
class BlacklistRule:
    pattern: str
    rationale: str


def host_glob(host: str) -> str:
    """Pattern that matches ``host``; subdomains collapse onto their registrable domain."""
    labels = host.split('.')
    if IPV4_RE.fullmatch(host) or len(labels) <= 2:
        return host
    return '*.' + '.'.join(labels[-2:])


def emit_blacklist(verdicts: Iterable[Verdict]) -> List[BlacklistRule]:
    """One glob per registrable domain implicated by a non-benign verdict."""
    implicated: Dict[str, Dict[str, set]] = {}
    for verdict in verdicts:
        if verdict.label == LABEL_BENIGN:
            continue
        for host in verdict.hosts:
            entry = implicated.setdefault(host_glob(host), {'hosts': set(), 'labels': set()})
            entry['hosts'].add(host)
            entry['labels'].add(verdict.label)
    return [
        BlacklistRule(pattern, f"{', '.join(sorted(e['labels']))} via {', '.join(sorted(e['hosts']))}")
        for pattern, e in sorted(implicated.items())
    ]
