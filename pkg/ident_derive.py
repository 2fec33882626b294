#!/usr/bin/env python3
"""
Derivation of every ephemeral identifier used by covertpipe.

File slugs and directory names follow the random-name recipe: random bytes,
SHA-256, rightmost 16 hex characters, base32 without padding. Onion ids are the
base32 of the first 80 bits of SHA-1 over an identity key. Swarm ids are a
SHA3-256 truncation over file content. Relay keys and short tokens are drawn
from an injectable random source (cryptographic by default).
"""
import base64
import hashlib
import random
import re
import secrets
import string
from typing import BinaryIO, Iterable, NamedTuple, Optional, Union

from covertpipe_utils import CovertPipeError, EXIT_BAD_INPUT

# --- Configuration ---
SLUG_SEED_BYTES = 16
DIR_SEED_BYTES = 8
SLUG_LENGTH = 26
ONION_ID_LENGTH = 16
ONION_ID_BYTES = 10
SWARM_ID_LENGTH = 32
RELAY_KEY_LENGTH = 15
SHORT_TOKEN_LENGTH = 5
SHORT_TOKEN_ALPHABET = string.ascii_lowercase + string.digits
READ_BLOCK_SIZE = 1024 * 1024
ONION_SCHEME = 'onion'
# --- End Configuration ---

_BASE32_RE = re.compile(r'[a-z2-7]+')
_HEX_RE = re.compile(r'[0-9a-f]+')
_RELAY_KEY_RE = re.compile(r'[1-9][0-9]{14}')
_SHORT_TOKEN_RE = re.compile(r'[a-z0-9]{5}')

Rng = Union[random.Random, secrets.SystemRandom]
Content = Union[bytes, bytearray, memoryview, BinaryIO, Iterable[bytes]]


class IdentError(CovertPipeError):
    exit_code = EXIT_BAD_INPUT


class InvalidSeedError(IdentError):
    pass


class InvalidKeyError(IdentError):
    pass


class InvalidArgumentError(IdentError):
    pass


class ContentReadError(IdentError):
    pass


class ShareUrl(NamedTuple):
    scheme: str
    host: str
    port: Optional[int]
    token: str


def _system_rng() -> Rng:
    return secrets.SystemRandom()


def new_entropy_seed(length: int = SLUG_SEED_BYTES, rng: Optional[Rng] = None) -> bytes:
    """Random seed bytes; OS randomness unless a generator is injected."""
    if length not in (DIR_SEED_BYTES, SLUG_SEED_BYTES):
        raise InvalidSeedError(f"Seed length must be {DIR_SEED_BYTES} or {SLUG_SEED_BYTES}, got {length}")
    if rng is None:
        return secrets.token_bytes(length)
    return rng.getrandbits(8 * length).to_bytes(length, 'big')


def _random_name(seed: bytes) -> str:
    tail = hashlib.sha256(seed).hexdigest()[-16:]
    return base64.b32encode(tail.encode('ascii')).decode('ascii').lower().rstrip('=')


def derive_slug(seed: bytes) -> str:
    """26-character lowercase base32 slug from a 16-byte seed."""
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != SLUG_SEED_BYTES:
        raise InvalidSeedError(f"Slug seed must be exactly {SLUG_SEED_BYTES} bytes")
    return _random_name(bytes(seed))


def derive_dir_name(seed: bytes) -> str:
    """Directory/host name from an 8-byte seed, same recipe as the slug."""
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != DIR_SEED_BYTES:
        raise InvalidSeedError(f"Directory seed must be exactly {DIR_SEED_BYTES} bytes")
    return _random_name(bytes(seed))


def derive_onion_id(identity_key: bytes) -> str:
    """16-character onion id: base32 of the first 80 bits of SHA-1(key)."""
    if not identity_key:
        raise InvalidKeyError("Identity key must not be empty")
    digest = hashlib.sha1(bytes(identity_key)).digest()[:ONION_ID_BYTES]
    return base64.b32encode(digest).decode('ascii').lower()


def _iter_blocks(content: Content) -> Iterable[bytes]:
    if isinstance(content, (bytes, bytearray, memoryview)):
        yield bytes(content)
        return
    read = getattr(content, 'read', None)
    if read is not None:
        while True:
            block = read(READ_BLOCK_SIZE)
            if not block:
                return
            yield block
        return
    yield from content


def derive_swarm_id(content: Content) -> str:
    """First 32 hex characters of SHA3-256 over the whole content stream."""
    h = hashlib.sha3_256()
    try:
        for block in _iter_blocks(content):
            h.update(block)
    except OSError as e:
        raise ContentReadError(f"Could not read content for swarm id: {e}")
    return h.hexdigest()[:SWARM_ID_LENGTH]


def compose_share_url(host: str, token: str, scheme: str = 'http', port: Optional[int] = None) -> str:
    """
    Build a share URL.

    onion form: ``<host>.onion/<token>``; web form: ``<scheme>://<host>[:port]/<token>``.
    """
    if not host:
        raise InvalidArgumentError("Share URL host must not be empty")
    if not token:
        raise InvalidArgumentError("Share URL token must not be empty")
    if '/' in token:
        raise InvalidArgumentError("Share URL token must not contain '/'")
    if scheme == ONION_SCHEME:
        return f"{host}.onion/{token}"
    if not scheme:
        raise InvalidArgumentError("Share URL scheme must not be empty")
    netloc = host if port is None else f"{host}:{port}"
    return f"{scheme}://{netloc}/{token}"


def parse_share_url(url: str) -> ShareUrl:
    """Inverse of compose_share_url."""
    if not url or '/' not in url:
        raise InvalidArgumentError(f"Malformed share URL: {url!r}")
    head, _, token = url.rpartition('/')
    if not token:
        raise InvalidArgumentError(f"Share URL has no token: {url!r}")
    if '://' not in head:
        if head.endswith('.onion') and len(head) > len('.onion'):
            return ShareUrl(ONION_SCHEME, head[:-len('.onion')], None, token)
        raise InvalidArgumentError(f"Malformed share URL: {url!r}")
    scheme, _, netloc = head.partition('://')
    if not scheme or not netloc or '/' in netloc:
        raise InvalidArgumentError(f"Malformed share URL: {url!r}")
    host, sep, port_text = netloc.rpartition(':')
    if sep and port_text.isdigit():
        return ShareUrl(scheme, host, int(port_text), token)
    return ShareUrl(scheme, netloc, None, token)


def generate_relay_key(rng: Optional[Rng] = None) -> str:
    """Uniform 15-digit decimal key with a nonzero first digit."""
    rng = rng or _system_rng()
    low = 10 ** (RELAY_KEY_LENGTH - 1)
    return str(rng.randrange(low, 10 ** RELAY_KEY_LENGTH))


def generate_short_token(rng: Optional[Rng] = None) -> str:
    """Five characters from [a-z0-9]."""
    rng = rng or _system_rng()
    return ''.join(rng.choice(SHORT_TOKEN_ALPHABET) for _ in range(SHORT_TOKEN_LENGTH))


def is_valid_slug(text: str) -> bool:
    return isinstance(text, str) and len(text) == SLUG_LENGTH and bool(_BASE32_RE.fullmatch(text))


def is_valid_onion_id(text: str) -> bool:
    return isinstance(text, str) and len(text) == ONION_ID_LENGTH and bool(_BASE32_RE.fullmatch(text))


def is_valid_swarm_id(text: str) -> bool:
    return isinstance(text, str) and len(text) == SWARM_ID_LENGTH and bool(_HEX_RE.fullmatch(text))


def is_valid_relay_key(text: str) -> bool:
    return isinstance(text, str) and bool(_RELAY_KEY_RE.fullmatch(text))


def is_valid_short_token(text: str) -> bool:
    return isinstance(text, str) and bool(_SHORT_TOKEN_RE.fullmatch(text))
