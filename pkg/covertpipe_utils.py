#!/usr/bin/env python3
"""
Shared utility functions for all covertpipe components.
This module provides configuration loading, console logging, the optional
SQLite service event journal and the common error base class.
"""
import hashlib
import json
import os
import sqlite3
import sys
from typing import Any, Dict, Optional

# --- Configuration ---
CONFIG_ENV_VAR = 'COVERTPIPE_CONFIG'
EVENT_TABLE_NAME = 'service_event_log'

DEFAULT_CONFIG: Dict[str, Any] = {
    'listen': '127.0.0.1:7000',
    'relay_spill_threshold_bytes': 64 * 1024 * 1024,
    'direct_ttl_seconds': 86400,
    'relay_ttl_seconds': 1000,
    'max_downloads': 1,
    'chunk_size': 65536,
    'keepalive_interval_ms': 200,
    'stun_threshold_pairs_per_s': 2.5,
    'event_db': None,
}
# --- End Configuration ---

EXIT_OK = 0
EXIT_INVALID_TOKEN = 2
EXIT_NETWORK = 3
EXIT_VERIFICATION = 4
EXIT_BAD_INPUT = 5


class CovertPipeError(Exception):
    """Base error; ``exit_code`` is what the CLI exits with."""
    exit_code = EXIT_BAD_INPUT


class ConfigError(CovertPipeError):
    exit_code = EXIT_BAD_INPUT


def log(component: str, message: str) -> None:
    """Print a diagnostic line to stderr, prefixed with the component id."""
    print(f"[{component}] {message}", file=sys.stderr, flush=True)


def canonical_json(obj: Any) -> bytes:
    """Sorted-key, compact UTF-8 JSON used on the wire and in signatures."""
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), ensure_ascii=False).encode('utf-8')


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def parse_host_port(text: str, default_port: Optional[int] = None):
    """Split ``host:port``; raises ConfigError on a malformed value."""
    host, sep, port = text.rpartition(':')
    if not sep:
        if default_port is None:
            raise ConfigError(f"Address '{text}' has no port")
        return text, default_port
    try:
        port_num = int(port)
    except ValueError:
        raise ConfigError(f"Address '{text}' has a non-numeric port")
    if not host or not 0 < port_num < 65536:
        raise ConfigError(f"Address '{text}' is not a valid host:port")
    return host, port_num


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Load configuration from a JSON file over DEFAULT_CONFIG.

    When ``path`` is None the file named by $COVERTPIPE_CONFIG is used, if set.
    Unknown keys and non-positive values raise ConfigError. ``overrides`` holds
    command-line values; None entries are ignored.
    """
    config = dict(DEFAULT_CONFIG)
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None

    if path is not None:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                loaded = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read config {path}: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config {path} must hold a JSON object")
        config.update(_checked(loaded))

    if overrides:
        config.update(_checked({k: v for k, v in overrides.items() if v is not None}))
    return config


def _checked(values: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in values.items():
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"Unknown config key: {key}")
        if key == 'event_db':
            if value is not None and not isinstance(value, str):
                raise ConfigError("Config key event_db must be a path string")
            continue
        if key == 'listen':
            if not isinstance(value, str):
                raise ConfigError("Config key listen must be a host:port string")
            parse_host_port(value)
            continue
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
            raise ConfigError(f"Config key {key} must be a positive number, got {value!r}")
        if key != 'stun_threshold_pairs_per_s' and not isinstance(value, int):
            raise ConfigError(f"Config key {key} must be an integer, got {value!r}")
    return values


def create_event_schema(db_path: str) -> bool:
    """Create the service event journal table if it doesn't exist."""
    conn = None
    try:
        db_dir = os.path.dirname(os.path.abspath(db_path))
        os.makedirs(db_dir, exist_ok=True)
        conn = sqlite3.connect(db_path)
        conn.execute(f"""
            CREATE TABLE IF NOT EXISTS {EVENT_TABLE_NAME} (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                event_timestamp TIMESTAMP DEFAULT CURRENT_TIMESTAMP NOT NULL,
                component_id TEXT NOT NULL,
                process_pid INTEGER,
                event_type TEXT NOT NULL,
                token TEXT,
                message TEXT
            );
        """)
        conn.execute(f"CREATE INDEX IF NOT EXISTS idx_sel_event_type ON {EVENT_TABLE_NAME} (event_type);")
        conn.commit()
        return True
    except (sqlite3.Error, OSError) as e:
        log('utils', f"Could not create event journal {db_path}: {e}")
        return False
    finally:
        if conn:
            conn.close()


def log_service_event(
    db_path: Optional[str],
    component_id: str,
    event_type: str,
    token: Optional[str],
    message: str,
) -> bool:
    """Append one row to the service event journal. No-op without a db path."""
    if not db_path:
        return False
    conn = None
    try:
        conn = sqlite3.connect(db_path)
        conn.execute(
            f"INSERT INTO {EVENT_TABLE_NAME} (component_id, process_pid, event_type, token, message)"
            " VALUES (?, ?, ?, ?, ?)",
            (component_id, os.getpid(), event_type, token, message),
        )
        conn.commit()
        return True
    except sqlite3.Error as e:
        log(component_id, f"Database error logging service event: {e}")
        return False
    finally:
        if conn:
            conn.close()


def create_required_directories(*directories: str) -> bool:
    """Create required directories if they don't exist."""
    try:
        for directory in directories:
            os.makedirs(directory, exist_ok=True)
        return True
    except OSError as e:
        log('utils', f"Error creating directories: {e}")
        return False
