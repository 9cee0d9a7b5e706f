"""
Run Logging for Deco-Mamba

Console messages go through safe_update_log(), which forwards to an injected
sink when one is set and otherwise prints. Structured run records go through
KeyValueLog: append-only plain text, one event per line, key=value pairs.

Key Features:
- set_dependencies(): inject the console sink (tests capture output this way)
- Bracketed component tags ([TRAIN], [EVAL], [CKPT], ...) in console lines
- KeyValueLog: flushed on every write, safe to share between threads
- parse_fields(): inverse of format_fields() for report consumers
"""

import math
import os
import threading
from typing import Any, Callable, Dict, Optional

import numpy as np

_safe_update_log_func: Optional[Callable] = None
_quiet = False
_log_lock = threading.Lock()


def set_dependencies(safe_update_log_func: Optional[Callable] = None, quiet: bool = False):
    """Set the console sink used by every module"""
    global _safe_update_log_func, _quiet
    _safe_update_log_func = safe_update_log_func
    _quiet = quiet


def set_quiet(quiet: bool = True):
    """Silence the print fallback without replacing an injected sink"""
    global _quiet
    _quiet = quiet


def safe_update_log(message: str, progress: Optional[float] = None):
    """
    Safe logging function that uses the injected dependency.
    Fallback to print if no logging function is available.
    """
    if _safe_update_log_func:
        _safe_update_log_func(message, progress)
    elif not _quiet:
        print(message, flush=True)


# ------------------------------------------------
# KEY=VALUE RECORDS
# ------------------------------------------------

def format_value(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return repr(value)
    text = str(value)
    if not text or any(ch.isspace() or ch in '="' for ch in text):
        return '"' + text.replace('"', "'") + '"'
    return text


def format_fields(event: str, **fields: Any) -> str:
    parts = [f"event={format_value(event)}"]
    parts.extend(f"{key}={format_value(value)}" for key, value in fields.items())
    return " ".join(parts)


def parse_fields(line: str) -> Dict[str, str]:
    """Split a key=value line back into a dict of raw string values."""
    out: Dict[str, str] = {}
    index, length = 0, len(line)
    while index < length:
        while index < length and line[index] == " ":
            index += 1
        if index >= length:
            break
        eq = line.index("=", index)
        key = line[index:eq]
        index = eq + 1
        if index < length and line[index] == '"':
            end = line.index('"', index + 1)
            out[key] = line[index + 1:end]
            index = end + 1
        else:
            end = line.find(" ", index)
            end = length if end < 0 else end
            out[key] = line[index:end]
            index = end
    return out


class KeyValueLog:
    """Append-only structured log file."""

    def __init__(self, path: str):
        self.path = path
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)

    def write(self, event: str, **fields: Any) -> str:
        line = format_fields(event, **fields)
        with _log_lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")
                f.flush()
        return line

    def read(self):
        if not os.path.exists(self.path):
            return []
        with open(self.path, "r", encoding="utf-8") as f:
            return [parse_fields(line.rstrip("\n")) for line in f if line.strip()]
