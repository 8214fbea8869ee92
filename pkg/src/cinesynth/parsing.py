"""Tolerant extraction of JSON payloads from model text.

Models wrap JSON in prose, code fences, or both. Extraction tries three
tiers in order and raises ParseFailed if none yields a payload; no input,
however malformed, may escape as any other exception type.
"""

from __future__ import annotations

import json
import re

from .errors import ParseFailed

_FENCE_RE = re.compile(r"```(?:[A-Za-z0-9_+-]*)\s*\n?(.*?)```", re.DOTALL)

# glibc-style guard: pathological nesting must fail cleanly, not blow the stack
_MAX_CANDIDATES = 64


def _loads(snippet: str):
    return json.loads(snippet)


def _balanced_candidates(text: str):
    """Yield substrings that look like complete JSON objects/arrays.

    A depth counter walks from each opening bracket, skipping string bodies
    and escapes. Candidates are yielded longest-first per start position.
    """
    openers = {"{": "}", "[": "]"}
    starts = [i for i, ch in enumerate(text) if ch in openers]
    for start in starts[:_MAX_CANDIDATES]:
        depth = 0
        in_string = False
        escape = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escape:
                    escape = False
                elif ch == "\\":
                    escape = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch in "{[":
                depth += 1
            elif ch in "}]":
                depth -= 1
                if depth == 0:
                    yield text[start : i + 1]
                    break
                if depth < 0:
                    break


def parse_structured(text):
    """Extract the first JSON payload from model output.

    Accepts str or bytes (decoded utf-8, bad bytes replaced). Tries, in
    order: the whole text as JSON; the body of each fenced code block; each
    balanced brace/bracket span. Raises ParseFailed when nothing parses.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    if not isinstance(text, str):
        raise ParseFailed(f"expected text, got {type(text).__name__}")

    stripped = text.strip()
    if not stripped:
        raise ParseFailed("empty response", raw=text)

    try:
        return _loads(stripped)
    except Exception:
        pass

    try:
        for body in _FENCE_RE.findall(text):
            body = body.strip()
            if not body:
                continue
            try:
                return _loads(body)
            except Exception:
                continue
        for candidate in _balanced_candidates(text):
            try:
                return _loads(candidate)
            except Exception:
                continue
    except Exception:
        # regex/scan blowups on adversarial input count as parse failures
        pass

    offset = None
    m = re.search(r"[{\[]", text)
    if m:
        offset = m.start()
    raise ParseFailed("no JSON payload found", raw=text, offset=offset)


def require_object(payload, context: str) -> dict:
    """Narrow a parsed payload to a JSON object."""
    if not isinstance(payload, dict):
        raise ParseFailed(f"{context}: expected a JSON object, got {type(payload).__name__}")
    return payload


def require_list(payload, key: str, context: str) -> list:
    """Narrow payload[key] to a list."""
    obj = require_object(payload, context)
    value = obj.get(key)
    if not isinstance(value, list):
        raise ParseFailed(f"{context}: expected a list under '{key}'")
    return value
