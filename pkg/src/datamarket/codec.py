"""Canonical byte encoding for transaction arguments and wire messages."""

import json

_BYTES_TAG = "$b"


def _default(obj):
    if isinstance(obj, (bytes, bytearray)):
        return {_BYTES_TAG: bytes(obj).hex()}
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot encode {type(obj).__name__}")


def _hook(d):
    if len(d) == 1 and _BYTES_TAG in d:
        return bytes.fromhex(d[_BYTES_TAG])
    return d


def encode(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      default=_default).encode()


def decode(raw: bytes):
    return json.loads(raw.decode(), object_hook=_hook)
