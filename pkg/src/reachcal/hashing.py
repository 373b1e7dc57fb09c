"""CRC-64 checksums used by the binary artifact formats.

Variant: CRC-64/XZ (reflected, polynomial 0x42F0E1EBA9EA3693, init and
xor-out all ones).  Check value: crc64(b"123456789") == 0x995DC9BBDF1939FA.
"""

import json

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco if not (args and callable(args[0])) else args[0]

_POLY_REFLECTED = np.uint64(0xC96C5795D7870F42)


def _build_table():
    table = np.zeros(256, dtype=np.uint64)
    for byte in range(256):
        crc = np.uint64(byte)
        for _ in range(8):
            if crc & np.uint64(1):
                crc = (crc >> np.uint64(1)) ^ _POLY_REFLECTED
            else:
                crc = crc >> np.uint64(1)
        table[byte] = crc
    return table


_TABLE = _build_table()


@njit(cache=True)
def _crc64_update(table, crc, data):
    for b in data:
        crc = table[(crc ^ np.uint64(b)) & np.uint64(0xFF)] ^ (crc >> np.uint64(8))
    return crc


def crc64(data, crc=0):
    """CRC-64/XZ of ``data`` (bytes-like); ``crc`` chains partial results."""
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    state = np.uint64(crc) ^ np.uint64(0xFFFFFFFFFFFFFFFF)
    # the jitted update returns a Python int; recast so chaining stays uint64
    state = np.uint64(_crc64_update(_TABLE, state, buf))
    return int(state ^ np.uint64(0xFFFFFFFFFFFFFFFF))


def crc64_file(path, chunk_size=1 << 20):
    """CRC-64/XZ of a file's entire contents."""
    state = np.uint64(0xFFFFFFFFFFFFFFFF)
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(chunk_size)
            if not chunk:
                break
            state = np.uint64(
                _crc64_update(_TABLE, state, np.frombuffer(chunk, dtype=np.uint8))
            )
    return int(state ^ np.uint64(0xFFFFFFFFFFFFFFFF))


def artifact_hash(path):
    """Identity of a checksummed artifact: its stored trailing CRC-64.

    Hashing a whole file that ends in its own CRC would give the same
    residue constant for every intact artifact, so the trailer itself is
    the identity.  Integrity is verified separately by the loaders.
    """
    with open(path, "rb") as fh:
        fh.seek(-8, 2)
        return int.from_bytes(fh.read(8), "little")


def config_hash(obj):
    """CRC-64 over a canonical JSON encoding of a config-like mapping."""
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return crc64(canon.encode("utf-8"))
