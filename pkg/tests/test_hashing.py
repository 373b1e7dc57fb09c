import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reachcal.hashing import artifact_hash, config_hash, crc64, crc64_file


def reference_crc64(data):
    """Bitwise CRC-64/XZ, no table; the independent oracle."""
    poly = 0xC96C5795D7870F42
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
    return crc ^ 0xFFFFFFFFFFFFFFFF


def test_published_check_value():
    assert crc64(b"123456789") == 0x995DC9BBDF1939FA


def test_empty_input():
    assert crc64(b"") == reference_crc64(b"")


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=0, max_size=600))
def test_matches_bitwise_reference(data):
    assert crc64(data) == reference_crc64(data)


def test_chunked_file_matches_oneshot(tmp_path):
    data = np.random.default_rng(3).integers(0, 256, size=2_500_000, dtype=np.uint8)
    path = tmp_path / "blob.bin"
    path.write_bytes(data.tobytes())
    assert crc64_file(path, chunk_size=1 << 16) == crc64(data.tobytes())


def test_artifact_hash_reads_trailer(tmp_path):
    payload = b"some artifact payload"
    checksum = crc64(payload)
    path = tmp_path / "artifact.bin"
    path.write_bytes(payload + checksum.to_bytes(8, "little"))
    assert artifact_hash(path) == checksum


def test_config_hash_key_order_invariant():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
