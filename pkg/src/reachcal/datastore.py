"""Dataset container, persistence, trajectory-level splits, normalization.

Binary dataset layout (little endian):

    magic   4 bytes  b"RCHD"
    version u32      1
    N, K, n u64 each
    dt      f64
    states  N*K*n f32 in (trajectory, time, dimension) order
    crc     u64      CRC-64/XZ of every preceding byte
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError
from .hashing import crc64

MAGIC = b"RCHD"
VERSION = 1
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Dataset:
    """N trajectories of K recorded states in n dimensions."""

    states: np.ndarray
    dt: float
    system_tag: str = ""
    seed: int = 0

    def __post_init__(self):
        states = np.ascontiguousarray(self.states, dtype=np.float32)
        if states.ndim != 3 or min(states.shape) < 1:
            raise ValueError(f"states must be (N, K, n) with positive sizes, got {states.shape}")
        if not np.all(np.isfinite(states)):
            raise ValueError("states contain non-finite entries")
        object.__setattr__(self, "states", states)

    @property
    def n_traj(self):
        return self.states.shape[0]

    @property
    def n_steps(self):
        return self.states.shape[1]

    @property
    def n_dims(self):
        return self.states.shape[2]

    def states_at(self, k, ids=None):
        """Float64 states at step ``k``, optionally restricted to trajectory ids."""
        block = self.states[:, k, :] if ids is None else self.states[ids, k, :]
        return block.astype(np.float64)


@dataclass(frozen=True)
class SplitIndex:
    """Disjoint trajectory index lists covering the whole dataset."""

    train_ids: np.ndarray
    cal_ids: np.ndarray
    test_ids: np.ndarray
    seed: int

    def __post_init__(self):
        parts = [np.asarray(p, dtype=np.int64) for p in (self.train_ids, self.cal_ids, self.test_ids)]
        merged = np.concatenate(parts)
        if len(np.unique(merged)) != len(merged):
            raise ValueError("split parts overlap")
        if not np.array_equal(np.sort(merged), np.arange(len(merged))):
            raise ValueError("split parts must cover 0..N-1 exactly")
        for name, part in zip(("train_ids", "cal_ids", "test_ids"), parts):
            object.__setattr__(self, name, part)


def split(dataset, ratios=(0.6, 0.2, 0.2), seed=0):
    """Random trajectory-level partition into train/calibration/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigurationError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must sum to 1, got {sum(ratios)!r}")
    n = dataset.n_traj
    n_train = int(round(ratios[0] * n))
    n_cal = int(round(ratios[1] * n))
    n_test = n - n_train - n_cal
    if min(n_train, n_cal, n_test) < 1:
        raise ConfigurationError(
            f"split sizes ({n_train}, {n_cal}, {n_test}) must all be >= 1 for N={n}"
        )
    perm = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5B117))).permutation(n)
    return SplitIndex(
        train_ids=perm[:n_train],
        cal_ids=perm[n_train : n_train + n_cal],
        test_ids=perm[n_train + n_cal :],
        seed=int(seed),
    )


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension standardization; std floored at 1e-8."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be matching 1-D arrays")
        if np.any(std <= 0):
            raise ValueError("std must be positive (floor applies at fit time)")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def apply(self, states):
        return (np.asarray(states, dtype=np.float64) - self.mean) / self.std

    def invert(self, normalized):
        return np.asarray(normalized, dtype=np.float64) * self.std + self.mean

    @classmethod
    def identity(cls, n_dims):
        return cls(mean=np.zeros(n_dims), std=np.ones(n_dims))


def fit_normalizer(dataset, ids=None):
    """Mean/std over all (trajectory, step) states with trajectory in ``ids``."""
    if ids is not None and len(ids) == 0:
        raise ConfigurationError("ids must be nonempty")
    block = dataset.states if ids is None else dataset.states[np.asarray(ids)]
    flat = block.reshape(-1, dataset.n_dims).astype(np.float64)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return Normalizer(mean=mean, std=std)


_HEADER = struct.Struct("<I Q Q Q d")


def save_dataset(dataset, path):
    """Write the binary dataset format; returns the payload CRC-64."""
    n, k, d = dataset.states.shape
    payload = MAGIC + _HEADER.pack(VERSION, n, k, d, dataset.dt)
    payload += dataset.states.astype("<f4").tobytes(order="C")
    checksum = crc64(payload)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum))
    return checksum


def load_dataset(path):
    """Read the binary dataset format, verifying structure and checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError("file too short for magic", offset=0)
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(blob) < 4 + _HEADER.size:
        raise FormatError("truncated header", offset=len(blob))
    version, n, k, d, dt = _HEADER.unpack_from(blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    data_start = 4 + _HEADER.size
    data_len = n * k * d * 4
    expected = data_start + data_len + 8
    if len(blob) != expected:
        raise FormatError(
            f"expected {expected} bytes for {n}x{k}x{d} dataset, found {len(blob)}",
            offset=min(len(blob), expected),
        )
    (stored_crc,) = struct.unpack_from("<Q", blob, data_start + data_len)
    actual_crc = crc64(blob[: data_start + data_len])
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch: stored {stored_crc:#018x}, computed {actual_crc:#018x}",
            offset=data_start + data_len,
        )
    states = np.frombuffer(blob, dtype="<f4", count=n * k * d, offset=data_start)
    return Dataset(states=states.reshape(n, k, d).copy(), dt=dt)
