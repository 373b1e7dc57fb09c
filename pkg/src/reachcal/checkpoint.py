"""Denoiser checkpoint format.

Layout (little endian):

    meta_len u64      length of the metadata block in bytes
    metadata          UTF-8 JSON: config, normalizer, conditioning ranges,
                      schedule hash, parameter shapes in canonical order
    blob              concatenated f32 parameter arrays (canonical order,
                      C-contiguous)
    crc      u64      CRC-64/XZ of every preceding byte
"""

import json
import struct

import numpy as np

from .datastore import Normalizer
from .denoiser import DenoiserConfig, DenoiserModel, parameter_names
from .errors import FormatError
from .hashing import crc64


def save_model(model, path, extra_meta=None):
    """Write a checkpoint; returns its CRC-64 (used as the model hash)."""
    names = parameter_names(model.config)
    meta = {
        "config": model.config.to_dict(),
        "normalizer": {
            "mean": model.normalizer.mean.tolist(),
            "std": model.normalizer.std.tolist(),
        },
        "n_dims": model.n_dims,
        "n_horizon": model.n_horizon,
        "n_diffusion": model.n_diffusion,
        "schedule_hash": model.schedule_hash,
        "loss_curve": model.loss_curve,
        "parameters": [
            {"name": name, "shape": list(model.params[name].shape)} for name in names
        ],
    }
    if extra_meta:
        meta["extra"] = extra_meta
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(model.params[name], dtype="<f4").tobytes() for name in names
    )
    payload = struct.pack("<Q", len(meta_bytes)) + meta_bytes + blob
    checksum = crc64(payload)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum))
    return checksum


def load_model(path):
    """Read a checkpoint, verifying the checksum; returns (model, hash)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError("file too short for header", offset=0)
    (meta_len,) = struct.unpack_from("<Q", blob, 0)
    if len(blob) < 8 + meta_len + 8:
        raise FormatError("truncated metadata block", offset=len(blob))
    try:
        meta = json.loads(blob[8 : 8 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", offset=8) from exc

    (stored_crc,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    actual_crc = crc64(blob[:-8])
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch: stored {stored_crc:#018x}, computed {actual_crc:#018x}",
            offset=len(blob) - 8,
        )

    config = DenoiserConfig(**meta["config"])
    params = {}
    offset = 8 + meta_len
    for entry in meta["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob) - 8:
            raise FormatError(
                f"parameter blob truncated at {entry['name']}", offset=offset
            )
        params[entry["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset = end
    if offset != len(blob) - 8:
        raise FormatError("trailing bytes after parameter blob", offset=offset)

    normalizer = Normalizer(
        mean=np.array(meta["normalizer"]["mean"]),
        std=np.array(meta["normalizer"]["std"]),
    )
    model = DenoiserModel(
        params=params,
        config=config,
        normalizer=normalizer,
        n_dims=meta["n_dims"],
        n_horizon=meta["n_horizon"],
        n_diffusion=meta["n_diffusion"],
        schedule_hash=meta["schedule_hash"],
        loss_curve=list(meta.get("loss_curve", [])),
    )
    return model, stored_crc
