"""Named-tensor container files and training checkpoints.

A container is a single binary file: magic, version, a canonical JSON
metadata block, then tensors sorted by name as little-endian raw data.
Canonical JSON plus sorted tensor order makes identical states produce
byte-identical files, which the determinism contract depends on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from melfm.config import RunConfig, config_from_dict, config_to_dict, fingerprint
from melfm.dsp import Normalizer
from melfm.quantizer import Quantizer
from melfm.tensor import Tensor

CONTAINER_MAGIC = b"MELC"
CONTAINER_VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<u4"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def save_container(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(CONTAINER_MAGIC)
        fp.write(struct.pack("<IQ", CONTAINER_VERSION, len(meta_blob)))
        fp.write(meta_blob)
        fp.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype == np.float64:
                code = 1
            elif arr.dtype == np.float32:
                code = 0
            elif arr.dtype == np.int64:
                code = 2
            elif arr.dtype == np.uint32:
                code = 3
            else:
                raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            fp.write(struct.pack("<H", len(encoded)))
            fp.write(encoded)
            fp.write(struct.pack("<BB", code, arr.ndim))
            fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fp.write(arr.astype(_DTYPES[code]).tobytes())


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CONTAINER_MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    version, meta_len = struct.unpack_from("<IQ", raw, 4)
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    pos = 16
    meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dtype = np.dtype(_DTYPES[code])
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        data = np.frombuffer(raw[pos : pos + nbytes], dtype=dtype).reshape(shape)
        pos += nbytes
        tensors[name] = data.copy()
    return tensors, meta


@dataclass
class Checkpoint:
    """Everything probing needs to reproduce features and tokens exactly."""

    config: RunConfig
    step: int
    encoder_weights: dict[str, Tensor]
    head_weights: dict[str, Tensor]
    quantizer: Quantizer
    normalizer: Normalizer
    opt_state: dict[str, dict[str, np.ndarray]]

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in ckpt.encoder_weights.items():
        tensors[f"encoder.{name}"] = t.data
    for name, t in ckpt.head_weights.items():
        tensors[f"head.{name}"] = t.data
    tensors["quantizer.projection"] = ckpt.quantizer.projection
    tensors["quantizer.codebook"] = ckpt.quantizer.codebook
    tensors["normalizer.mean"] = ckpt.normalizer.mean
    tensors["normalizer.std"] = ckpt.normalizer.std
    for name, slots in ckpt.opt_state.items():
        tensors[f"opt.m.{name}"] = slots["m"]
        tensors[f"opt.v.{name}"] = slots["v"]
    meta = {
        "kind": "checkpoint",
        "step": ckpt.step,
        "config": config_to_dict(ckpt.config),
        "fingerprint": ckpt.fingerprint,
        "quantizer": {"seed": ckpt.quantizer.seed, "mode": ckpt.quantizer.mode},
    }
    save_container(path, tensors, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    tensors, meta = load_container(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: container is not a checkpoint")
    config = config_from_dict(meta["config"])
    if fingerprint(config) != meta["fingerprint"]:
        raise ValueError(f"{path}: fingerprint does not match embedded config")
    encoder_weights: dict[str, Tensor] = {}
    head_weights: dict[str, Tensor] = {}
    opt_state: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        if name.startswith("encoder."):
            encoder_weights[name[len("encoder.") :]] = Tensor(arr, requires_grad=True)
        elif name.startswith("head."):
            head_weights[name[len("head.") :]] = Tensor(arr, requires_grad=True)
        elif name.startswith("opt.m."):
            opt_state.setdefault(name[len("opt.m.") :], {})["m"] = arr
        elif name.startswith("opt.v."):
            opt_state.setdefault(name[len("opt.v.") :], {})["v"] = arr
    quantizer = Quantizer(
        projection=tensors["quantizer.projection"],
        codebook=tensors["quantizer.codebook"],
        mode=meta["quantizer"]["mode"],
        seed=int(meta["quantizer"]["seed"]),
    )
    normalizer = Normalizer(mean=tensors["normalizer.mean"], std=tensors["normalizer.std"])
    return Checkpoint(
        config=config,
        step=int(meta["step"]),
        encoder_weights=encoder_weights,
        head_weights=head_weights,
        quantizer=quantizer,
        normalizer=normalizer,
        opt_state=opt_state,
    )


def weights_hash(weights: dict[str, Tensor]) -> str:
    import hashlib

    digest = hashlib.sha256()
    for name in sorted(weights):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(weights[name].data).tobytes())
    return digest.hexdigest()
