"""Binary checkpoint format.

Layout (all integers little-endian)::

    6 bytes   magic b"LATTE1"
    4 bytes   endianness marker, uint32 0x01020304 written little-endian
    64 bytes  config digest, ASCII hex sha256
    4 bytes   manifest length N, uint32
    N bytes   UTF-8 JSON manifest: {"config", "step", "tensors": [{name, dtype, shape, offset, nbytes}]}
    ...       raw little-endian tensor payloads; offsets count from the end of the manifest

Optimizer moments are stored as ordinary tensors under ``opt.m.<name>`` and
``opt.v.<name>`` so a resumed run continues bit-identically.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"LATTE1"
ENDIAN_MARKER = 0x01020304


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, store, cfg, step: int = 0, opt=None):
    tensors = dict(store)
    opt_step = 0
    if opt is not None:
        opt_step = opt.step
        tensors.update({f"opt.m.{k}": v for k, v in opt.m.items()})
        tensors.update({f"opt.v.{k}": v for k, v in opt.v.items()})
    manifest, payload, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        manifest.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                         "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"config": cfg.to_dict(), "step": int(step), "opt_step": int(opt_step),
                         "tensors": manifest}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ENDIAN_MARKER))
        fh.write(cfg.digest().encode("ascii"))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in payload:
            fh.write(raw)


def load_checkpoint(path: str):
    """Returns ``(store, cfg, step, opt_state)``."""
    from .model import AdamWState, ModelConfig, ParameterStore

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (marker,) = struct.unpack("<I", blob[6:10])
    if marker != ENDIAN_MARKER:
        raise CheckpointError(f"{path}: unexpected endianness marker {marker:#x}")
    digest = blob[10:74].decode("ascii")
    (n,) = struct.unpack("<I", blob[74:78])
    header = json.loads(blob[78:78 + n])
    base = 78 + n
    cfg_dict = header["config"]
    cfg_dict["adam_betas"] = tuple(cfg_dict["adam_betas"])
    cfg = ModelConfig(**cfg_dict)
    if cfg.digest() != digest:
        raise CheckpointError(f"{path}: config digest mismatch")
    store, opt = ParameterStore(), AdamWState(step=header.get("opt_step", 0))
    for t in header["tensors"]:
        start = base + t["offset"]
        arr = np.frombuffer(blob[start:start + t["nbytes"]], dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        name = t["name"]
        if name.startswith("opt.m."):
            opt.m[name[6:]] = arr
        elif name.startswith("opt.v."):
            opt.v[name[6:]] = arr
        else:
            store[name] = arr
    return store, cfg, header["step"], opt
