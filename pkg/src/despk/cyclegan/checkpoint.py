"""Binary checkpoint and front-end bundle files.

Layout (all integers little-endian)::

    magic (8 bytes)  "DSPKCKPT"
    u16              format version
    32 bytes         SHA-256 digest of the config JSON
    u32 + bytes      config JSON
    u32              number of arrays
      per array:     u16 name length, name, u8 ndim, u32 * ndim shape,
                     row-major float64 data
    u32 + bytes      counters/statistics JSON
    u32 + bytes      RNG state JSON
    u32              CRC32 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..numcore import AdamState, Tensor
from ..vocoderfeat import F0Stats
from .model import CycleGanConfig
from .train import ModelPair, NormStats

CKPT_MAGIC = b"DSPKCKPT"
CKPT_VERSION = 1
NETS = ("g_xy", "g_yx", "d_x", "d_y")


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_digest(config: CycleGanConfig) -> bytes:
    return hashlib.sha256(canonical_json(config.to_dict())).digest()


def _model_fields(config: CycleGanConfig) -> dict:
    # everything except the run length must match when resuming
    d = config.to_dict()
    d.pop("epochs")
    return d


def pack_blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob = blob
        self.off = offset

    def unpack(self, fmt: str):
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += struct.calcsize(fmt)
        return vals

    def blob_bytes(self) -> bytes:
        (n,) = self.unpack("<I")
        b = self.blob[self.off:self.off + n]
        if len(b) != n:
            raise CheckpointError("truncated file")
        self.off += n
        return b

    def arrays(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.blob[self.off:self.off + nlen].decode("utf-8")
            self.off += nlen
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(self.blob, dtype="<f8", count=size, offset=self.off)
            self.off += 8 * size
            out[name] = arr.astype(np.float64).reshape(shape)
        return out


def seal(magic: bytes, body: bytes) -> bytes:
    payload = magic + body
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def unseal(blob: bytes, magic: bytes, what: str) -> _Reader:
    if blob[:len(magic)] != magic:
        raise CheckpointError(f"not a {what} file: bad magic {blob[:len(magic)]!r}, expected {magic!r}")
    if len(blob) < len(magic) + 4:
        raise CheckpointError("truncated file")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{what} checksum mismatch (file corrupted)")
    return _Reader(blob[:-4], len(magic))


def checkpoint_bytes(models: ModelPair) -> bytes:
    cfg_json = canonical_json(models.config.to_dict())
    arrays: dict[str, np.ndarray] = {}
    for net in NETS:
        for k, t in getattr(models, net).items():
            arrays[f"{net}.{k}"] = t.data
        opt: AdamState = getattr(models, f"opt_{net}")
        for k in opt.m:
            arrays[f"opt_{net}.m.{k}"] = opt.m[k]
            arrays[f"opt_{net}.v.{k}"] = opt.v[k]
    for dom in ("x", "y"):
        ns: NormStats = getattr(models, f"norm_{dom}")
        arrays[f"norm_{dom}.mean"] = ns.mean
        arrays[f"norm_{dom}.std"] = ns.std
    counters = {
        "epoch": models.epoch, "iteration": models.iteration, "decay_iters": models.decay_iters,
        "adam_steps": {net: getattr(models, f"opt_{net}").step_count for net in NETS},
        "f0_x": [models.f0_x.mu, models.f0_x.sigma, models.f0_x.count],
        "f0_y": [models.f0_y.mu, models.f0_y.sigma, models.f0_y.count],
    }
    body = b"".join([
        struct.pack("<H", CKPT_VERSION),
        hashlib.sha256(cfg_json).digest(),
        pack_blob(cfg_json),
        pack_arrays(arrays),
        pack_blob(canonical_json(counters)),
        pack_blob(canonical_json(models.rng.bit_generator.state)),
    ])
    return seal(CKPT_MAGIC, body)


def checkpoint_from_bytes(blob: bytes, expect_config: CycleGanConfig | None = None) -> ModelPair:
    rd = unseal(blob, CKPT_MAGIC, "checkpoint")
    (version,) = rd.unpack("<H")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    digest = rd.blob[rd.off:rd.off + 32]
    rd.off += 32
    cfg_json = rd.blob_bytes()
    if hashlib.sha256(cfg_json).digest() != digest:
        raise CheckpointError("config digest mismatch")
    config = CycleGanConfig.from_dict(json.loads(cfg_json))
    if expect_config is not None and _model_fields(expect_config) != _model_fields(config):
        raise CheckpointError("checkpoint was written with a different configuration")
    arrays = rd.arrays()
    counters = json.loads(rd.blob_bytes())
    rng_state = json.loads(rd.blob_bytes())

    def params(net):
        pre = f"{net}."
        return {k[len(pre):]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith(pre)}

    def opt(net):
        m = {k[len(f"opt_{net}.m."):]: v for k, v in arrays.items() if k.startswith(f"opt_{net}.m.")}
        v = {k[len(f"opt_{net}.v."):]: a for k, a in arrays.items() if k.startswith(f"opt_{net}.v.")}
        return AdamState(m, v, counters["adam_steps"][net], config.beta1, config.beta2)

    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = rng_state
    f0x, f0y = counters["f0_x"], counters["f0_y"]
    return ModelPair(
        config, params("g_xy"), params("g_yx"), params("d_x"), params("d_y"),
        opt("g_xy"), opt("g_yx"), opt("d_x"), opt("d_y"),
        NormStats(arrays["norm_x.mean"], arrays["norm_x.std"]),
        NormStats(arrays["norm_y.mean"], arrays["norm_y.std"]),
        F0Stats(f0x[0], f0x[1], int(f0x[2])), F0Stats(f0y[0], f0y[1], int(f0y[2])),
        rng, counters["epoch"], counters["iteration"], counters["decay_iters"])


def save_checkpoint(models: ModelPair, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(models))


def load_checkpoint(path, expect_config: CycleGanConfig | None = None) -> ModelPair:
    return checkpoint_from_bytes(Path(path).read_bytes(), expect_config)
