"""Binary model file format.

    "TNET" | u16 version | payload | u32 crc32(payload)

All integers and floats are little-endian. The payload holds a header (flags,
head kind, n, classes, features, sha256 of the canonical spec JSON, the spec
JSON and a metadata JSON blob) followed by layer records. A record is a kind
tag, tentacle/layer indices, six geometry ints and a list of named arrays;
float arrays are raw float32, packed weights use the bitcore word layout.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .bitcore import BitTensor
from .layers import BatchNormParams, Threshold
from .model import NetworkSpec, TentacleNetModel, build_tentaclenet

MAGIC = b"TNET"
VERSION = 1
SHARED = 0xFFFF

TAG_SHARED_CONV, TAG_BCONV, TAG_FCONV, TAG_FC = 1, 2, 3, 4
ARRAY_NAMES = ("weight", "bias", "packed", "alpha", "c", "flipped", "mu", "var", "gamma", "beta", "eps")
DTYPES = {0: "<f4", 1: "<u8", 2: "|u1"}


class ModelFormatError(Exception):
    code = "format"


class BadMagicError(ModelFormatError):
    code = "bad_magic"


class VersionMismatchError(ModelFormatError):
    code = "version"


class TruncatedModelError(ModelFormatError):
    code = "truncated"


class ChecksumError(ModelFormatError):
    code = "checksum"


def _array(buf: io.BytesIO, name: str, arr: np.ndarray, dtype_code: int) -> None:
    arr = np.ascontiguousarray(arr, dtype=DTYPES[dtype_code])
    buf.write(struct.pack("<BBB", ARRAY_NAMES.index(name), dtype_code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _bn_arrays(bn: BatchNormParams) -> list:
    return [
        ("mu", bn.mu, 0),
        ("var", bn.var, 0),
        ("gamma", bn.gamma, 0),
        ("beta", bn.beta, 0),
        ("eps", np.array([bn.eps], np.float32), 0),
    ]


def _thr_arrays(thr: Threshold) -> list:
    return [("c", thr.c, 0), ("flipped", thr.flipped.astype(np.uint8), 2)]


def _record(buf, tag, ti, li, geometry, arrays) -> None:
    buf.write(struct.pack("<BHH6iB", tag, ti, li, *geometry, len(arrays)))
    for name, arr, code in arrays:
        _array(buf, name, arr, code)


def _payload(model: TentacleNetModel) -> bytes:
    if not model.finalized:
        raise ValueError("model must be finalized before saving")
    spec_json = model.spec.canonical_json().encode()
    meta_json = json.dumps(
        {"master_seed": model.master_seed, "seeds": model.seeds, **model.metadata}, sort_keys=True
    ).encode()
    buf = io.BytesIO()
    buf.write(
        struct.pack(
            "<BBHII",
            int(model.binary),
            0 if model.spec.head_kind == "global_pool" else 1,
            model.n,
            model.spec.classes,
            model.spec.features,
        )
    )
    buf.write(model.spec.digest())
    for blob in (spec_json, meta_json):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)

    records = []
    sh = model.shared
    arrays = [("weight", sh.conv.weight, 0), ("bias", sh.conv.bias, 0)]
    arrays += _thr_arrays(sh.threshold) if model.binary else _bn_arrays(sh.bn)
    geo = (*sh.conv.weight.shape[:2], sh.conv.weight.shape[2], sh.conv.stride, sh.conv.pad, sh.pool)
    records.append((TAG_SHARED_CONV, SHARED, 0, geo, arrays))
    for ti, tentacle in enumerate(model.tentacles):
        for li, layer in enumerate(tentacle):
            geo = (layer.in_channels, layer.out_channels, layer.kernel, layer.stride, layer.pad, layer.pool)
            if model.binary:
                arrays = [("packed", layer.packed_weights.words, 1), ("alpha", layer.alpha, 0)]
                arrays += _thr_arrays(layer.threshold) if layer.binact else _bn_arrays(layer.bn)
                records.append((TAG_BCONV, ti, li, geo, arrays))
            else:
                arrays = [("weight", layer.master, 0)] + _bn_arrays(layer.bn)
                records.append((TAG_FCONV, ti, li, geo, arrays))
    arrays = [("weight", model.fc.weight, 0), ("bias", model.fc.bias, 0)]
    records.append((TAG_FC, SHARED, 0, (*model.fc.weight.shape, 0, 0, 0, 0), arrays))

    buf.write(struct.pack("<I", len(records)))
    for rec in records:
        _record(buf, *rec)
    return buf.getvalue()


def to_bytes(model: TentacleNetModel) -> bytes:
    payload = _payload(model)
    return MAGIC + struct.pack("<H", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def save_model(model: TentacleNetModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedModelError(f"unexpected end of model data at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self):
        name_idx, code, ndim = self.unpack("<BBB")
        if name_idx >= len(ARRAY_NAMES) or code not in DTYPES:
            raise ModelFormatError("unknown array tag")
        shape = self.unpack(f"<{ndim}I")
        dt = np.dtype(DTYPES[code])
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * dt.itemsize)
        return ARRAY_NAMES[name_idx], np.frombuffer(raw, dtype=dt).reshape(shape)


def _bn_from(arrs: dict) -> BatchNormParams:
    return BatchNormParams(arrs["mu"], arrs["var"], arrs["gamma"], arrs["beta"], float(arrs["eps"][0]))


def from_bytes(data: bytes) -> TentacleNetModel:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic: not a TNET model file")
    if len(data) < 10:
        raise TruncatedModelError("file too short")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise VersionMismatchError(f"unsupported model version {version}, expected {VERSION}")
    payload, (crc,) = data[6:-4], struct.unpack("<I", data[-4:])
    r = _Reader(payload)
    binary, head, n, classes, features = r.unpack("<BBHII")
    digest = r.take(32)
    (ls,) = r.unpack("<I")
    spec_json = r.take(ls)
    (lm,) = r.unpack("<I")
    meta = json.loads(r.take(lm))
    (nrec,) = r.unpack("<I")
    records = []
    for _ in range(nrec):
        tag, ti, li, *geo_count = r.unpack("<BHH6iB")
        arrs = dict(r.array() for _ in range(geo_count[-1]))
        records.append((tag, ti, li, tuple(geo_count[:6]), arrs))
    if r.pos != len(payload) or zlib.crc32(payload) != crc:
        if r.pos != len(payload) and zlib.crc32(payload) == crc:
            raise ModelFormatError("trailing bytes after records")
        raise ChecksumError("CRC32 mismatch: model file corrupted")

    spec = NetworkSpec.from_dict(json.loads(spec_json))
    if spec.digest() != digest:
        raise ChecksumError("spec digest mismatch")
    if (spec.classes, spec.features, ("global_pool", "dense")[head]) != (
        classes,
        features,
        spec.head_kind,
    ):
        raise ModelFormatError("header disagrees with embedded spec")

    model = build_tentaclenet(spec, n, meta.get("master_seed", 0), binary=bool(binary))
    model.metadata = {k: v for k, v in meta.items() if k not in ("master_seed",)}
    model.seeds = list(meta.get("seeds", model.seeds))
    model.metadata["seeds"] = model.seeds
    for tag, ti, li, geo, arrs in records:
        copy = {k: np.array(v) for k, v in arrs.items()}
        if tag == TAG_SHARED_CONV:
            sh = model.shared
            sh.conv.weight, sh.conv.bias = copy["weight"], copy["bias"]
            if binary:
                sh.threshold = Threshold(copy["c"], copy["flipped"].astype(bool))
                sh.bn = None
            else:
                sh.bn = _bn_from(copy)
        elif tag in (TAG_BCONV, TAG_FCONV):
            layer = model.tentacles[ti][li]
            if geo != (layer.in_channels, layer.out_channels, layer.kernel, layer.stride, layer.pad, layer.pool):
                raise ModelFormatError(f"geometry mismatch in tentacle {ti} layer {li}")
            if tag == TAG_BCONV:
                layer.master = None
                layer.packed_weights = BitTensor(
                    (layer.out_channels, layer.fan_in), copy["packed"].astype(np.uint64)
                )
                layer.alpha = copy["alpha"]
                if layer.binact:
                    layer.threshold = Threshold(copy["c"], copy["flipped"].astype(bool))
                    layer.bn = None
                else:
                    layer.bn = _bn_from(copy)
            else:
                layer.master = copy["weight"]
                layer.bn = _bn_from(copy)
        elif tag == TAG_FC:
            model.fc.weight, model.fc.bias = copy["weight"], copy["bias"]
        else:
            raise ModelFormatError(f"unknown record tag {tag}")
    model.finalized = True
    return model


def load_model(path) -> TentacleNetModel:
    return from_bytes(Path(path).read_bytes())
