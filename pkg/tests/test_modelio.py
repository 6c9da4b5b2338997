import struct
import zlib

import numpy as np
import pytest

from tentaclenet.layers import network_forward
from tentaclenet.model import NetworkSpec, build_tentaclenet, footprint
from tentaclenet.modelio import (
    BadMagicError,
    ChecksumError,
    TruncatedModelError,
    VersionMismatchError,
    from_bytes,
    load_model,
    save_model,
    to_bytes,
)


@pytest.fixture
def spec():
    return NetworkSpec((2, 8, 8), 3, "global_pool", [
        {"kind": "conv", "out": 4, "kernel": 3, "pad": 1, "pool": 2},
        {"kind": "conv", "out": 5, "kernel": 3, "pad": 1},
        {"kind": "conv", "out": 3, "kernel": 3, "pad": 1},
        {"kind": "globalpool"},
    ])


def perturbed(spec, n, seed=0, binary=True):
    """Model with non-trivial batch-norm state, including negative scales."""
    m = build_tentaclenet(spec, n, seed, binary=binary)
    rng = np.random.default_rng(seed)
    bns = [m.shared.bn] + [l.bn for t in m.tentacles for l in t]
    for bn in bns:
        c = bn.channels
        bn.mu = rng.normal(size=c).astype(np.float32)
        bn.var = rng.uniform(0.5, 2, size=c).astype(np.float32)
        bn.gamma = (rng.uniform(0.5, 2, size=c) * rng.choice([-1, 1], size=c)).astype(np.float32)
        bn.beta = rng.normal(size=c).astype(np.float32)
    return m.finalize()


def test_roundtrip_bytes_identical(spec, tmp_path):
    m = perturbed(spec, 3)
    p1, p2 = tmp_path / "a.tnet", tmp_path / "b.tnet"
    save_model(m, p1)
    save_model(load_model(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_forward_equivalence(spec, tmp_path):
    m = perturbed(spec, 3)
    save_model(m, tmp_path / "m.tnet")
    m2 = load_model(tmp_path / "m.tnet")
    x = np.random.default_rng(1).normal(size=(100, 2, 8, 8)).astype(np.float32)
    assert network_forward(m, x).tobytes() == network_forward(m2, x).tobytes()


def test_fp_model_roundtrip(spec):
    m = perturbed(spec, 2, binary=False)
    m2 = from_bytes(to_bytes(m))
    x = np.random.default_rng(2).normal(size=(10, 2, 8, 8)).astype(np.float32)
    assert network_forward(m, x).tobytes() == network_forward(m2, x).tobytes()
    assert to_bytes(m2) == to_bytes(m)


def test_file_layout(spec):
    data = to_bytes(perturbed(spec, 2))
    assert data[:4] == b"TNET"
    assert struct.unpack("<H", data[4:6]) == (1,)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[6:-4])


def test_bad_magic(spec):
    data = bytearray(to_bytes(perturbed(spec, 1)))
    data[0] ^= 0xFF
    with pytest.raises(BadMagicError, match="bad magic"):
        from_bytes(bytes(data))


def test_version(spec):
    data = bytearray(to_bytes(perturbed(spec, 1)))
    data[4:6] = struct.pack("<H", 2)
    with pytest.raises(VersionMismatchError):
        from_bytes(bytes(data))


def test_truncated(spec):
    data = to_bytes(perturbed(spec, 1))
    with pytest.raises(TruncatedModelError):
        from_bytes(data[: len(data) // 2])


def test_corrupted_payload(spec):
    data = bytearray(to_bytes(perturbed(spec, 1)))
    data[-20] ^= 0x01
    with pytest.raises(ChecksumError):
        from_bytes(bytes(data))


def test_error_codes_distinct():
    codes = {e.code for e in (BadMagicError, VersionMismatchError, TruncatedModelError, ChecksumError)}
    assert len(codes) == 4


def test_unfinalized_rejected(spec):
    with pytest.raises(ValueError):
        to_bytes(build_tentaclenet(spec, 1, 0))


def test_footprint_after_load(spec):
    m = perturbed(spec, 3)
    assert footprint(from_bytes(to_bytes(m))).total_bytes == footprint(m).total_bytes
