"""Bit-packed {-1,+1} tensors and XNOR/popcount kernels.

Layout: each logical row (all leading dims flattened, last dim = row bits)
starts a fresh run of 64-bit words. Within a word, the least significant bit
holds the lowest element index. Bit 1 encodes +1, bit 0 encodes -1. Pad bits
past ``row_bits`` are always zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

WORD_BITS = 64


def words_per_row(row_bits: int) -> int:
    return (row_bits + WORD_BITS - 1) // WORD_BITS


def _valid_mask(row_bits: int) -> np.ndarray:
    """Per-word mask with ones on the valid bit positions of a row."""
    nw = words_per_row(row_bits)
    mask = np.full(nw, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    tail = row_bits % WORD_BITS
    if tail:
        mask[-1] = np.uint64((1 << tail) - 1)
    return mask


@dataclass(frozen=True)
class BitTensor:
    """Immutable packed sign tensor.

    ``words`` has shape ``(rows, words_per_row(row_bits))`` and dtype uint64.
    """

    shape: tuple[int, ...]
    words: np.ndarray

    def __post_init__(self):
        if len(self.shape) == 0:
            raise ValueError("BitTensor needs at least one dimension")
        w = np.ascontiguousarray(self.words, dtype=np.uint64)
        if w.shape != (self.rows, words_per_row(self.row_bits)):
            raise ValueError(
                f"word array shape {w.shape} does not match tensor shape {self.shape}"
            )
        if self.row_bits and w.size and np.any(w[:, -1] & ~_valid_mask(self.row_bits)[-1]):
            raise ValueError("pad bits must be zero")
        w.setflags(write=False)
        object.__setattr__(self, "words", w)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @property
    def row_bits(self) -> int:
        return int(self.shape[-1])

    @property
    def rows(self) -> int:
        return int(np.prod(self.shape[:-1], dtype=np.int64))

    @property
    def words_per_row(self) -> int:
        return words_per_row(self.row_bits)

    @property
    def nbytes(self) -> int:
        return self.rows * self.words_per_row * 8

    def row(self, i: int) -> BitTensor:
        return BitTensor((self.row_bits,), self.words[i : i + 1])

    def reshape(self, *shape: int) -> BitTensor:
        """Regroup leading dims; the row length must stay the same."""
        if shape[-1] != self.row_bits or int(np.prod(shape[:-1], dtype=np.int64)) != self.rows:
            raise ValueError(f"cannot reshape {self.shape} to {shape} without repacking")
        return BitTensor(tuple(shape), self.words)

    def to_bits(self) -> np.ndarray:
        """Boolean array of the logical shape (True = +1)."""
        as_bytes = self.words.astype("<u8", copy=False).view(np.uint8)
        bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, : self.row_bits]
        return bits.astype(bool).reshape(self.shape)

    def to_bytes(self) -> bytes:
        return self.words.astype("<u8", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, shape: Sequence[int], data: bytes) -> BitTensor:
        shape = tuple(int(s) for s in shape)
        rows = int(np.prod(shape[:-1], dtype=np.int64))
        words = np.frombuffer(data, dtype="<u8").astype(np.uint64).reshape(
            rows, words_per_row(shape[-1])
        )
        return cls(shape, words)


def pack_bits(bits: np.ndarray) -> BitTensor:
    """Pack a boolean array (True = +1) along its last axis."""
    bits = np.asarray(bits, dtype=bool)
    if bits.ndim == 0:
        bits = bits.reshape(1)
    shape = bits.shape
    row_bits = shape[-1]
    nw = words_per_row(row_bits)
    flat = bits.reshape(-1, row_bits)
    padded = np.zeros((flat.shape[0], nw * WORD_BITS), dtype=bool)
    padded[:, :row_bits] = flat
    packed = np.packbits(padded, axis=1, bitorder="little")
    words = packed.view("<u8").astype(np.uint64)
    return BitTensor(shape, words.reshape(flat.shape[0], nw))


def pack_signs(signs: np.ndarray) -> BitTensor:
    """Pack a +-1 array; any value >= 0 is stored as +1."""
    return pack_bits(np.asarray(signs) >= 0)


def binarize(values, thresholds=0.0) -> BitTensor:
    """Bit is 1 iff value >= threshold; thresholds broadcast against values."""
    v = np.asarray(values, dtype=np.float64)
    c = np.asarray(thresholds, dtype=np.float64)
    if np.isnan(v).any() or np.isnan(c).any():
        raise ValueError("NaN in binarize input")
    if not np.isfinite(c).all():
        raise ValueError("thresholds must be finite")
    try:
        bits = np.broadcast_to(v >= c, np.broadcast_shapes(v.shape, c.shape))
    except ValueError as exc:
        raise ValueError(f"threshold shape {c.shape} does not broadcast to {v.shape}") from exc
    if bits.shape != v.shape:
        raise ValueError(f"threshold shape {c.shape} would enlarge values {v.shape}")
    return pack_bits(bits)


def unpack_to_signs(t: BitTensor) -> np.ndarray:
    """Flat float array of +-1.0, length rows * row_bits."""
    return np.where(t.to_bits().reshape(-1), 1.0, -1.0)


def _popcount_rows(x: np.ndarray) -> np.ndarray:
    return np.bitwise_count(x).sum(axis=-1, dtype=np.int64)


def xnor_popcount_dot(a: BitTensor, b: BitTensor, n: int | None = None) -> int:
    """Integer dot product of two packed +-1 rows: 2*popcount(xnor) - n."""
    if n is None:
        n = a.row_bits
    if a.rows != 1 or b.rows != 1:
        raise ValueError("xnor_popcount_dot expects single rows")
    if a.row_bits != n or b.row_bits != n:
        raise ValueError(f"row lengths {a.row_bits}, {b.row_bits} do not match n={n}")
    x = ~(a.words[0] ^ b.words[0]) & _valid_mask(n)
    return int(2 * int(np.bitwise_count(x).sum()) - n)


def xnor_gemm(A: BitTensor, B: BitTensor, chunk: int = 4096) -> np.ndarray:
    """out[i, j] = dot(A row i, B row j) over +-1 values, as int32 (M x P)."""
    if A.row_bits != B.row_bits:
        raise ValueError(f"row bit mismatch: {A.row_bits} vs {B.row_bits}")
    n = A.row_bits
    mask = _valid_mask(n)
    a, b = A.words, B.words
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.int32)
    for start in range(0, a.shape[0], chunk):
        blk = a[start : start + chunk]
        x = ~(blk[:, None, :] ^ b[None, :, :]) & mask
        out[start : start + chunk] = 2 * _popcount_rows(x) - n
    return out


def im2row_binary(fmap: BitTensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> BitTensor:
    """Lower a packed C x H x W (or B x C x H x W) map to one row per output pixel.

    Row order is (batch, out_y, out_x); within a row bits run channel-major,
    then kernel row, then kernel column. Spatial padding is bit 0 (-1).
    """
    if kh < 1 or kw < 1 or stride < 1 or pad < 0:
        raise ValueError("kernel and stride must be >= 1, pad >= 0")
    bits = fmap.to_bits()
    if bits.ndim == 3:
        bits = bits[None]
    if bits.ndim != 4:
        raise ValueError(f"expected C x H x W or B x C x H x W, got {fmap.shape}")
    cols, ho, wo = window_view(bits, kh, kw, stride, pad, fill=False)
    return pack_bits(cols)


def window_view(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, fill=0):
    """im2col for B x C x H x W arrays -> (B*Ho*Wo, C*kh*kw), Ho, Wo."""
    b, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"output size {ho}x{wo} is not positive")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, ho, wo
