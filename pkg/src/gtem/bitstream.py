"""Range coder over quantized Gaussians and the GOP container.

The coder is a carry-propagating 32-bit range coder with byte-wise
renormalization and a fixed frequency total of 2**16. Two conventions keep
per-segment overhead to a few bits:

* the first output byte is always zero and is not stored;
* the flush picks the value in the final interval with the most trailing
  zero bits, trailing zero bytes are stripped, and the decoder reads zeros
  past the end of a segment.
"""
from __future__ import annotations

import dataclasses
import struct
import zlib
from bisect import bisect_right
from typing import Iterable, Sequence

import numpy as np

from .ops import round_half_away

PRECISION = 16
TOTAL = 1 << PRECISION
ALPHABET_BOUND = 255
BYPASS_BITS = 16
TAIL_SIGMAS = 5.0

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF

MAGIC = b"GTEM"
VERSION = 1
HEADER = struct.Struct("<4sBBHHHBBQI")
HEADER_SIZE = HEADER.size
_LEN = struct.Struct("<I")
N_SLICE_SEGMENTS = 5

FLAG_NO_CONDITION = 0x01
FLAG_FULL_PRESET = 0x02


class BitstreamError(ValueError):
    """Malformed or mismatched bitstream."""


class ChecksumError(BitstreamError):
    pass


class ModelMismatchError(BitstreamError):
    pass


# ----------------------------------------------------------------------------
# probability tables


@dataclasses.dataclass(frozen=True)
class CdfTable:
    """Quantized distribution over ``center + [-k, k]`` plus one escape symbol.

    ``cum`` has ``2k + 3`` entries: ``cum[0] = 0``, ``cum[-1] = TOTAL``; index
    ``2k + 1`` is the escape, followed by a ``BYPASS_BITS`` raw value.
    """

    center: int
    k: int
    cum: tuple

    @property
    def freqs(self) -> np.ndarray:
        return np.diff(np.asarray(self.cum))

    @property
    def escape(self) -> int:
        return 2 * self.k + 1

    def index(self, value: int) -> int:
        i = value - self.center + self.k
        return i if 0 <= i <= 2 * self.k else self.escape

    def cost_bits(self, value: int) -> float:
        """Exact bits the coder spends on ``value`` (excluding flush)."""
        i = self.index(value)
        bits = PRECISION - np.log2(self.cum[i + 1] - self.cum[i])
        return float(bits + (BYPASS_BITS if i == self.escape else 0))


def _alphabet_half_width(sigma: np.ndarray, bound: int) -> np.ndarray:
    return np.clip(np.ceil(TAIL_SIGMAS * sigma + 0.5), 1, bound).astype(np.int64)


def build_cdfs(mu, sigma, bound: int = ALPHABET_BOUND) -> list[CdfTable]:
    """One table per element of ``mu``/``sigma`` (any matching shapes).

    Each alphabet spans ``±min(bound, ceil(5 sigma + 0.5))`` around
    ``round(mu)``; mass outside goes to the escape symbol. Probabilities are
    quantized once (min frequency 1) and the rounding remainder is assigned
    to the most probable symbol, so everything after that is integer-exact.
    """
    from .entropy_model import gaussian_mass

    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if mu.shape != sigma.shape:
        raise ValueError(f"mu {mu.shape} and sigma {sigma.shape} differ")
    if mu.size == 0:
        return []
    if not (np.all(np.isfinite(mu)) and np.all(sigma > 0)):
        raise ValueError("table parameters must be finite with sigma > 0")
    center = round_half_away(mu).astype(np.int64)
    k = _alphabet_half_width(sigma, bound)
    kmax = int(k.max())
    grid = np.arange(-kmax, kmax + 1)
    inside = np.abs(grid)[None, :] <= k[:, None]
    p = np.where(inside, gaussian_mass(grid[None, :] - (mu - center)[:, None], sigma[:, None]), 0.0)
    tail = np.clip(1.0 - p.sum(axis=1), 0.0, 1.0)
    freq = np.where(inside, np.maximum(1, np.rint(p * TOTAL)), 0).astype(np.int64)
    esc = np.maximum(1, np.rint(tail * TOTAL)).astype(np.int64)
    rows = np.arange(mu.size)
    peak = p.argmax(axis=1)
    freq[rows, peak] += TOTAL - freq.sum(axis=1) - esc
    if np.any(freq[rows, peak] < 1):
        raise ValueError("probability table normalization failed")
    cums = np.cumsum(freq, axis=1)
    tables = []
    for i in range(mu.size):
        ki = int(k[i])
        lo = kmax - ki
        body = cums[i, lo:lo + 2 * ki + 1] - (cums[i, lo - 1] if lo else 0)
        tables.append(CdfTable(int(center[i]), ki, (0, *body.tolist(), TOTAL)))
    return tables


def build_cdf(mu: float, sigma: float, bound: int = ALPHABET_BOUND) -> CdfTable:
    return build_cdfs([mu], [sigma], bound)[0]


# ----------------------------------------------------------------------------
# range coder


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start: int, size: int) -> None:
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, table: CdfTable, value: int) -> None:
        i = table.index(value)
        self.encode(table.cum[i], table.cum[i + 1] - table.cum[i])
        if i == table.escape:
            d = value - table.center
            if abs(d) >= 1 << (BYPASS_BITS - 1):
                raise ValueError(f"value {value} too far from table center {table.center} for bypass")
            self.encode((d << 1) ^ (d >> 63) if d < 0 else d << 1, 1)

    def finish(self) -> bytes:
        hi = self.low + self.range
        for bits in range(32, -1, -1):
            v = ((self.low + (1 << bits) - 1) >> bits) << bits
            if v < hi:
                break
        self.low = v
        for _ in range(5):
            self._shift_low()
        out = self.out
        if out[0] != 0:
            raise AssertionError("range coder lead byte must be zero")
        return bytes(out[1:]).rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def target(self) -> int:
        self._r = self.range >> PRECISION
        return min(self.code // self._r, TOTAL - 1)

    def consume(self, start: int, size: int) -> None:
        r = self._r
        self.code -= r * start
        self.range = r * size
        if self.code < 0 or self.code >= self.range:
            raise BitstreamError("range decoder desynchronized (corrupt payload)")
        while self.range < _TOP:
            self.code = (self.code << 8) | self._byte()
            self.range <<= 8

    def decode_symbol(self, table: CdfTable) -> int:
        cum = table.cum
        i = bisect_right(cum, self.target()) - 1
        self.consume(cum[i], cum[i + 1] - cum[i])
        if i != table.escape:
            return table.center + i - table.k
        z = self.target()
        self.consume(z, 1)
        d = -((z + 1) >> 1) if z & 1 else z >> 1
        return table.center + d


def range_encode(values: Iterable[int], tables: Sequence[CdfTable]) -> bytes:
    enc = RangeEncoder()
    values = [int(v) for v in values]
    if len(values) != len(tables):
        raise ValueError(f"{len(values)} values for {len(tables)} tables")
    for v, t in zip(values, tables):
        enc.encode_symbol(t, v)
    return enc.finish()


def range_decode(data: bytes, tables: Sequence[CdfTable]) -> np.ndarray:
    dec = RangeDecoder(data)
    return np.array([dec.decode_symbol(t) for t in tables], dtype=np.int64)


# ----------------------------------------------------------------------------
# container


@dataclasses.dataclass(frozen=True)
class StreamHeader:
    width: int
    height: int
    frame_count: int
    gop_size: int
    lambda_index: int
    model_hash: int
    flags: int = 0
    version: int = VERSION

    def gop_lengths(self) -> list[int]:
        full, rest = divmod(self.frame_count, self.gop_size)
        return [self.gop_size] * full + ([rest] if rest else [])


@dataclasses.dataclass
class GopPayload:
    z: bytes
    frames: list  # per frame, N_SLICE_SEGMENTS payloads

    def payload_bytes(self) -> int:
        return len(self.z) + sum(len(s) for f in self.frames for s in f)


def pack_gop(gop: GopPayload) -> bytes:
    parts = [_LEN.pack(len(gop.z)), gop.z]
    for frame in gop.frames:
        if len(frame) != N_SLICE_SEGMENTS:
            raise ValueError(f"frame has {len(frame)} slice segments, expected {N_SLICE_SEGMENTS}")
        for seg in frame:
            parts += [_LEN.pack(len(seg)), seg]
    return b"".join(parts)


def _read_segment(buf: bytes, pos: int) -> tuple[bytes, int]:
    if pos + _LEN.size > len(buf):
        raise BitstreamError("truncated stream: missing segment length")
    (n,) = _LEN.unpack_from(buf, pos)
    pos += _LEN.size
    if pos + n > len(buf):
        raise BitstreamError("truncated stream: segment shorter than its length prefix")
    return bytes(buf[pos:pos + n]), pos + n


def unpack_gop(buf: bytes, pos: int, n_frames: int) -> tuple[GopPayload, int]:
    z, pos = _read_segment(buf, pos)
    frames = []
    for _ in range(n_frames):
        segs = []
        for _ in range(N_SLICE_SEGMENTS):
            seg, pos = _read_segment(buf, pos)
            segs.append(seg)
        frames.append(segs)
    return GopPayload(z, frames), pos


def pack_stream(header: StreamHeader, gops: Sequence[GopPayload]) -> bytes:
    lengths = header.gop_lengths()
    if [len(g.frames) for g in gops] != lengths:
        raise ValueError(f"GOP frame counts {[len(g.frames) for g in gops]} do not match header {lengths}")
    body = b"".join(pack_gop(g) for g in gops)
    head = HEADER.pack(
        MAGIC, header.version, header.flags, header.width, header.height, header.frame_count,
        header.gop_size, header.lambda_index, header.model_hash, zlib.crc32(body),
    )
    return head + body


def read_header(data: bytes) -> tuple[StreamHeader, int]:
    if len(data) < HEADER_SIZE:
        raise BitstreamError("truncated stream: incomplete header")
    magic, version, flags, w, h, n, gop, lam, mhash, crc = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    if gop < 1:
        raise BitstreamError("gop size must be >= 1")
    return StreamHeader(w, h, n, gop, lam, mhash, flags, version), crc


def unpack_stream(data: bytes, expected_hash: int | None = None) -> tuple[StreamHeader, list[GopPayload]]:
    header, crc = read_header(data)
    if expected_hash is not None and header.model_hash != expected_hash:
        raise ModelMismatchError(
            f"stream was written by model {header.model_hash:016x}, checkpoint is {expected_hash:016x}"
        )
    body = data[HEADER_SIZE:]
    if zlib.crc32(body) != crc:
        raise ChecksumError("payload checksum mismatch")
    gops = []
    pos = 0
    for n in header.gop_lengths():
        gop, pos = unpack_gop(body, pos, n)
        gops.append(gop)
    if pos != len(body):
        raise BitstreamError(f"{len(body) - pos} trailing bytes after the last GOP")
    return header, gops
