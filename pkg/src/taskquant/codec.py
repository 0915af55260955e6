"""Wire format for codeword index maps.

Packet layout, multi-byte integers little-endian::

    magic         4 bytes  b"GOSM"
    version       u8       1
    H, W          u16 each original image size
    r             u8       compression ratio
    K             u16      codebook size
    coder_id      u8       0 fixed-length, 1 canonical Huffman
    symbol_count  u32      (H/r) * (W/r)
    lengths       K x u8   code length per symbol, coder 1 only (0 = absent)
    body_len      u32
    body          body_len bytes, MSB-first bitstream, zero padded

Indices are written row-major. A Huffman map with a single distinct symbol
has an empty body.
"""

from __future__ import annotations

import heapq
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"GOSM"
VERSION = 1
FIXED = 0
HUFFMAN = 1
MAX_CODE_LEN = 16
_HEAD = struct.Struct("<4sBHHBHBI")
_U32 = struct.Struct("<I")


class PacketError(ValueError):
    pass


class BadMagicError(PacketError):
    pass


class UnsupportedError(PacketError):
    pass


class TruncatedError(PacketError):
    pass


class KraftError(PacketError):
    pass


class TrailingDataError(PacketError):
    pass


class TransmissionError(IOError):
    pass


@dataclass(frozen=True)
class PacketMeta:
    H: int
    W: int
    r: int
    K: int


@dataclass(frozen=True)
class PayloadReport:
    header_bytes: int
    body_bytes: int
    total_bytes: int

    @property
    def kib(self) -> float:
        return self.total_bytes / 1024.0


# ------------------------------------------------------------ code lengths


def _limit_lengths(bl_count: list[int], max_len: int) -> list[int]:
    """Fold over-long codes into the allowed range keeping the Kraft sum at 1."""
    for i in range(len(bl_count) - 1, max_len, -1):
        while bl_count[i] > 0:
            j = i - 2
            while bl_count[j] == 0:
                j -= 1
            bl_count[i] -= 2
            bl_count[i - 1] += 1
            bl_count[j + 1] += 2
            bl_count[j] -= 1
    return bl_count[: max_len + 1]


def huffman_lengths(counts, max_len: int = MAX_CODE_LEN) -> np.ndarray:
    """Huffman code length per symbol, capped at ``max_len``; 0 for unused symbols."""
    counts = np.asarray(counts, dtype=np.int64)
    K = counts.size
    lengths = np.zeros(K, dtype=np.int64)
    used = np.flatnonzero(counts)
    if used.size == 0:
        return lengths
    if used.size == 1:
        lengths[used[0]] = 1
        return lengths
    if used.size > (1 << max_len):
        raise PacketError(f"{used.size} symbols cannot fit in {max_len}-bit codes")

    # heap entries (weight, tie, node); leaves tie on symbol, merged nodes after
    heap = [(int(counts[s]), int(s), int(s)) for s in used]
    heapq.heapify(heap)
    parent: dict[int, int] = {}
    nxt = K
    while len(heap) > 1:
        w1, _, a = heapq.heappop(heap)
        w2, _, b = heapq.heappop(heap)
        parent[a] = parent[b] = nxt
        heapq.heappush(heap, (w1 + w2, nxt, nxt))
        nxt += 1
    root = heap[0][2]
    for s in used:
        d = 0
        n = int(s)
        while n != root:
            n = parent[n]
            d += 1
        lengths[s] = d

    longest = int(lengths.max())
    if longest <= max_len:
        return lengths
    bl_count = [0] * (longest + 1)
    for s in used:
        bl_count[lengths[s]] += 1
    bl_count = _limit_lengths(bl_count, max_len)
    # most frequent symbols take the shortest codes
    ranked = sorted(used.tolist(), key=lambda s: (-counts[s], s))
    pos = 0
    for length in range(1, max_len + 1):
        for _ in range(bl_count[length]):
            lengths[ranked[pos]] = length
            pos += 1
    return lengths


def kraft_sum(lengths) -> float:
    lengths = np.asarray(lengths)
    nz = lengths[lengths > 0]
    return float(np.sum(np.ldexp(1.0, -nz.astype(np.int64))))


def canonical_codes(lengths) -> np.ndarray:
    """Canonical code values: symbols ordered by (length, symbol) count upward."""
    lengths = np.asarray(lengths, dtype=np.int64)
    codes = np.zeros(lengths.size, dtype=np.int64)
    order = sorted(np.flatnonzero(lengths).tolist(), key=lambda s: (lengths[s], s))
    code = 0
    prev = 0
    for s in order:
        code <<= int(lengths[s]) - prev
        codes[s] = code
        code += 1
        prev = int(lengths[s])
    return codes


# ------------------------------------------------------------- bit packing


def _pack(values: np.ndarray, widths: np.ndarray) -> tuple[bytes, int]:
    """Concatenate ``values[i]`` written in ``widths[i]`` bits, MSB first."""
    total = int(widths.sum())
    if total == 0:
        return b"", 0
    bits = np.zeros(total, dtype=np.uint8)
    starts = np.concatenate(([0], np.cumsum(widths)[:-1]))
    for b in range(int(widths.max())):
        sel = widths > b
        shift = widths[sel] - 1 - b
        bits[starts[sel] + b] = (values[sel] >> shift) & 1
    return np.packbits(bits).tobytes(), total


def _windows(body: bytes, width: int) -> np.ndarray:
    """Integer value of the ``width`` bits starting at every bit offset."""
    bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8))
    bits = np.concatenate((bits, np.zeros(width, dtype=np.uint8))).astype(np.int64)
    weights = 1 << np.arange(width - 1, -1, -1, dtype=np.int64)
    return sliding_window_view(bits, width)[: bits.size - width] @ weights


# ----------------------------------------------------------------- packets


def encode_packet(indices, meta: PacketMeta, coder_id: int = HUFFMAN) -> bytes:
    idx = np.asarray(indices, dtype=np.int64)
    H, W, r, K = meta.H, meta.W, meta.r, meta.K
    if not 1 <= K <= 0xFFFF:
        raise PacketError(f"K={K} outside [1, 65535]")
    if r < 1 or H % r or W % r:
        raise PacketError(f"image {H}x{W} not divisible by r={r}")
    if idx.shape != (H // r, W // r):
        raise PacketError(f"index map {idx.shape} inconsistent with {H}x{W}/r={r}")
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise PacketError("index outside [0, K)")
    flat = idx.reshape(-1)
    head = _HEAD.pack(MAGIC, VERSION, H, W, r, K, coder_id, flat.size)
    if coder_id == FIXED:
        width = (K - 1).bit_length()
        body, _ = _pack(flat, np.full(flat.size, width, dtype=np.int64))
        return head + _U32.pack(len(body)) + body
    if coder_id == HUFFMAN:
        lengths = huffman_lengths(np.bincount(flat, minlength=K))
        table = lengths.astype(np.uint8).tobytes()
        if np.count_nonzero(lengths) <= 1:
            body = b""
        else:
            codes = canonical_codes(lengths)
            body, _ = _pack(codes[flat], lengths[flat])
        return head + table + _U32.pack(len(body)) + body
    raise UnsupportedError(f"unknown coder id {coder_id}")


def _parse(blob: bytes):
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("bad packet magic")
    if len(blob) < _HEAD.size:
        raise TruncatedError("packet shorter than its header")
    _, version, H, W, r, K, coder, count = _HEAD.unpack_from(blob, 0)
    if version != VERSION:
        raise UnsupportedError(f"unsupported packet version {version}")
    if coder not in (FIXED, HUFFMAN):
        raise UnsupportedError(f"unsupported coder id {coder}")
    if r < 1 or H % r or W % r or K < 1:
        raise PacketError(f"inconsistent geometry H={H} W={W} r={r} K={K}")
    if count != (H // r) * (W // r):
        raise PacketError(f"symbol count {count} != ({H}/{r})*({W}/{r})")
    pos = _HEAD.size
    lengths = None
    if coder == HUFFMAN:
        if len(blob) < pos + K:
            raise TruncatedError("truncated code-length table")
        lengths = np.frombuffer(blob, dtype=np.uint8, count=K, offset=pos).astype(np.int64)
        pos += K
        if lengths.max(initial=0) > MAX_CODE_LEN:
            raise PacketError("code length above 16")
        if kraft_sum(lengths) > 1.0:
            raise KraftError("code lengths violate the Kraft inequality")
    if len(blob) < pos + 4:
        raise TruncatedError("missing body length")
    (body_len,) = _U32.unpack_from(blob, pos)
    pos += 4
    have = len(blob) - pos
    if have < body_len:
        raise TruncatedError(f"body has {have} of {body_len} bytes")
    if have > body_len:
        raise TrailingDataError(f"{have - body_len} bytes after the body")
    return PacketMeta(H, W, r, K), coder, count, lengths, blob[pos:], pos


def _check_padding(body: bytes, used_bits: int) -> None:
    if len(body) != (used_bits + 7) // 8:
        raise TrailingDataError("body length does not match its content")
    spare = len(body) * 8 - used_bits
    if spare and body[-1] & ((1 << spare) - 1):
        raise PacketError("non-zero padding bits")


def decode_packet(blob: bytes) -> tuple[np.ndarray, PacketMeta]:
    meta, coder, count, lengths, body, _ = _parse(bytes(blob))
    h, w = meta.H // meta.r, meta.W // meta.r
    if coder == FIXED:
        width = (meta.K - 1).bit_length()
        need = (count * width + 7) // 8
        if len(body) < need:
            raise TruncatedError("fixed-length body too short")
        _check_padding(body, count * width)
        if width == 0:
            flat = np.zeros(count, dtype=np.int64)
        else:
            bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8))[: count * width]
            weights = 1 << np.arange(width - 1, -1, -1, dtype=np.int64)
            flat = bits.reshape(count, width).astype(np.int64) @ weights
        if flat.size and flat.max() >= meta.K:
            raise PacketError("decoded index outside [0, K)")
        return flat.reshape(h, w), meta

    present = np.flatnonzero(lengths)
    if count == 0:
        _check_padding(body, 0)
        return np.zeros((h, w), dtype=np.int64), meta
    if present.size == 0:
        raise PacketError("empty code table for a non-empty map")
    if present.size == 1:
        _check_padding(body, 0)
        return np.full((h, w), int(present[0]), dtype=np.int64), meta

    L = int(lengths.max())
    order = sorted(present.tolist(), key=lambda s: (lengths[s], s))
    span = [1 << (L - int(lengths[s])) for s in order]
    sym_table = np.repeat(order, span)
    len_table = np.repeat([int(lengths[s]) for s in order], span)
    hole = (1 << L) - sym_table.size
    if hole:
        sym_table = np.concatenate((sym_table, np.full(hole, -1)))
        len_table = np.concatenate((len_table, np.zeros(hole, dtype=np.int64)))
    nbits = len(body) * 8
    win = _windows(body, L).tolist()
    syms = sym_table.tolist()
    lens = len_table.tolist()
    out = [0] * count
    p = 0
    for k in range(count):
        if p >= nbits:
            raise TruncatedError("bitstream ended early")
        v = win[p]
        s = syms[v]
        if s < 0:
            raise PacketError("invalid code in bitstream")
        out[k] = s
        p += lens[v]
    if p > nbits:
        raise TruncatedError("bitstream ended inside a code")
    _check_padding(body, p)
    return np.asarray(out, dtype=np.int64).reshape(h, w), meta


def payload(blob: bytes) -> PayloadReport:
    meta, coder, count, lengths, body, body_start = _parse(bytes(blob))
    return PayloadReport(header_bytes=body_start, body_bytes=len(body), total_bytes=len(blob))


def header_size(coder_id: int, K: int) -> int:
    return _HEAD.size + 4 + (K if coder_id == HUFFMAN else 0)


# ---------------------------------------------------------------- channel


class LoopbackChannel:
    """In-memory link: frames are u32 length + packet + u32 CRC-32.

    ``flip_prob`` flips each transmitted bit independently (seeded); it exists
    to show that corruption is always reported.
    """

    def __init__(self, flip_prob: float = 0.0, seed: int = 0):
        self.flip_prob = flip_prob
        self.rng = np.random.default_rng(seed)
        self._wire = bytearray()

    def send(self, packet: bytes) -> None:
        framed = _U32.pack(len(packet)) + packet
        frame = bytearray(framed + _U32.pack(zlib.crc32(framed)))
        if self.flip_prob > 0:
            bits = np.unpackbits(np.frombuffer(bytes(frame), dtype=np.uint8))
            bits ^= (self.rng.random(bits.size) < self.flip_prob).astype(np.uint8)
            frame = bytearray(np.packbits(bits).tobytes())
        self._wire += frame

    def pending(self) -> int:
        return len(self._wire)

    def receive(self) -> bytes:
        if len(self._wire) < 4:
            raise TransmissionError("no complete frame on the wire")
        (n,) = _U32.unpack_from(self._wire, 0)
        end = 4 + n + 4
        if len(self._wire) < end:
            self._wire.clear()
            raise TransmissionError("frame length exceeds received data")
        framed = bytes(self._wire[: 4 + n])
        (crc,) = _U32.unpack_from(self._wire, 4 + n)
        del self._wire[:end]
        if zlib.crc32(framed) != crc:
            raise TransmissionError("CRC mismatch")
        return framed[4:]

    def receive_all(self) -> list[bytes]:
        out = []
        while self._wire:
            out.append(self.receive())
        return out


def transmit_loopback(packet: bytes, channel_seed: int = 0, flip_prob: float = 0.0) -> bytes:
    ch = LoopbackChannel(flip_prob, channel_seed)
    ch.send(packet)
    received = ch.receive()
    if ch.pending():
        raise TransmissionError("unexpected bytes after frame")
    return received
