"""Multi-destination aggregated frames: layout, corruption and decoding.

Two body formats share one layout. In the erasure format each sub-frame
carries a raw packet and an FCS; the receiver keeps its packet only if the FCS
checks. In the time-sharing format each body is a channel codeword and the
receiver decodes it, ignoring the FCS.
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .channel import binary_entropy, effective_crossover

MAC_HEADER_LEN = 24
SUBHEADER_LEN = 16
FCS_LEN = 4
MAP_ENTRY_LEN = 3
MAP_HEADER_ENTRIES = 7
DEFAULT_MARGIN = 0.05
AP_ADDR = bytes.fromhex("020000000000")


class FramingError(ValueError):
    pass


class MapOverflow(FramingError):
    pass


class FrameFormat(str, Enum):
    ERASURE = "erasure"
    TIMESHARING = "timesharing"


_FORMAT_CODE = {FrameFormat.ERASURE: 0, FrameFormat.TIMESHARING: 1}


def station_addr(station_id: int) -> bytes:
    """Locally administered 6-byte address for an associated station id."""
    return bytes([0x02, 0, 0, 0, 0, station_id])


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class SubHeader:
    receiver_addr: bytes
    source_addr: bytes = AP_ADDR
    sequence: int = 0

    def __post_init__(self):
        if len(self.receiver_addr) != 6 or len(self.source_addr) != 6:
            raise FramingError("addresses are 6 bytes")
        if not 0 <= self.sequence < 1 << 16:
            raise FramingError("sequence is a 16-bit counter")

    def to_bytes(self) -> bytes:
        return self.receiver_addr + self.source_addr + struct.pack("<H", self.sequence) + b"\0\0"

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SubHeader":
        if len(raw) != SUBHEADER_LEN:
            raise FramingError(f"sub-header must be {SUBHEADER_LEN} bytes")
        return cls(bytes(raw[:6]), bytes(raw[6:12]), struct.unpack("<H", raw[12:14])[0])


@dataclass(frozen=True)
class SegmentMap:
    """(station id, byte offset) per segment; offsets count from the frame start."""

    entries: tuple = ()

    def __post_init__(self):
        ids = [s for s, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise FramingError("duplicate station ids in segment map")
        offs = [o for _, o in self.entries]
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise FramingError("segment offsets must be strictly increasing")
        for sid, off in self.entries:
            if not 0 <= sid < 256:
                raise MapOverflow(f"station id {sid} does not fit one byte")
            if not 0 <= off < 1 << 16:
                raise MapOverflow(f"offset {off} does not fit 16 bits")
        if len(self.entries) > 255:
            raise MapOverflow("at most 255 segments per frame")

    @staticmethod
    def extension_len(n_entries: int) -> int:
        return MAP_ENTRY_LEN * max(0, n_entries - MAP_HEADER_ENTRIES)

    def offset_of(self, station_id):
        for sid, off in self.entries:
            if sid == station_id:
                return off
        return None


def _encode_header(fmt: FrameFormat, smap: SegmentMap) -> bytes:
    packed = b"".join(struct.pack("<BH", s, o) for s, o in smap.entries)
    head = bytes([_FORMAT_CODE[fmt], 0, len(smap.entries)]) + packed[: MAP_ENTRY_LEN * MAP_HEADER_ENTRIES]
    return head.ljust(MAC_HEADER_LEN, b"\0") + packed[MAP_ENTRY_LEN * MAP_HEADER_ENTRIES:]


def _decode_header(raw: bytes):
    if len(raw) < MAC_HEADER_LEN:
        raise FramingError("frame shorter than the MAC header")
    code, count = raw[0], raw[2]
    fmt = {v: k for k, v in _FORMAT_CODE.items()}.get(code)
    if fmt is None:
        raise FramingError(f"unknown frame format code {code}")
    need = MAC_HEADER_LEN + SegmentMap.extension_len(count)
    if len(raw) < need:
        raise FramingError("frame truncated inside the segment map")
    packed = raw[3:3 + MAP_ENTRY_LEN * min(count, MAP_HEADER_ENTRIES)] + raw[MAC_HEADER_LEN:need]
    entries = tuple(struct.unpack_from("<BH", packed, MAP_ENTRY_LEN * i) for i in range(count))
    return fmt, SegmentMap(entries), need


@dataclass(frozen=True)
class Segment:
    subheader: SubHeader
    body: bytes
    fcs: int

    def to_bytes(self) -> bytes:
        return self.subheader.to_bytes() + self.body + struct.pack("<I", self.fcs)


@dataclass(frozen=True)
class CodedSegment:
    info_bytes: bytes
    code_rate: float
    coded_bits: np.ndarray


@dataclass(frozen=True)
class AggFrame:
    format: FrameFormat
    segment_map: SegmentMap
    segments: tuple
    code: "IdealCode | None" = field(default=None, compare=False)

    @property
    def header(self) -> bytes:
        return _encode_header(self.format, self.segment_map)

    @property
    def total_len(self) -> int:
        return len(self.header) + sum(SUBHEADER_LEN + len(s.body) + FCS_LEN for s in self.segments)

    def to_bytes(self) -> bytes:
        return self.header + b"".join(s.to_bytes() for s in self.segments)


def coded_length_bytes(info_len: int, code_rate: float) -> int:
    """Codeword length for ``info_len`` bytes at ``code_rate``, rounded up to whole bytes."""
    if not 0.0 < code_rate <= 1.0:
        raise FramingError(f"code rate must lie in (0, 1], got {code_rate!r}")
    # guard against 8k/r landing a hair above an integer through rounding
    n_bits = math.ceil(8 * info_len / code_rate - 1e-9)
    return -(-n_bits // 8)


def decodable(code_rate: float, crossover: float, margin: float = DEFAULT_MARGIN) -> bool:
    """Idealized-code decode predicate on a BSC."""
    return code_rate <= (1.0 - binary_entropy(crossover)) * (1.0 - margin)


def layer_capacity(density: float, crossover: float, interference: float = 0.0) -> float:
    """Rate supported by a codeword of ``density`` ones seen through a BSC of
    ``crossover`` with residual interference flips ``interference``.

    A uniform layer (density 0.5) gives the plain BSC capacity.
    """
    noise = effective_crossover(crossover, interference)
    return binary_entropy(effective_crossover(density, noise)) - binary_entropy(noise)


class IdealCode:
    """Stand-in for a capacity-achieving code.

    Every message maps to a pseudo-random codeword keyed by a hash of its
    bytes, which amounts to a random codebook shared by transmitter and
    receivers. Decoding picks the nearest codeword of that length and density
    ever issued by this code object, and reports success exactly when the rate
    passes the capacity predicate.
    """

    def __init__(self, seed: int = 0, margin: float = DEFAULT_MARGIN):
        if not 0.0 <= margin < 1.0:
            raise FramingError("margin must lie in [0, 1)")
        self.seed = seed
        self.margin = margin
        self._book = {}

    def _codeword(self, info: bytes, n_bits: int, density: float) -> np.ndarray:
        digest = hashlib.sha256(info).digest()
        rng = np.random.default_rng([self.seed, *struct.unpack("<4I", digest[:16])])
        if density == 0.5:
            return rng.integers(0, 2, n_bits, dtype=np.uint8)
        return (rng.random(n_bits) < density).astype(np.uint8)

    def encode(self, info: bytes, code_rate: float, density: float = 0.5) -> CodedSegment:
        n = 8 * coded_length_bytes(len(info), code_rate)
        word = self._codeword(bytes(info), n, density)
        book = self._book.setdefault((n, density), {})
        book.setdefault(word.tobytes(), (bytes(info), word))
        return CodedSegment(bytes(info), code_rate, word)

    def nearest(self, received: np.ndarray, density: float = 0.5):
        """(info, codeword, distance) of the closest issued codeword, or None."""
        book = self._book.get((len(received), density))
        if not book:
            return None
        words = list(book.values())
        dist = np.count_nonzero(np.stack([w for _, w in words]) != received, axis=1)
        i = int(np.argmin(dist))
        return words[i][0], words[i][1], int(dist[i])

    def decode(self, received: np.ndarray, code_rate: float, crossover: float | None = None,
               density: float = 0.5, interference: float = 0.0):
        """Return the decoded bytes, or None on failure.

        Without a known ``crossover`` the channel is estimated from the
        distance to the nearest codeword.
        """
        hit = self.nearest(np.asarray(received, dtype=np.uint8), density)
        if hit is None:
            return None
        info, _, dist = hit
        p = dist / len(received) if crossover is None else crossover
        p = min(p, 0.5)
        if code_rate > layer_capacity(density, p, interference) * (1.0 - self.margin):
            return None
        return info


def build_frame(packets: Sequence, fmt=FrameFormat.ERASURE, code_rates=None, code: IdealCode | None = None) -> AggFrame:
    """Aggregate ``(station_id, payload)`` pairs into one frame.

    ``code_rates`` maps station id to code rate for the time-sharing format;
    stations absent from it are sent raw, protected only by the FCS.
    """
    fmt = FrameFormat(fmt)
    if fmt is FrameFormat.TIMESHARING and code is None:
        code = IdealCode()
    code_rates = dict(code_rates or {})
    ids = [sid for sid, _ in packets]
    if len(set(ids)) != len(ids):
        raise FramingError("duplicate station ids")
    if len(ids) > 255:
        raise MapOverflow("at most 255 segments per frame")
    if any(not 0 <= sid < 256 for sid in ids):
        raise MapOverflow("station ids must fit one byte")
    segs = []
    for seq, (sid, payload) in enumerate(packets):
        payload = bytes(payload)
        if len(payload) < 1:
            raise FramingError(f"empty payload for station {sid}")
        rate = code_rates.get(sid) if fmt is FrameFormat.TIMESHARING else None
        body = payload if rate is None else np.packbits(code.encode(payload, rate).coded_bits).tobytes()
        sh = SubHeader(station_addr(sid), AP_ADDR, seq & 0xFFFF)
        segs.append(Segment(sh, body, crc32(sh.to_bytes() + body)))
    off = MAC_HEADER_LEN + SegmentMap.extension_len(len(segs))
    entries = []
    for sid, s in zip(ids, segs):
        entries.append((sid, off))
        off += SUBHEADER_LEN + len(s.body) + FCS_LEN
    return AggFrame(fmt, SegmentMap(tuple(entries)), tuple(segs), code)


class ParseResult(NamedTuple):
    status: str  # "ok", "erased", "failed", "not-addressed"
    payload: bytes | None


def bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8))


def bits_to_bytes(bits) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    if len(bits) % 8:
        raise FramingError("bit vector length must be a multiple of 8")
    return np.packbits(bits).tobytes()


def parse_frame(data, my_station_id: int, fmt=None, code_rate: float | None = None,
                code: IdealCode | None = None, crossover: float | None = None) -> ParseResult:
    """Extract this station's packet from a received frame (bytes or bit vector).

    The MAC header is assumed intact. ``fmt`` defaults to the format the
    header announces. A segment without ``code_rate`` is treated as raw and
    checked against its FCS.
    """
    raw = data if isinstance(data, (bytes, bytearray)) else bits_to_bytes(data)
    hfmt, smap, _ = _decode_header(raw)
    fmt = hfmt if fmt is None else FrameFormat(fmt)
    off = smap.offset_of(my_station_id)
    if off is None:
        return ParseResult("not-addressed", None)
    later = [o for _, o in smap.entries if o > off]
    end = min(later) if later else len(raw)
    seg = raw[off:end]
    if len(seg) < SUBHEADER_LEN + FCS_LEN:
        raise FramingError("segment shorter than its framing")
    body = seg[SUBHEADER_LEN:-FCS_LEN]
    if fmt is FrameFormat.ERASURE or code_rate is None:
        (fcs,) = struct.unpack("<I", seg[-FCS_LEN:])
        if crc32(seg[:-FCS_LEN]) != fcs:
            return ParseResult("erased", None)
        return ParseResult("ok", bytes(body))
    if code is None:
        raise FramingError("time-sharing frames need the code used to build them")
    info = code.decode(bytes_to_bits(body), code_rate, crossover)
    return ParseResult("ok", info) if info is not None else ParseResult("failed", None)


def superpose(vectors: Sequence) -> np.ndarray:
    """Modulo-2 sum of equal-length bit vectors."""
    if not len(vectors):
        raise FramingError("nothing to superpose")
    arrs = [np.asarray(v, dtype=np.uint8) for v in vectors]
    if len({a.shape for a in arrs}) != 1:
        raise FramingError("bit vectors must have equal length")
    return np.bitwise_xor.reduce(np.stack(arrs), axis=0)


def transmit_bsc(bits, p: float, seed: int) -> np.ndarray:
    """Flip each bit independently with probability ``p``."""
    if not 0.0 <= p <= 0.5:
        raise FramingError(f"crossover must lie in [0, 0.5], got {p!r}")
    bits = np.asarray(bits, dtype=np.uint8)
    flips = np.random.default_rng(seed).random(bits.shape) < p
    return bits ^ flips.astype(np.uint8)


def corrupt_frame(frame: bytes, p: float, seed: int) -> bytes:
    """Send a serialized frame through a BSC, leaving the MAC header and map intact."""
    _, _, head = _decode_header(frame)
    body = transmit_bsc(bytes_to_bits(frame[head:]), p, seed)
    return bytes(frame[:head]) + bits_to_bytes(body)


class Layer(NamedTuple):
    station_id: int
    code_rate: float
    crossover: float
    density: float = 0.5


class LayerResult(NamedTuple):
    station_id: int
    status: str  # "ok", "failed", "blocked"
    payload: bytes | None


def superpose_layers(messages: Sequence[bytes], layers: Sequence, code: IdealCode) -> np.ndarray:
    """Encode one message per layer and add the codewords modulo 2.

    All codewords must come out the same length, so pick rates accordingly.
    """
    layers = [Layer(*l) for l in layers]
    words = [code.encode(m, l.code_rate, l.density).coded_bits for m, l in zip(messages, layers)]
    if len({len(w) for w in words}) != 1:
        raise FramingError(f"layer codeword lengths differ: {[len(w) for w in words]}")
    return superpose(words)


def nested_decode(received, layers: Sequence, code: IdealCode, receiver_id=None,
                  receiver_crossover: float | None = None) -> list:
    """Successive decoding at one receiver.

    ``layers`` are listed in decoding order: the layer meant for the noisiest
    receiver first, so every receiver can peel off the layers of receivers
    noisier than itself before reaching its own. Each layer is judged against
    the interference of the layers still present. ``receiver_id`` defaults to
    the last layer; the receiver's own crossover defaults to that of its layer.
    """
    layers = [Layer(*l) for l in layers]
    if not layers:
        return []
    ids = [l.station_id for l in layers]
    if len(set(ids)) != len(ids):
        raise FramingError("duplicate station ids in layers")
    if receiver_id is None:
        receiver_id = ids[-1]
    if receiver_id not in ids:
        raise FramingError(f"receiver {receiver_id} has no layer")
    k = ids.index(receiver_id)
    p = layers[k].crossover if receiver_crossover is None else receiver_crossover
    rest = np.asarray(received, dtype=np.uint8).copy()
    out = []
    for i, layer in enumerate(layers[: k + 1]):
        s = 0.0
        for upper in layers[i + 1:]:
            s = effective_crossover(s, upper.density)
        info = code.decode(rest, layer.code_rate, p, layer.density, s)
        if info is None:
            out.append(LayerResult(layer.station_id, "failed", None))
            out.extend(LayerResult(l.station_id, "blocked", None) for l in layers[i + 1: k + 1])
            break
        rest ^= code.encode(info, layer.code_rate, layer.density).coded_bits
        out.append(LayerResult(layer.station_id, "ok", info))
    return out


def hexdump(data: bytes, width: int = 16) -> str:
    lines = []
    for off in range(0, len(data), width):
        chunk = bytes(data[off:off + width])
        text = "".join(chr(b) if 32 <= b < 127 else "." for b in chunk)
        lines.append(f"{off:08x}  {chunk.hex(' '):<{3 * width - 1}}  |{text}|")
    return "\n".join(lines)


def write_frame(path, frame) -> None:
    Path(path).write_bytes(frame.to_bytes() if isinstance(frame, AggFrame) else bytes(frame))


def read_frame(path) -> bytes:
    return Path(path).read_bytes()
