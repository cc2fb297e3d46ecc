"""Baseline sequential JPEG (JFIF) encoder and decoder with the Annex K Huffman tables.

Encoding reuses the pixel transforms of :mod:`preedit.proxy` without gradient
recording, so :func:`reconstruct` (float, unclamped) equals the proxy with
hard rounding. :func:`decode` instead follows ordinary 8-bit decoder
arithmetic: integer inverse DCT, triangle-filter chroma upsampling and
fixed-point colour conversion, each stage rounded to 8-bit samples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .proxy import forward_transform, inverse_transform
from .tables import AC_CHROMA, AC_LUMA, DC_CHROMA, DC_LUMA, ZIGZAG, QuantTables

SOI, EOI, APP0, DQT, SOF0, DHT, SOS, DRI, COM = 0xD8, 0xD9, 0xE0, 0xDB, 0xC0, 0xC4, 0xDA, 0xDD, 0xFE


class JpegDecodeError(ValueError):
    """Malformed or unsupported stream; ``segment`` names where decoding failed."""

    def __init__(self, segment: str, message: str):
        super().__init__(f"{segment}: {message}")
        self.segment = segment


@dataclass(frozen=True)
class JpegBitstream:
    data: bytes
    header_bytes: int
    entropy_bytes: int
    height: int
    width: int

    def save(self, path) -> None:
        from .params import atomic_write_bytes

        atomic_write_bytes(path, self.data)

    @classmethod
    def from_bytes(cls, data: bytes) -> "JpegBitstream":
        parsed = _parse(data)
        return cls(data, len(data) - parsed.entropy_bytes, parsed.entropy_bytes, parsed.height, parsed.width)


@dataclass(frozen=True)
class RateRecord:
    total_bits: int
    entropy_bits: int
    pixels: int
    q: int
    image_id: str | None = None

    @property
    def bpp(self) -> float:
        return self.total_bits / self.pixels

    @property
    def entropy_bpp(self) -> float:
        return self.entropy_bits / self.pixels


# ---------------------------------------------------------------- Huffman


def huffman_codes(spec) -> dict[int, tuple[int, int]]:
    """symbol -> (code, length) from a (counts, symbols) table specification."""
    counts, symbols = spec
    codes = {}
    code, k = 0, 0
    for length, n in enumerate(counts, start=1):
        for _ in range(n):
            codes[symbols[k]] = (code, length)
            code += 1
            k += 1
        code <<= 1
    return codes


def _bitstrings(spec) -> dict[int, str]:
    return {s: format(c, f"0{n}b") for s, (c, n) in huffman_codes(spec).items()}


_ENC = {
    "dc0": _bitstrings(DC_LUMA),
    "ac0": _bitstrings(AC_LUMA),
    "dc1": _bitstrings(DC_CHROMA),
    "ac1": _bitstrings(AC_CHROMA),
}


def _magnitude_bits(v: int) -> tuple[int, str]:
    size = abs(v).bit_length()
    if size == 0:
        return 0, ""
    if v < 0:
        v += (1 << size) - 1
    return size, format(v, f"0{size}b")


def _encode_block(zz: np.ndarray, prev_dc: int, dc_codes, ac_codes, out: list) -> int:
    dc = int(zz[0])
    size, bits = _magnitude_bits(dc - prev_dc)
    out.append(dc_codes[size])
    out.append(bits)
    nonzero = np.flatnonzero(zz[1:]) + 1
    last = 0
    for k in nonzero:
        run = k - last - 1
        while run > 15:
            out.append(ac_codes[0xF0])
            run -= 16
        size, bits = _magnitude_bits(int(zz[k]))
        out.append(ac_codes[(run << 4) | size])
        out.append(bits)
        last = k
    if last != 63:
        out.append(ac_codes[0x00])
    return dc


def _scan_order(shapes, subsample: bool):
    """Yield (component, block row, block col) in interleaved MCU order."""
    if subsample:
        mcu_rows, mcu_cols = shapes[1][:2]
        for my in range(mcu_rows):
            for mx in range(mcu_cols):
                for dy in (0, 1):
                    for dx in (0, 1):
                        yield 0, 2 * my + dy, 2 * mx + dx
                yield 1, my, mx
                yield 2, my, mx
    else:
        rows, cols = shapes[0][:2]
        for by in range(rows):
            for bx in range(cols):
                for comp in (0, 1, 2):
                    yield comp, by, bx


def _entropy_code(fields, subsample: bool) -> bytes:
    pieces: list[str] = []
    prev = [0, 0, 0]
    zigzagged = [f.reshape(f.shape[0], f.shape[1], 64)[:, :, ZIGZAG] for f in fields]
    for comp, by, bx in _scan_order([f.shape for f in fields], subsample):
        t = "0" if comp == 0 else "1"
        prev[comp] = _encode_block(zigzagged[comp][by, bx], prev[comp], _ENC["dc" + t], _ENC["ac" + t], pieces)
    bits = "".join(pieces)
    bits += "1" * (-len(bits) % 8)
    raw = int(bits, 2).to_bytes(len(bits) // 8, "big") if bits else b""
    return raw.replace(b"\xff", b"\xff\x00")


def _segment(marker: int, payload: bytes) -> bytes:
    return struct.pack(">BBH", 0xFF, marker, len(payload) + 2) + payload


def _dht_payload() -> bytes:
    out = b""
    for tc_th, spec in ((0x00, DC_LUMA), (0x10, AC_LUMA), (0x01, DC_CHROMA), (0x11, AC_CHROMA)):
        out += bytes([tc_th]) + bytes(spec[0]) + bytes(spec[1])
    return out


def _headers(tables: QuantTables, height: int, width: int, subsample: bool) -> bytes:
    app0 = b"JFIF\x00" + struct.pack(">BBBHHBB", 1, 1, 0, 1, 1, 0, 0)
    dqt = b""
    for tq, table in enumerate((tables.luma, tables.chroma)):
        dqt += bytes([tq]) + bytes(int(v) for v in np.asarray(table).ravel()[ZIGZAG])
    luma_sampling = 0x22 if subsample else 0x11
    sof = struct.pack(">BHHB", 8, height, width, 3) + bytes([1, luma_sampling, 0, 2, 0x11, 1, 3, 0x11, 1])
    sos = bytes([3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0])
    return (
        bytes([0xFF, SOI])
        + _segment(APP0, app0)
        + _segment(DQT, dqt)
        + _segment(SOF0, sof)
        + _segment(DHT, _dht_payload())
        + _segment(SOS, sos)
    )


def quantize_image(img, q, subsample: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hard-quantized (Y, U, V) block fields as int64 arrays of shape (nby, nbx, 8, 8)."""
    tables = q if isinstance(q, QuantTables) else QuantTables.from_quality(q)
    with ad.no_grad():
        fields = forward_transform(img, tables, subsample, rounding="hard")
    return tuple(f.value.astype(np.int64) for f in fields)


def encode_coefficients(fields, tables: QuantTables, height: int, width: int, subsample: bool = True) -> JpegBitstream:
    header = _headers(tables, height, width, subsample)
    body = _entropy_code(fields, subsample)
    data = header + body + bytes([0xFF, EOI])
    return JpegBitstream(data, len(data) - len(body), len(body), height, width)


def encode(img, q: int, subsample: bool = True) -> JpegBitstream:
    """Encode a planar RGB image in [0, 1] of shape (3, H, W) at quality ``q``."""
    img = np.asarray(ad.as_tensor(img).value)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected planar RGB (3, H, W), got {img.shape}")
    _, h, w = img.shape
    if h > 65535 or w > 65535:
        raise ValueError("image too large for baseline JPEG")
    tables = QuantTables.from_quality(q)
    return encode_coefficients(quantize_image(img, tables, subsample), tables, h, w, subsample)


# ---------------------------------------------------------------- decoding


@dataclass
class _Parsed:
    height: int
    width: int
    components: list  # (id, h, v, tq)
    qtables: dict
    fields: list
    entropy_bytes: int


def _read_segment(data: bytes, pos: int, name: str) -> tuple[bytes, int]:
    if pos + 2 > len(data):
        raise JpegDecodeError(name, "truncated segment length")
    (length,) = struct.unpack(">H", data[pos : pos + 2])
    end = pos + length
    if length < 2 or end > len(data):
        raise JpegDecodeError(name, f"bad segment length {length}")
    return data[pos + 2 : end], end


def _decode_tables(payload: bytes) -> dict:
    tables = {}
    pos = 0
    while pos < len(payload):
        tc_th = payload[pos]
        counts = tuple(payload[pos + 1 : pos + 17])
        n = sum(counts)
        symbols = tuple(payload[pos + 17 : pos + 17 + n])
        if len(counts) != 16 or len(symbols) != n:
            raise JpegDecodeError("DHT", "truncated Huffman table")
        lookup = {format(c, f"0{ln}b"): s for s, (c, ln) in huffman_codes((counts, symbols)).items()}
        tables[(tc_th >> 4, tc_th & 15)] = lookup
        pos += 17 + n
    return tables


def _entropy_segment(data: bytes, pos: int) -> tuple[bytes, int]:
    """Entropy-coded bytes starting at ``pos`` (still stuffed) and the index of the next marker."""
    i = pos
    while True:
        i = data.find(b"\xff", i)
        if i < 0 or i + 1 >= len(data):
            raise JpegDecodeError("SOS", "entropy-coded segment not terminated by a marker")
        nxt = data[i + 1]
        if nxt == 0x00 or 0xD0 <= nxt <= 0xD7:
            i += 2
            continue
        return data[pos:i], i


class _BitReader:
    def __init__(self, raw: bytes):
        unstuffed = raw.replace(b"\xff\x00", b"\xff")
        self.bits = "".join(format(b, "08b") for b in unstuffed)
        self.pos = 0

    def huffman(self, lookup: dict, what: str) -> int:
        bits, pos = self.bits, self.pos
        for length in range(1, 17):
            sym = lookup.get(bits[pos : pos + length])
            if sym is not None and pos + length <= len(bits):
                self.pos = pos + length
                return sym
        raise JpegDecodeError("SOS", f"invalid {what} Huffman code at bit {pos}")

    def receive(self, size: int) -> int:
        if size == 0:
            return 0
        if self.pos + size > len(self.bits):
            raise JpegDecodeError("SOS", "entropy-coded data exhausted")
        v = int(self.bits[self.pos : self.pos + size], 2)
        self.pos += size
        if v < (1 << (size - 1)):
            v -= (1 << size) - 1
        return v


def _decode_scan(raw: bytes, comps, scan_tables, huff, height, width) -> list:
    hmax = max(c[1] for c in comps)
    vmax = max(c[2] for c in comps)
    mcux = -(-width // (8 * hmax))
    mcuy = -(-height // (8 * vmax))
    fields = [np.zeros((mcuy * c[2], mcux * c[1], 64), dtype=np.int64) for c in comps]
    reader = _BitReader(raw)
    prev = [0] * len(comps)
    tables = []
    for ci in range(len(comps)):
        td, ta = scan_tables[ci]
        try:
            tables.append((huff[(0, td)], huff[(1, ta)]))
        except KeyError:
            raise JpegDecodeError("DHT", f"missing Huffman table for component {ci}") from None
    interleaved = len(comps) > 1
    order = []
    if interleaved:
        for my in range(mcuy):
            for mx in range(mcux):
                for ci, (_, h, v, _) in enumerate(comps):
                    for dy in range(v):
                        for dx in range(h):
                            order.append((ci, my * v + dy, mx * h + dx))
    else:
        rows, cols = fields[0].shape[:2]
        order = [(0, r, c) for r in range(rows) for c in range(cols)]
    for ci, by, bx in order:
        dc_table, ac_table = tables[ci]
        zz = np.zeros(64, dtype=np.int64)
        size = reader.huffman(dc_table, "DC")
        if size > 11:
            raise JpegDecodeError("SOS", f"DC magnitude category {size} out of range")
        prev[ci] += reader.receive(size)
        zz[0] = prev[ci]
        k = 1
        while k < 64:
            rs = reader.huffman(ac_table, "AC")
            run, size = rs >> 4, rs & 15
            if size == 0:
                if run == 15:
                    k += 16
                    continue
                break
            k += run
            if k > 63:
                raise JpegDecodeError("SOS", "AC run past end of block")
            zz[k] = reader.receive(size)
            k += 1
        block = np.zeros(64, dtype=np.int64)
        block[ZIGZAG] = zz
        fields[ci][by, bx] = block
    return [f.reshape(f.shape[0], f.shape[1], 8, 8) for f in fields]


def _parse(data: bytes) -> _Parsed:
    if data[:2] != b"\xff\xd8":
        raise JpegDecodeError("SOI", "missing start-of-image marker")
    pos = 2
    qtables, huff = {}, {}
    frame = None
    fields = None
    entropy_bytes = 0
    while True:
        if pos + 2 > len(data) or data[pos] != 0xFF:
            raise JpegDecodeError("marker", f"expected marker at byte {pos}")
        marker = data[pos + 1]
        pos += 2
        if marker == 0xFF:
            pos -= 1
            continue
        if marker == EOI:
            break
        if marker == DQT:
            payload, pos = _read_segment(data, pos, "DQT")
            i = 0
            while i < len(payload):
                pq, tq = payload[i] >> 4, payload[i] & 15
                n = 64 * (2 if pq else 1)
                values = payload[i + 1 : i + 1 + n]
                if len(values) != n:
                    raise JpegDecodeError("DQT", "truncated quantization table")
                zz = np.frombuffer(values, dtype=">u2" if pq else np.uint8).astype(np.int64)
                table = np.zeros(64, dtype=np.int64)
                table[ZIGZAG] = zz
                qtables[tq] = table.reshape(8, 8)
                i += 1 + n
        elif marker == SOF0:
            payload, pos = _read_segment(data, pos, "SOF0")
            if len(payload) < 6:
                raise JpegDecodeError("SOF0", "truncated frame header")
            precision, height, width, nf = struct.unpack(">BHHB", payload[:6])
            if precision != 8 or nf != 3 or len(payload) != 6 + 3 * nf:
                raise JpegDecodeError("SOF0", f"unsupported frame (precision {precision}, {nf} components)")
            comps = []
            for k in range(nf):
                cid, hv, tq = payload[6 + 3 * k : 9 + 3 * k]
                comps.append((cid, hv >> 4, hv & 15, tq))
            if height == 0 or width == 0:
                raise JpegDecodeError("SOF0", "zero image dimension")
            frame = (height, width, comps)
        elif 0xC1 <= marker <= 0xCF and marker not in (DHT, 0xC8, 0xCC):
            raise JpegDecodeError(f"SOF{marker - 0xC0}", "only baseline sequential JPEG is supported")
        elif marker == DHT:
            payload, pos = _read_segment(data, pos, "DHT")
            huff.update(_decode_tables(payload))
        elif marker == DRI:
            payload, pos = _read_segment(data, pos, "DRI")
            if struct.unpack(">H", payload[:2])[0] != 0:
                raise JpegDecodeError("DRI", "restart intervals are not supported")
        elif marker == SOS:
            payload, pos = _read_segment(data, pos, "SOS")
            if frame is None:
                raise JpegDecodeError("SOS", "scan before frame header")
            ns = payload[0]
            if ns != len(frame[2]):
                raise JpegDecodeError("SOS", "non-interleaved multi-scan images are not supported")
            scan_tables = [(payload[2 + 2 * k] >> 4, payload[2 + 2 * k] & 15) for k in range(ns)]
            raw, pos = _entropy_segment(data, pos)
            entropy_bytes = len(raw)
            fields = _decode_scan(raw, frame[2], scan_tables, huff, frame[0], frame[1])
        elif 0xE0 <= marker <= 0xEF or marker == COM:
            _, pos = _read_segment(data, pos, f"APP{marker - 0xE0}" if marker != COM else "COM")
        else:
            raise JpegDecodeError("marker", f"unexpected marker 0x{marker:02X}")
    if frame is None or fields is None:
        raise JpegDecodeError("EOI", "stream ended without frame and scan")
    height, width, comps = frame
    for c in comps:
        if c[3] not in qtables:
            raise JpegDecodeError("DQT", f"missing quantization table {c[3]}")
    return _Parsed(height, width, comps, qtables, fields, entropy_bytes)


def _layout(parsed: _Parsed) -> tuple[QuantTables, bool]:
    sampling = [(c[1], c[2]) for c in parsed.components]
    if sampling == [(1, 1)] * 3:
        subsample = False
    elif sampling == [(2, 2), (1, 1), (1, 1)]:
        subsample = True
    else:
        raise JpegDecodeError("SOF0", f"unsupported sampling factors {sampling}")
    tq = [c[3] for c in parsed.components]
    if tq[1] != tq[2]:
        raise JpegDecodeError("DQT", "chroma components must share a quantization table")
    tables = QuantTables(0, parsed.qtables[tq[0]], parsed.qtables[tq[1]])
    return tables, subsample


def decode_coefficients(bs) -> tuple[list, QuantTables, bool, tuple[int, int]]:
    """Entropy-decode to integer block fields (Y, U, V), tables, chroma mode and size."""
    data = bs.data if isinstance(bs, JpegBitstream) else bytes(bs)
    parsed = _parse(data)
    tables, subsample = _layout(parsed)
    return parsed.fields, tables, subsample, (parsed.height, parsed.width)


def reconstruct(bs) -> np.ndarray:
    """Decoded RGB before any clamping or rounding; equals the proxy's hard-rounding output."""
    fields, tables, subsample, size = decode_coefficients(bs)
    with ad.no_grad():
        rgb = inverse_transform([f.astype(np.float64) for f in fields], tables, size, subsample)
    return rgb.value


# 13-bit fixed-point constants of the integer inverse DCT used by 8-bit decoders.
_CONST_BITS, _PASS1_BITS = 13, 2
_F0298, _F0390, _F0541, _F0765 = 2446, 3196, 4433, 6270
_F0899, _F1175, _F1501, _F1847 = 7373, 9633, 12299, 15137
_F1961, _F2053, _F2562, _F3072 = 16069, 16819, 20995, 25172


def _descale(x, n: int):
    return (x + (1 << (n - 1))) >> n


def _idct_1d(c, shift: int):
    """Integer 8-point inverse DCT of the list ``c``, each output descaled by ``shift`` bits."""
    z1 = (c[2] + c[6]) * _F0541
    tmp2 = z1 - c[6] * _F1847
    tmp3 = z1 + c[2] * _F0765
    tmp0 = (c[0] + c[4]) << _CONST_BITS
    tmp1 = (c[0] - c[4]) << _CONST_BITS
    tmp10, tmp13 = tmp0 + tmp3, tmp0 - tmp3
    tmp11, tmp12 = tmp1 + tmp2, tmp1 - tmp2

    o0, o1, o2, o3 = c[7], c[5], c[3], c[1]
    z1, z2, z3, z4 = o0 + o3, o1 + o2, o0 + o2, o1 + o3
    z5 = (z3 + z4) * _F1175
    z1, z2 = z1 * -_F0899, z2 * -_F2562
    z3, z4 = z3 * -_F1961 + z5, z4 * -_F0390 + z5
    o0 = o0 * _F0298 + z1 + z3
    o1 = o1 * _F2053 + z2 + z4
    o2 = o2 * _F3072 + z2 + z3
    o3 = o3 * _F1501 + z1 + z4

    out = [tmp10 + o3, tmp11 + o2, tmp12 + o1, tmp13 + o0, tmp13 - o0, tmp12 - o1, tmp11 - o2, tmp10 - o3]
    return [_descale(v, shift) for v in out]


def idct_islow(blocks: np.ndarray) -> np.ndarray:
    """Integer inverse DCT of dequantized blocks (..., 8, 8) to 8-bit samples.

    Reproduces the accurate integer IDCT of common 8-bit decoders, including
    the 10-bit wraparound of their range-limit table.
    """
    b = np.asarray(blocks, dtype=np.int64)
    cols = _idct_1d([b[..., k, :] for k in range(8)], _CONST_BITS - _PASS1_BITS)
    work = np.stack(cols, axis=-2)
    rows = _idct_1d([work[..., k] for k in range(8)], _CONST_BITS + _PASS1_BITS + 3)
    m = np.stack(rows, axis=-1) & 1023
    m = np.where(m >= 512, m - 1024, m)
    return np.clip(m + 128, 0, 255)


def _blocks_to_plane(blocks: np.ndarray) -> np.ndarray:
    nby, nbx = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nby * 8, nbx * 8)


def _fancy_upsample(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Integer 2x2 triangle-filter upsampling with the usual 8/7 rounding biases.

    Same weights as the proxy's bilinear upsampler (3/4 near, 1/4 far sample),
    evaluated on 8-bit samples with integer rounding.
    """
    ch, cw = (out_h + 1) // 2, (out_w + 1) // 2
    p = plane[:ch, :cw]
    up = np.vstack([p[:1], p[:-1]])
    down = np.vstack([p[1:], p[-1:]])
    colsum = np.empty((2 * ch, cw), dtype=np.int64)
    colsum[0::2] = 3 * p + up
    colsum[1::2] = 3 * p + down
    left = np.hstack([colsum[:, :1], colsum[:, :-1]])
    right = np.hstack([colsum[:, 1:], colsum[:, -1:]])
    out = np.empty((2 * ch, 2 * cw), dtype=np.int64)
    out[:, 0::2] = (3 * colsum + left + 8) >> 4
    out[:, 1::2] = (3 * colsum + right + 7) >> 4
    return out[:out_h, :out_w]


def _ycc_to_rgb8(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    """JFIF YCbCr to RGB with 16-bit fixed-point coefficients, as 8-bit decoders do."""
    cbx, crx = cb - 128, cr - 128
    half = 1 << 15
    r = y + ((91881 * crx + half) >> 16)
    g = y + ((-22554 * cbx - 46802 * crx + half) >> 16)
    b = y + ((116130 * cbx + half) >> 16)
    return np.clip(np.stack([r, g, b]), 0, 255).astype(np.uint8)


def decode_uint8(bs) -> np.ndarray:
    """Decode to 8-bit planar RGB (3, H, W).

    Each component is range-limited to 8 bits right after the inverse DCT,
    before chroma upsampling and colour conversion.
    """
    fields, tables, subsample, (h, w) = decode_coefficients(bs)
    planes = [
        _blocks_to_plane(idct_islow(f.astype(np.int64) * tables.for_channel(ch).astype(np.int64)))
        for ch, f in enumerate(fields)
    ]
    y = planes[0][:h, :w]
    if subsample:
        cb, cr = (_fancy_upsample(p, h, w) for p in planes[1:])
    else:
        cb, cr = (p[:h, :w] for p in planes[1:])
    return _ycc_to_rgb8(y, cb, cr)


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(rgb) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def decode(bs) -> np.ndarray:
    """Decode to planar RGB (3, H, W) in [0, 1] at 8-bit sample precision."""
    return decode_uint8(bs).astype(np.float64) / 255.0


def measure_bpp(img, q: int, subsample: bool = True, image_id: str | None = None) -> RateRecord:
    bs = encode(img, q, subsample)
    return RateRecord(8 * len(bs.data), 8 * bs.entropy_bytes, bs.height * bs.width, q, image_id)
