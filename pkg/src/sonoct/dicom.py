"""Minimal CT DICOM reader/writer and synthetic Hounsfield phantoms.

Only uncompressed, single-frame, little-endian files (explicit or implicit
VR) are understood.  The writer exists so tests and demos can produce
fixtures without third-party DICOM tooling.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from sonoct.grid import RealGrid

log = logging.getLogger(__name__)

HU_MIN = -1024.0
HU_MAX = 4000.0
DEFAULT_SPACING_MM = (0.7, 0.7)

EXPLICIT_LE = "1.2.840.10008.1.2.1"
IMPLICIT_LE = "1.2.840.10008.1.2"
SUPPORTED_SYNTAXES = (EXPLICIT_LE, IMPLICIT_LE)

# VRs whose explicit-VR header carries 2 reserved bytes and a 4-byte length
_LONG_VRS = {b"OB", b"OW", b"OF", b"OD", b"OL", b"OV", b"SQ", b"UT", b"UN", b"UC", b"UR", b"SV", b"UV"}

# implicit-VR lookup for the tags this module interprets
_IMPLICIT_VR = {
    (0x0002, 0x0010): "UI",
    (0x0028, 0x0010): "US",
    (0x0028, 0x0011): "US",
    (0x0028, 0x0100): "US",
    (0x0028, 0x0103): "US",
    (0x0028, 0x0030): "DS",
    (0x0028, 0x1052): "DS",
    (0x0028, 0x1053): "DS",
    (0x0028, 0x0002): "US",
    (0x0028, 0x0008): "IS",
    (0x7FE0, 0x0010): "OW",
}

TAG_ROWS = (0x0028, 0x0010)
TAG_COLS = (0x0028, 0x0011)
TAG_BITS_ALLOCATED = (0x0028, 0x0100)
TAG_PIXEL_REPRESENTATION = (0x0028, 0x0103)
TAG_PIXEL_SPACING = (0x0028, 0x0030)
TAG_INTERCEPT = (0x0028, 0x1052)
TAG_SLOPE = (0x0028, 0x1053)
TAG_SAMPLES = (0x0028, 0x0002)
TAG_FRAMES = (0x0028, 0x0008)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)
TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)

_ITEM = (0xFFFE, 0xE000)
_ITEM_END = (0xFFFE, 0xE00D)
_SEQ_END = (0xFFFE, 0xE0DD)
_UNDEFINED = 0xFFFFFFFF


class DicomError(ValueError):
    """Base class for everything the reader rejects."""


class DicomFormatError(DicomError):
    pass


class UnsupportedSyntaxError(DicomError):
    pass


class LengthMismatchError(DicomError):
    pass


class InvalidRescaleError(ValueError):
    pass


class PhantomSizeError(ValueError):
    pass


@dataclass(frozen=True)
class DicomHeader:
    rows: int
    cols: int
    bits_allocated: int
    pixel_signed: bool
    rescale_slope: float
    rescale_intercept: float
    pixel_spacing_mm: Tuple[float, float]
    transfer_syntax: str


@dataclass(frozen=True)
class HounsfieldSlice:
    grid: RealGrid
    pixel_spacing_mm: Tuple[float, float]
    source_id: str

    def __post_init__(self):
        if min(self.pixel_spacing_mm) <= 0:
            raise ValueError("pixel spacing must be positive")
        v = self.grid.values
        if v.min() < HU_MIN or v.max() > HU_MAX:
            raise ValueError("HU values outside [-1024, 4000]")

    @property
    def hu(self) -> np.ndarray:
        return self.grid.values


# ---------------------------------------------------------------------------
# reading


class _Reader:
    def __init__(self, data: bytes, pos: int, explicit: bool):
        self.data = data
        self.pos = pos
        self.explicit = explicit

    def need(self, n: int) -> None:
        if self.pos + n > len(self.data):
            raise LengthMismatchError(f"element runs past end of data at byte {self.pos}")

    def tag(self) -> Tuple[int, int]:
        self.need(4)
        g, e = struct.unpack_from("<HH", self.data, self.pos)
        self.pos += 4
        return g, e

    def element(self):
        """Read one element header; returns (tag, vr, length)."""
        tag = self.tag()
        if tag[0] == 0xFFFE:
            self.need(4)
            (length,) = struct.unpack_from("<I", self.data, self.pos)
            self.pos += 4
            return tag, None, length
        if self.explicit:
            self.need(2)
            vr = self.data[self.pos:self.pos + 2]
            if not (vr.isalpha() and vr.isupper()):
                raise DicomFormatError(f"bad VR {vr!r} for tag {tag[0]:04X},{tag[1]:04X}")
            self.pos += 2
            if vr in _LONG_VRS:
                self.need(6)
                (length,) = struct.unpack_from("<I", self.data, self.pos + 2)
                self.pos += 6
            else:
                self.need(2)
                (length,) = struct.unpack_from("<H", self.data, self.pos)
                self.pos += 2
            return tag, vr.decode("ascii"), length
        self.need(4)
        (length,) = struct.unpack_from("<I", self.data, self.pos)
        self.pos += 4
        return tag, _IMPLICIT_VR.get(tag, "UN"), length

    def value(self, length: int) -> bytes:
        self.need(length)
        v = self.data[self.pos:self.pos + length]
        self.pos += length
        return v

    def skip_undefined(self) -> None:
        """Skip a sequence (or item) of undefined length up to its delimiter."""
        while True:
            tag, vr, length = self.element()
            if tag == _SEQ_END or tag == _ITEM_END:
                return
            if length == _UNDEFINED:
                self.skip_undefined()
            else:
                self.value(length)


def _read_elements(data: bytes, pos: int, explicit: bool, stop_group: Optional[int] = None) -> Tuple[Dict, int]:
    r = _Reader(data, pos, explicit)
    out = {}
    while r.pos < len(data):
        if stop_group is not None:
            r.need(2)
            (group,) = struct.unpack_from("<H", data, r.pos)
            if group != stop_group:
                break
        tag, vr, length = r.element()
        if length == _UNDEFINED:
            if tag == TAG_PIXEL_DATA:
                raise UnsupportedSyntaxError("encapsulated (compressed) pixel data")
            r.skip_undefined()
            continue
        out[tag] = (vr, r.value(length))
    return out, r.pos


def _text(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").strip("\x00 ").strip()


def _us(elements, tag, default=None):
    if tag not in elements:
        if default is None:
            raise DicomFormatError(f"missing required tag ({tag[0]:04X},{tag[1]:04X})")
        return default
    raw = elements[tag][1]
    if len(raw) < 2:
        raise DicomFormatError(f"tag ({tag[0]:04X},{tag[1]:04X}) too short for US")
    return struct.unpack_from("<H", raw)[0]


def _ds(elements, tag):
    if tag not in elements:
        return None
    try:
        return [float(v) for v in _text(elements[tag][1]).split("\\") if v.strip()]
    except ValueError as exc:
        raise DicomFormatError(f"unparseable decimal string in ({tag[0]:04X},{tag[1]:04X})") from exc


def parse_dicom(data: bytes) -> Tuple[DicomHeader, np.ndarray]:
    """Parse ``data`` into a header and the raw (un-rescaled) pixel grid."""
    data = bytes(data)
    syntax = None
    pos = 0
    if len(data) >= 132 and data[128:132] == b"DICM":
        pos = 132
        try:
            meta, pos = _read_elements(data, pos, explicit=True, stop_group=0x0002)
        except LengthMismatchError as exc:
            raise DicomFormatError(f"truncated file meta group: {exc}") from exc
        if TAG_TRANSFER_SYNTAX not in meta:
            raise DicomFormatError("file meta group lacks a transfer syntax")
        syntax = _text(meta[TAG_TRANSFER_SYNTAX][1])
    else:
        # no preamble: sniff explicit vs implicit from the first element
        if len(data) < 8:
            raise DicomFormatError("missing 'DICM' magic and too short for an element stream")
        vr = data[4:6]
        syntax = EXPLICIT_LE if (vr.isalpha() and vr.isupper()) else IMPLICIT_LE
    if syntax not in SUPPORTED_SYNTAXES:
        raise UnsupportedSyntaxError(f"transfer syntax {syntax} is not supported")
    try:
        elements, _ = _read_elements(data, pos, explicit=(syntax == EXPLICIT_LE))
    except LengthMismatchError:
        raise
    except (struct.error, UnicodeDecodeError) as exc:
        raise DicomFormatError(str(exc)) from exc

    if TAG_PIXEL_DATA not in elements:
        raise DicomFormatError("no pixel data element")
    rows = _us(elements, TAG_ROWS)
    cols = _us(elements, TAG_COLS)
    bits = _us(elements, TAG_BITS_ALLOCATED)
    signed = _us(elements, TAG_PIXEL_REPRESENTATION, default=0) == 1
    if _us(elements, TAG_SAMPLES, default=1) != 1:
        raise DicomFormatError("only single-sample (greyscale) images are supported")
    if TAG_FRAMES in elements and _text(elements[TAG_FRAMES][1]) not in ("", "1"):
        raise DicomFormatError("multi-frame images are not supported")
    if bits not in (8, 16):
        raise DicomFormatError(f"bits allocated must be 8 or 16, got {bits}")
    if rows < 1 or cols < 1:
        raise DicomFormatError("image has no pixels")

    slope = _ds(elements, TAG_SLOPE)
    intercept = _ds(elements, TAG_INTERCEPT)
    if slope is None or intercept is None:
        log.warning("rescale slope/intercept missing; defaulting to 1/0")
    spacing = _ds(elements, TAG_PIXEL_SPACING)
    if not spacing or len(spacing) != 2:
        log.warning("pixel spacing missing; defaulting to %s mm", DEFAULT_SPACING_MM)
        spacing = DEFAULT_SPACING_MM

    header = DicomHeader(
        rows=rows,
        cols=cols,
        bits_allocated=bits,
        pixel_signed=signed,
        rescale_slope=slope[0] if slope else 1.0,
        rescale_intercept=intercept[0] if intercept else 0.0,
        pixel_spacing_mm=(float(spacing[0]), float(spacing[1])),
        transfer_syntax=syntax,
    )
    raw = elements[TAG_PIXEL_DATA][1]
    nbytes = rows * cols * (bits // 8)
    # OW values are padded to even length; tolerate exactly that
    if len(raw) != nbytes and not (len(raw) == nbytes + 1 and nbytes % 2):
        raise LengthMismatchError(f"pixel data holds {len(raw)} bytes, header implies {nbytes}")
    dtype = {(8, False): "u1", (8, True): "i1", (16, False): "<u2", (16, True): "<i2"}[(bits, signed)]
    pixels = np.frombuffer(raw[:nbytes], dtype=dtype).reshape(rows, cols).astype(np.float64)
    return header, pixels


def apply_rescale(raw, slope: float, intercept: float, spacing_mm=DEFAULT_SPACING_MM, source_id: str = "") -> HounsfieldSlice:
    if slope == 0:
        raise InvalidRescaleError("rescale slope must be non-zero")
    hu = np.clip(slope * np.asarray(raw, dtype=np.float64) + intercept, HU_MIN, HU_MAX)
    return HounsfieldSlice(RealGrid(hu, tuple(spacing_mm)), tuple(spacing_mm), source_id)


def read_slice(data: bytes, source_id: str = "dicom") -> HounsfieldSlice:
    header, raw = parse_dicom(data)
    return apply_rescale(raw, header.rescale_slope, header.rescale_intercept, header.pixel_spacing_mm, source_id)


# ---------------------------------------------------------------------------
# writing (fixture generator)


def _pad_even(b: bytes, pad: bytes = b" ") -> bytes:
    return b + pad if len(b) % 2 else b


def _explicit(tag, vr: str, value: bytes) -> bytes:
    head = struct.pack("<HH", *tag) + vr.encode("ascii")
    if vr.encode("ascii") in _LONG_VRS:
        return head + b"\x00\x00" + struct.pack("<I", len(value)) + value
    return head + struct.pack("<H", len(value)) + value


def _implicit(tag, vr: str, value: bytes) -> bytes:
    return struct.pack("<HHI", tag[0], tag[1], len(value)) + value


def write_dicom(
    pixels: np.ndarray,
    slope: Optional[float] = 1.0,
    intercept: Optional[float] = -1024.0,
    spacing_mm: Optional[Tuple[float, float]] = (0.7, 0.7),
    signed: bool = False,
    bits: int = 16,
    syntax: str = EXPLICIT_LE,
    preamble: bool = True,
    extra: Tuple[Tuple[Tuple[int, int], str, bytes], ...] = (),
) -> bytes:
    """Serialize ``pixels`` as a minimal CT image.

    ``None`` for slope/intercept/spacing omits the tag.  ``extra`` inserts
    additional ``(tag, vr, value)`` elements (sorted in with the rest).
    """
    pixels = np.asarray(pixels)
    rows, cols = pixels.shape
    dtype = {(8, False): "u1", (8, True): "i1", (16, False): "<u2", (16, True): "<i2"}[(bits, signed)]
    payload = _pad_even(pixels.astype(dtype).tobytes(), b"\x00")
    elems = [
        ((0x0008, 0x0060), "CS", _pad_even(b"CT")),
        (TAG_SAMPLES, "US", struct.pack("<H", 1)),
        (TAG_ROWS, "US", struct.pack("<H", rows)),
        (TAG_COLS, "US", struct.pack("<H", cols)),
        (TAG_BITS_ALLOCATED, "US", struct.pack("<H", bits)),
        ((0x0028, 0x0101), "US", struct.pack("<H", bits)),
        (TAG_PIXEL_REPRESENTATION, "US", struct.pack("<H", 1 if signed else 0)),
    ]
    if spacing_mm is not None:
        elems.append((TAG_PIXEL_SPACING, "DS", _pad_even(f"{spacing_mm[0]!r}\\{spacing_mm[1]!r}".encode())))
    if intercept is not None:
        elems.append((TAG_INTERCEPT, "DS", _pad_even(repr(float(intercept)).encode())))
    if slope is not None:
        elems.append((TAG_SLOPE, "DS", _pad_even(repr(float(slope)).encode())))
    elems.extend(extra)
    elems.append((TAG_PIXEL_DATA, "OW" if bits == 16 else "OB", payload))
    elems.sort(key=lambda e: e[0])
    enc = _explicit if syntax == EXPLICIT_LE else _implicit
    body = b"".join(enc(t, vr, v) for t, vr, v in elems)
    if not preamble:
        return body
    uid = _pad_even(syntax.encode("ascii"), b"\x00")
    meta_elems = [
        ((0x0002, 0x0001), "OB", b"\x00\x01"),
        (TAG_TRANSFER_SYNTAX, "UI", uid),
    ]
    meta_body = b"".join(_explicit(t, vr, v) for t, vr, v in meta_elems)
    group_len = _explicit((0x0002, 0x0000), "UL", struct.pack("<I", len(meta_body)))
    return b"\x00" * 128 + b"DICM" + group_len + meta_body + body


# ---------------------------------------------------------------------------
# phantoms

TISSUE_HU = {"air": -1000.0, "fat": -90.0, "water": 0.0, "soft": 40.0, "bone": 700.0}
# micro-structure amplitude per tissue; through the echogenicity map this makes
# fluid near-anechoic, fat hypoechoic and parenchyma the brightest scatterer
TISSUE_TEXTURE_HU = {"air": 0.0, "fat": 6.0, "water": 2.0, "soft": 16.0, "bone": 30.0}
PHANTOM_KINDS = ("layered", "circles", "abdomen-like")
PHANTOM_SPACING_MM = (0.35, 0.35)


def _smooth_step(d: np.ndarray, width: float) -> np.ndarray:
    """0 -> 1 transition over ``width`` pixels centred on d == 0."""
    return 0.5 * (1.0 + np.tanh(d / max(width, 1e-6)))


def _texture(rng: np.random.Generator, rows: int, cols: int, std: float) -> np.ndarray:
    # mildly correlated CT-like noise: white noise through a 3x3 box average
    n = rng.normal(size=(rows + 2, cols + 2))
    t = sum(n[a:a + rows, b:b + cols] for a in range(3) for b in range(3)) / 3.0
    return std * t


def make_phantom(kind: str, rows: int, cols: int, seed: int, texture_scale: float = 1.0,
                 spacing_mm: Tuple[float, float] = PHANTOM_SPACING_MM) -> HounsfieldSlice:
    """Synthetic HU slice with smooth-edged tissue regions and CT-like texture.

    Each tissue carries its own texture amplitude (``TISSUE_TEXTURE_HU`` times
    ``texture_scale``), blended across the smooth region edges like the HU values.
    """
    if rows < 32 or cols < 32:
        raise PhantomSizeError(f"phantoms need rows, cols >= 32, got {rows}x{cols}")
    if kind not in PHANTOM_KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    edge = 1.5
    hu = np.empty((rows, cols))
    tex = np.empty((rows, cols))

    def fill(name):
        hu[:] = TISSUE_HU[name]
        tex[:] = TISSUE_TEXTURE_HU[name]

    def blend(name, w):
        hu[:] = hu * (1 - w) + TISSUE_HU[name] * w
        tex[:] = tex * (1 - w) + TISSUE_TEXTURE_HU[name] * w

    if kind == "layered":
        fill("fat")
        order = ["soft", "water", "soft", "fat", "soft", "bone"]
        n_layers = int(rng.integers(3, 6))
        bounds = np.sort(rng.uniform(0.12, 0.92, n_layers)) * rows
        tilt = rng.uniform(-0.15, 0.15, n_layers)
        for i, (b, t) in enumerate(zip(bounds, tilt)):
            surface = b + t * (xx - cols / 2) + 2.0 * np.sin(xx / cols * 2 * np.pi * rng.uniform(0.5, 2))
            blend(order[i % len(order)], _smooth_step(yy - surface, edge))
    elif kind == "circles":
        fill("soft")
        choices = ["fat", "water", "bone"]
        placed = []
        n_circ = int(rng.integers(3, 7))
        for _ in range(200):
            if len(placed) == n_circ:
                break
            r = rng.uniform(0.08, 0.18) * min(rows, cols)
            cy, cx = rng.uniform(r + 2, rows - r - 2), rng.uniform(r + 2, cols - r - 2)
            # keep discs apart so every region stays visible
            if all(np.hypot(cy - py, cx - px) > r + pr + 4 for py, px, pr in placed):
                placed.append((cy, cx, r))
        for i, (cy, cx, r) in enumerate(placed):
            blend(choices[i % len(choices)], _smooth_step(r - np.hypot(yy - cy, xx - cx), edge))
    else:
        # view through the skin: a wide, shallow body outline whose surface sits
        # just above row 0, so every scan line enters through tissue as it would
        # with a probe coupled to the skin
        fill("air")
        ry, rx = rows * rng.uniform(1.2, 1.6), cols * rng.uniform(1.8, 2.4)
        above = rows * rng.uniform(0.07, 0.12)
        cy, cx = ry - above, cols * rng.uniform(0.4, 0.6)
        blend("fat", _smooth_step(1 - np.hypot((yy - cy) / ry, (xx - cx) / rx), edge / ry))
        # subcutaneous fat visible below the top row
        fat = above + rows * rng.uniform(0.06, 0.12)
        iy, ix = ry - fat, rx - fat
        inner = _smooth_step(1 - np.hypot((yy - cy) / iy, (xx - cx) / ix), edge / iy)
        blend("soft", inner)
        for _ in range(int(rng.integers(2, 5))):
            r = rng.uniform(0.05, 0.12) * min(rows, cols)
            oy, ox = rng.uniform(0.3, 0.85) * rows, rng.uniform(0.15, 0.85) * cols
            blend("water", _smooth_step(r - np.hypot(yy - oy, xx - ox), edge) * inner)
        r = rng.uniform(0.05, 0.09) * min(rows, cols)
        by, bx = rng.uniform(0.6, 0.9) * rows, cols / 2 + rng.uniform(-0.25, 0.25) * cols
        blend("bone", _smooth_step(r - np.hypot(yy - by, xx - bx), edge) * inner)
    hu = hu + tex * _texture(rng, rows, cols, texture_scale)
    hu = np.clip(hu, HU_MIN, HU_MAX)
    return HounsfieldSlice(RealGrid(hu, spacing_mm), spacing_mm, f"phantom:{kind}:{rows}x{cols}:seed={seed}")
