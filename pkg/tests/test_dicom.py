import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sonoct.dicom import (
    DEFAULT_SPACING_MM,
    EXPLICIT_LE,
    HU_MAX,
    HU_MIN,
    IMPLICIT_LE,
    PHANTOM_KINDS,
    TISSUE_HU,
    DicomError,
    DicomFormatError,
    InvalidRescaleError,
    LengthMismatchError,
    PhantomSizeError,
    UnsupportedSyntaxError,
    apply_rescale,
    make_phantom,
    parse_dicom,
    read_slice,
    write_dicom,
)


class TestParse:
    def test_water_fixture(self):
        data = write_dicom(np.full((16, 16), 1024), slope=1.0, intercept=-1024.0)
        s = read_slice(data)
        np.testing.assert_array_equal(s.hu, 0.0)

    def test_zero_raw_is_air_floor(self):
        s = read_slice(write_dicom(np.zeros((16, 16)), slope=1.0, intercept=-1024.0))
        np.testing.assert_array_equal(s.hu, -1024.0)

    @pytest.mark.parametrize("syntax", [EXPLICIT_LE, IMPLICIT_LE])
    @pytest.mark.parametrize("preamble", [True, False])
    def test_round_trip_signed16(self, syntax, preamble):
        raw = np.random.default_rng(3).integers(-32768, 32768, size=(64, 64)).astype(np.int16)
        header, pixels = parse_dicom(write_dicom(raw, signed=True, syntax=syntax, preamble=preamble,
                                                 spacing_mm=(0.5, 0.625), slope=2.0, intercept=-7.0))
        np.testing.assert_array_equal(pixels, raw)
        assert header.transfer_syntax == syntax
        assert (header.rows, header.cols, header.bits_allocated, header.pixel_signed) == (64, 64, 16, True)
        assert header.pixel_spacing_mm == (0.5, 0.625)
        assert (header.rescale_slope, header.rescale_intercept) == (2.0, -7.0)

    @pytest.mark.parametrize("signed", [True, False])
    def test_round_trip_8bit_odd_length(self, signed):
        lo, hi = (-128, 128) if signed else (0, 256)
        raw = np.random.default_rng(1).integers(lo, hi, size=(5, 7))
        _, pixels = parse_dicom(write_dicom(raw, bits=8, signed=signed))
        np.testing.assert_array_equal(pixels, raw)

    def test_missing_rescale_and_spacing_default(self, caplog):
        header, _ = parse_dicom(write_dicom(np.zeros((4, 4)), slope=None, intercept=None, spacing_mm=None))
        assert (header.rescale_slope, header.rescale_intercept) == (1.0, 0.0)
        assert header.pixel_spacing_mm == DEFAULT_SPACING_MM
        assert "defaulting" in caplog.text

    def test_unknown_tags_are_skipped(self):
        extra = (((0x0010, 0x0010), "PN", b"DOE^JOHN"), ((0x0009, 0x1001), "UN", b"\x01\x02\x03\x04"))
        raw = np.arange(12).reshape(3, 4)
        _, pixels = parse_dicom(write_dicom(raw, extra=extra))
        np.testing.assert_array_equal(pixels, raw)

    def test_compressed_syntax_rejected(self):
        data = bytearray(write_dicom(np.zeros((4, 4))))
        i = data.index(EXPLICIT_LE.encode())
        # JPEG baseline UID has the same even-padded length as the explicit LE UID
        data[i:i + 20] = b"1.2.840.10008.1.2.4\x00"
        with pytest.raises(UnsupportedSyntaxError):
            parse_dicom(bytes(data))

    def test_garbage_rejected(self):
        with pytest.raises(DicomFormatError):
            parse_dicom(b"abc")

    def test_pixel_length_mismatch(self):
        data = write_dicom(np.zeros((4, 4)))
        # claim 5 rows for 4 rows of pixels
        i = data.index(struct.pack("<HH", 0x0028, 0x0010) + b"US")
        patched = data[:i + 8] + struct.pack("<H", 5) + data[i + 10:]
        with pytest.raises(LengthMismatchError):
            parse_dicom(patched)


def test_truncation_fuzz_every_prefix_errors_cleanly():
    data = write_dicom(np.random.default_rng(0).integers(0, 4096, size=(8, 8)))
    cuts = np.unique(np.linspace(0, len(data) - 1, 1000).astype(int))
    for n in cuts:
        with pytest.raises(DicomError):
            parse_dicom(data[:n])


@given(st.integers(1, 12), st.integers(1, 12), st.booleans(), st.sampled_from([EXPLICIT_LE, IMPLICIT_LE]),
       st.booleans(), st.integers(0, 2**31 - 1))
def test_round_trip_property(rows, cols, signed, syntax, preamble, seed):
    lo, hi = (-32768, 32768) if signed else (0, 65536)
    raw = np.random.default_rng(seed).integers(lo, hi, size=(rows, cols))
    header, pixels = parse_dicom(write_dicom(raw, signed=signed, syntax=syntax, preamble=preamble))
    np.testing.assert_array_equal(pixels, raw)
    assert (header.rows, header.cols, header.pixel_signed) == (rows, cols, signed)


class TestRescale:
    def test_identity(self):
        raw = np.array([[-5.0, 17.0]])
        np.testing.assert_array_equal(apply_rescale(raw, 1.0, 0.0).hu, raw)

    def test_affine(self):
        assert apply_rescale(np.array([[2000.0]]), 1.0, -1024.0).hu[0, 0] == 976.0

    def test_clamp(self):
        assert apply_rescale(np.array([[10000.0]]), 1.0, 0.0).hu[0, 0] == 4000.0

    def test_zero_slope(self):
        with pytest.raises(InvalidRescaleError):
            apply_rescale(np.zeros((2, 2)), 0.0, 0.0)


class TestPhantom:
    @pytest.mark.parametrize("kind", PHANTOM_KINDS)
    def test_deterministic(self, kind):
        a = make_phantom(kind, 64, 64, seed=7)
        b = make_phantom(kind, 64, 64, seed=7)
        np.testing.assert_array_equal(a.hu, b.hu)

    def test_seed_matters(self):
        assert not np.array_equal(make_phantom("layered", 64, 64, 1).hu, make_phantom("layered", 64, 64, 2).hu)

    def test_too_small(self):
        with pytest.raises(PhantomSizeError):
            make_phantom("layered", 16, 64, 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_circles_histogram_modes(self, seed):
        hu = make_phantom("circles", 128, 128, seed).hu
        hist, edges = np.histogram(hu, bins=np.arange(-1100, 1000, 10))
        hist = np.convolve(hist, np.ones(3) / 3, mode="same")
        centres = 0.5 * (edges[1:] + edges[:-1])
        # local maxima of the smoothed histogram above a 0.2% noise floor
        peaks = [centres[i] for i in range(1, len(hist) - 1)
                 if hist[i] >= hist[i - 1] and hist[i] >= hist[i + 1] and hist[i] > 0.002 * hu.size]
        modes = []
        for p in sorted(peaks):
            if not modes or p - modes[-1] >= 50:
                modes.append(p)
        assert len(modes) >= 3

    @pytest.mark.parametrize("kind", PHANTOM_KINDS)
    @pytest.mark.parametrize("seed", range(4))
    def test_at_least_three_tissues(self, kind, seed):
        hu = make_phantom(kind, 96, 96, seed).hu
        present = {name for name, v in TISSUE_HU.items() if np.mean(np.abs(hu - v) < 25) > 0.005}
        assert len(present) >= 3


@given(st.sampled_from(PHANTOM_KINDS), st.integers(32, 80), st.integers(32, 80), st.integers(0, 10**6))
def test_phantom_hu_range(kind, rows, cols, seed):
    hu = make_phantom(kind, rows, cols, seed).hu
    assert hu.shape == (rows, cols)
    assert HU_MIN <= hu.min() and hu.max() <= HU_MAX
