import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sonoct.grid import (
    BoundsError,
    ComplexGrid,
    GridError,
    InvalidKernelError,
    Kernel2D,
    RealGrid,
    conv2d,
    extract_patch,
    pad_reflect,
    read_c64,
    read_pfm,
    write_c64,
    write_pfm,
    write_png16,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def grids(min_side=1, max_side=9):
    return st.tuples(st.integers(min_side, max_side), st.integers(min_side, max_side)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite)
    )


def brute_conv_zero(x, k):
    rows, cols = x.shape
    kr, kc = k.shape
    cr, cc = kr // 2, kc // 2
    out = np.zeros_like(x)
    for i in range(rows):
        for j in range(cols):
            s = 0.0
            for a in range(kr):
                for b in range(kc):
                    ii, jj = i - a + cr, j - b + cc
                    if 0 <= ii < rows and 0 <= jj < cols:
                        s += k[a, b] * x[ii, jj]
            out[i, j] = s
    return out


def mirror(i, n):
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


class TestTypes:
    def test_real_grid_rejects_nonfinite(self):
        with pytest.raises(GridError):
            RealGrid(np.array([[1.0, np.nan]]))

    def test_real_grid_rejects_empty(self):
        with pytest.raises(GridError):
            RealGrid(np.zeros((0, 3)))

    def test_complex_grid_parts(self):
        g = ComplexGrid.from_parts(np.ones((2, 3)), 2 * np.ones((2, 3)))
        assert g.shape == (2, 3)
        np.testing.assert_array_equal(g.im, 2.0)

    def test_kernel_needs_odd_dims(self):
        with pytest.raises(InvalidKernelError):
            Kernel2D(np.ones((2, 3)))

    def test_kernel_impulse(self):
        assert Kernel2D.impulse().values.tolist() == [[1.0]]


class TestConv2d:
    @pytest.mark.parametrize("boundary", ["reflect", "zero"])
    def test_identity_kernel(self, rng, boundary):
        x = rng.normal(size=(7, 5))
        np.testing.assert_array_equal(conv2d(x, [[1.0]], boundary), x)

    def test_zero_kernel(self, rng):
        x = rng.normal(size=(6, 6))
        np.testing.assert_array_equal(conv2d(x, np.zeros((3, 3))), 0.0)

    def test_matches_brute_force_zero_boundary(self, rng, backend, monkeypatch):
        from sonoct import _backend, grid

        monkeypatch.setattr(grid, "kernels", _backend.get(backend))
        x = rng.normal(size=(8, 8))
        k = rng.normal(size=(3, 3))
        np.testing.assert_allclose(conv2d(x, k, "zero"), brute_conv_zero(x, k), rtol=1e-12, atol=1e-12)

    def test_asymmetric_kernel_orientation(self):
        x = np.zeros((5, 5))
        x[2, 2] = 1.0
        k = np.arange(9.0).reshape(3, 3)
        # a centred impulse reproduces the kernel itself
        np.testing.assert_array_equal(conv2d(x, k, "zero")[1:4, 1:4], k)

    def test_reflect_boundary_matches_mirrored_oracle(self, rng):
        x = rng.normal(size=(6, 7))
        k = rng.normal(size=(5, 3))
        out = conv2d(x, k, "reflect")
        ref = np.zeros_like(x)
        for i in range(6):
            for j in range(7):
                ref[i, j] = sum(
                    k[a, b] * x[mirror(i - a + 2, 6), mirror(j - b + 1, 7)] for a in range(5) for b in range(3)
                )
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(InvalidKernelError):
            conv2d(np.ones((4, 4)), np.ones((2, 2)))

    def test_unknown_boundary(self):
        with pytest.raises(ValueError):
            conv2d(np.ones((4, 4)), np.ones((1, 1)), "wrap")

    @given(grids(3, 8), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
    def test_linearity(self, x, a, b, seed):
        r = np.random.default_rng(seed)
        y = r.normal(size=x.shape)
        k = r.normal(size=(3, 3))
        lhs = conv2d(a * x + b * y, k)
        rhs = a * conv2d(x, k) + b * conv2d(y, k)
        scale = max(1.0, np.abs(lhs).max(), np.abs(rhs).max())
        assert np.abs(lhs - rhs).max() <= 1e-10 * scale

    @given(grids(3, 8), st.integers(0, 2**31 - 1), st.sampled_from(["reflect", "zero"]))
    def test_symmetric_kernel_commutes_with_flip(self, x, seed, boundary):
        k = np.random.default_rng(seed).normal(size=(3, 3))
        k = k + k[:, ::-1]
        lhs = conv2d(x[:, ::-1], k, boundary)
        rhs = conv2d(x, k, boundary)[:, ::-1]
        scale = max(1.0, np.abs(rhs).max())
        assert np.abs(lhs - rhs).max() <= 1e-12 * scale


class TestPatchAndPad:
    def test_full_frame_patch(self):
        g = np.arange(16.0).reshape(4, 4)
        np.testing.assert_array_equal(extract_patch(g, 0, 0, 4, 4), g)

    def test_index_arithmetic(self):
        g = np.arange(16.0).reshape(4, 4)
        assert extract_patch(g, 1, 1, 2, 2).ravel().tolist() == [5, 6, 9, 10]

    def test_out_of_bounds(self):
        with pytest.raises(BoundsError):
            extract_patch(np.zeros((4, 4)), 3, 3, 2, 2)

    def test_patch_is_a_copy(self):
        g = np.zeros((4, 4))
        p = extract_patch(g, 0, 0, 2, 2)
        p[:] = 7
        assert g.sum() == 0

    def test_pad_zero_margin(self, rng):
        g = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(pad_reflect(g, 0), g)

    def test_pad_row_mirror(self):
        assert pad_reflect(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), 1)[1].tolist() == [2, 1, 2, 3, 2]

    def test_pad_matches_index_oracle(self, rng):
        g = rng.normal(size=(5, 5))
        p = pad_reflect(g, 2)
        for i in range(9):
            for j in range(9):
                assert p[i, j] == g[mirror(i - 2, 5), mirror(j - 2, 5)]

    def test_pad_margin_too_large(self):
        with pytest.raises(BoundsError):
            pad_reflect(np.zeros((3, 5)), 3)

    @given(grids(2, 9), st.data())
    def test_patch_of_pad_recovers_grid(self, g, data):
        m = data.draw(st.integers(0, min(g.shape) - 1))
        p = pad_reflect(g, m)
        assert p.shape == (g.shape[0] + 2 * m, g.shape[1] + 2 * m)
        np.testing.assert_array_equal(extract_patch(p, m, m, *g.shape), g)


class TestSerialization:
    def test_pfm_round_trip(self, tmp_path, rng):
        g = rng.normal(size=(5, 7)).astype(np.float32).astype(np.float64)
        write_pfm(tmp_path / "a.pfm", g)
        np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), g)

    def test_pfm_header(self, tmp_path):
        write_pfm(tmp_path / "a.pfm", np.zeros((2, 3)))
        assert (tmp_path / "a.pfm").read_bytes().startswith(b"Pf\n3 2\n-1.0\n")

    def test_pfm_rejects_other_magic(self, tmp_path):
        (tmp_path / "a.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
        with pytest.raises(GridError):
            read_pfm(tmp_path / "a.pfm")

    def test_c64_round_trip(self, tmp_path, rng):
        z = (rng.normal(size=(4, 6)) + 1j * rng.normal(size=(4, 6))).astype(np.complex64).astype(np.complex128)
        write_c64(tmp_path / "iq.c64", z, spacing_mm=(0.5, 0.25))
        back, meta = read_c64(tmp_path / "iq.c64")
        np.testing.assert_array_equal(back, z)
        side = json.loads((tmp_path / "iq.c64.json").read_text())
        assert side["dtype"] == "c64-interleaved-f32"
        assert (side["rows"], side["cols"]) == (4, 6)
        assert side["spacing_mm"] == [0.5, 0.25]

    def test_c64_interleaving(self, tmp_path):
        write_c64(tmp_path / "iq.c64", np.array([[1 + 2j, 3 + 4j]]))
        raw = np.frombuffer((tmp_path / "iq.c64").read_bytes(), dtype="<f4")
        assert raw.tolist() == [1, 2, 3, 4]

    def test_png16(self, tmp_path):
        from PIL import Image

        write_png16(tmp_path / "a.png", np.array([[0.0, 0.5], [1.0, 0.25]]))
        img = np.array(Image.open(tmp_path / "a.png"))
        assert img.dtype == np.uint16
        assert img.max() == 65535 and img.min() == 0
