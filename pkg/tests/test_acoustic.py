import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sonoct.acoustic import hu_to_acoustic, local_std
from sonoct.dicom import make_phantom

hu_values = st.floats(-1024, 4000, allow_nan=False)


def test_water():
    m = hu_to_acoustic(np.zeros((3, 3)))
    np.testing.assert_array_equal(m.density, 1000.0)
    np.testing.assert_allclose(m.speed, 1540.1, rtol=1e-12)
    np.testing.assert_allclose(m.impedance, 1.5401e6, rtol=1e-12)
    np.testing.assert_array_equal(m.attenuation, 0.54)


def test_air():
    m = hu_to_acoustic(np.full((3, 3), -1000.0))
    np.testing.assert_array_equal(m.density, 1.2)
    np.testing.assert_array_equal(m.attenuation, 41.0)
    np.testing.assert_allclose(m.speed, 331.1 + 1.209 * 1.2, rtol=1e-12)


@pytest.mark.parametrize("hu,att", [(-901.0, 41.0), (-900.0, 0.48), (-31.0, 0.48), (-30.0, 0.54),
                                    (300.0, 0.54), (300.5, 6.9)])
def test_attenuation_branches(hu, att):
    assert hu_to_acoustic(np.full((1, 1), hu)).attenuation[0, 0] == att


def test_bone_speed():
    m = hu_to_acoustic(np.full((2, 2), 700.0))
    np.testing.assert_array_equal(m.speed, 2800.0)
    np.testing.assert_array_equal(m.density, 1700.0)


def test_soft_tissue_density_cap_on_speed():
    # density beyond 1100 no longer raises soft-tissue speed
    a = hu_to_acoustic(np.full((1, 1), 150.0)).speed
    b = hu_to_acoustic(np.full((1, 1), 250.0)).speed
    assert a[0, 0] == b[0, 0] == pytest.approx(331.1 + 1.209 * 1100)


def test_echogenicity_is_local_std():
    hu = np.random.default_rng(0).normal(0, 20, size=(6, 6))
    m = hu_to_acoustic(hu)
    pad = np.pad(hu, 1, mode="reflect")
    ref = np.array([[pad[i:i + 3, j:j + 3].std() for j in range(6)] for i in range(6)])
    np.testing.assert_allclose(local_std(hu), ref, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(m.echogenicity, np.clip(ref / 100.0, 0, 1), atol=1e-12)


def test_spacing_from_slice():
    s = make_phantom("layered", 32, 32, 0)
    assert hu_to_acoustic(s).spacing_mm == s.pixel_spacing_mm


def test_shape_mismatch_rejected():
    m = hu_to_acoustic(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        m.with_(speed=np.zeros((3, 4)))


@given(arrays(np.float64, (5, 6), elements=hu_values))
def test_invariants(hu):
    m = hu_to_acoustic(hu)
    assert (m.density >= 1.2).all()
    assert ((m.speed >= 300) & (m.speed <= 4500)).all()
    np.testing.assert_allclose(m.impedance, m.density * m.speed, rtol=1e-9)
    assert (m.attenuation >= 0).all()
    assert ((m.echogenicity >= 0) & (m.echogenicity <= 1)).all()


@given(st.lists(st.floats(-1024, 300, allow_nan=False), min_size=2, max_size=30))
def test_monotone_below_bone(values):
    v = np.sort(np.array(values))[None, :]
    m = hu_to_acoustic(v)
    assert (np.diff(m.density[0]) >= 0).all()
    assert (np.diff(m.impedance[0]) >= 0).all()


@given(hu_values)
def test_constant_slice(h):
    m = hu_to_acoustic(np.full((4, 5), h))
    for name in ("density", "speed", "impedance", "attenuation"):
        arr = getattr(m, name)
        assert (arr == arr[0, 0]).all()
    np.testing.assert_array_equal(m.echogenicity, 0.0)


@pytest.mark.parametrize("seed", range(4))
def test_phantom_tissues_differ_in_echogenicity(seed):
    sl = make_phantom("abdomen-like", 256, 256, seed)
    echo = hu_to_acoustic(sl).echogenicity
    hu = sl.hu
    # regions picked by HU alone; medians keep the blended edges from dominating
    water = np.abs(hu) < 5
    fat = np.abs(hu + 90) < 10
    soft = np.abs(hu - 40) < 20
    assert min(water.sum(), fat.sum(), soft.sum()) > 100
    assert np.median(echo[water]) < np.median(echo[fat]) < np.median(echo[soft])
