import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geoproto import geometry as geo
from geoproto.numerics import EmptyRegionError, ShapeError


def square_fixture():
    m = np.zeros((9, 9), bool)
    m[2:7, 2:7] = True
    return m


def random_masks(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        p = rng.uniform(0.2, 0.9)
        m = rng.random((size, size)) < p
        if i % 3 == 0:  # blocky masks as well as speckle
            m = np.kron(rng.random((size // 4, size // 4)) < p, np.ones((4, 4), bool))
        if m.all():
            m[0, 0] = False
        yield m


def test_edt_single_pixel():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    d = geo.edt(m)
    assert d[2, 2] == 1.0
    assert d.sum() == 1.0


def test_edt_square_rings():
    d = geo.edt(square_fixture())
    ref = geo.edt_bruteforce(square_fixture())
    np.testing.assert_allclose(d, ref, atol=1e-9)
    assert set(np.unique(d[square_fixture()])) == {1.0, 2.0, 3.0}
    assert d[4, 4] == 3.0 and d[2, 4] == 1.0 and d[3, 4] == 2.0


def test_edt_no_background():
    with pytest.raises(geo.NoBackgroundError):
        geo.edt(np.ones((4, 4), bool))


def test_edt_empty_foreground():
    assert not geo.edt(np.zeros((4, 4), bool)).any()


def test_edt_matches_bruteforce_random():
    for m in random_masks(100):
        np.testing.assert_allclose(geo.edt(m), geo.edt_bruteforce(m), atol=1e-9)


def test_edt_lipschitz_on_neighbours():
    for m in random_masks(30, seed=1):
        d = geo.edt(m)
        both = m[1:, :] & m[:-1, :]
        assert (np.abs(d[1:, :] - d[:-1, :])[both] <= 1 + 1e-12).all()
        both = m[:, 1:] & m[:, :-1]
        assert (np.abs(d[:, 1:] - d[:, :-1])[both] <= 1 + 1e-12).all()


def test_quantise_square_rings():
    m = square_fixture()
    bm = geo.quantise(geo.edt(m), m, 3)
    d = geo.edt(m)
    assert (bm.bins[d == 1] == 0).all() and (bm.bins[d == 2] == 1).all() and (bm.bins[d == 3] == 2).all()
    assert (bm.bins[~m] == -1).all()


def test_quantise_flat_field_all_top_bin():
    m = np.zeros((5, 9), bool)
    m[2, 1:8] = True  # one-pixel-wide line
    bm = geo.bin_map(m, 6)
    assert (bm.bins[m] == 5).all()


def test_quantise_errors():
    with pytest.raises(EmptyRegionError):
        geo.quantise(np.zeros((3, 3)), np.zeros((3, 3), bool), 4)
    with pytest.raises(ValueError):
        geo.quantise(np.ones((3, 3)), np.ones((3, 3), bool), 1)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0.01, 100)),
       st.integers(2, 20), st.floats(1e-3, 1e3))
def test_quantise_monotone_and_scale_invariant(field, K, s):
    mask = np.ones(field.shape, bool)
    a = geo.quantise(field, mask, K).bins
    b = geo.quantise(field * s, mask, K).bins
    np.testing.assert_array_equal(a, b)
    order = np.argsort(field, axis=None, kind="stable")
    assert (np.diff(a.ravel()[order]) >= 0).all()
    assert a.max() <= K - 1 and a.min() >= 0


def test_bin_histogram_examples():
    m = square_fixture()
    h = geo.bin_histogram(geo.bin_map(m, 3))
    np.testing.assert_allclose(h, [16 / 25, 8 / 25, 1 / 25], atol=1e-15)
    line = np.zeros((5, 9), bool)
    line[2, 1:8] = True
    np.testing.assert_array_equal(geo.bin_histogram(geo.bin_map(line, 4)), [0, 0, 0, 1])
    for mm in random_masks(10, seed=2):
        if mm.any():
            assert geo.bin_histogram(geo.bin_map(mm, 7)).sum() == pytest.approx(1.0, abs=1e-12)


def test_bin_histogram_empty():
    with pytest.raises(EmptyRegionError):
        geo.bin_histogram(geo.BinMap(np.full((3, 3), -1), 4))


def test_downsample_mask():
    m = np.random.default_rng(3).random((8, 8)) < 0.5
    np.testing.assert_array_equal(geo.downsample_mask(m, 8, 8), m)
    assert geo.downsample_mask(np.ones((2, 2), bool), 1, 1)[0, 0]
    tie = np.array([[1, 1], [0, 0]], bool)
    assert geo.downsample_mask(tie, 1, 1)[0, 0]
    assert not geo.downsample_mask(np.array([[1, 0], [0, 0]], bool), 1, 1)[0, 0]
    with pytest.raises(ShapeError):
        geo.downsample_mask(np.ones((6, 6), bool), 4, 4)


def test_binmap_gray_levels():
    bm = geo.bin_map(square_fixture(), 3)
    g = geo.binmap_to_gray(bm)
    assert g[0, 0] == 0 and g[2, 4] == 85 and g[3, 4] == 170 and g[4, 4] == 255
