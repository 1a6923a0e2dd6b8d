import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoproto import gape
from geoproto import numerics as nx
from geoproto import osb
from geoproto.gape import GridSpec
from geoproto.numerics import DiffTensor
from gradcheck import assert_grad


def test_grid_edges_cover_and_partition():
    for G, h in ((8, 16), (3, 10), (4, 4), (5, 7)):
        g = GridSpec(G, h, h)
        sizes = g.cell_sizes()
        assert sizes.sum() == h * h
        assert g.row_edges[0] == 0 and g.row_edges[-1] == h
    with pytest.raises(gape.ConfigError):
        GridSpec(0, 4, 4)


def test_pool_full_mask_constant_features():
    feat = DiffTensor(np.full((3, 8, 8), 2.0))
    ps = gape.pool_prototypes(feat, np.ones((8, 8), bool), GridSpec(2, 8, 8))
    assert ps.n_fg == 4 and ps.n_bg == 0 and ps.bg is None
    np.testing.assert_allclose(ps.fg.values, 2.0)


def test_pool_matches_per_cell_masked_mean():
    rng = np.random.default_rng(0)
    feat = DiffTensor(rng.normal(size=(4, 12, 12)))
    mask = rng.random((12, 12)) < 0.5
    grid = GridSpec(3, 12, 12, tau_occ=0.05)
    ps = gape.pool_prototypes(feat, mask, grid)
    cell = grid.cell_index()
    for i, c in enumerate(ps.fg_cells):
        sel = (cell == c) & mask
        np.testing.assert_allclose(ps.fg.values[i], feat.values[:, sel].mean(axis=1))
    for i, c in enumerate(ps.bg_cells):
        sel = (cell == c) & ~mask
        np.testing.assert_allclose(ps.bg.values[i], feat.values[:, sel].mean(axis=1))


def test_occupancy_threshold_and_degenerate_support():
    grid = GridSpec(2, 8, 8, tau_occ=0.25)
    m = np.zeros((8, 8), bool)
    m[0, 0] = True  # 1 / 16 occupancy in cell 0
    with pytest.raises(gape.DegenerateSupportError):
        gape.pool_prototypes(DiffTensor(np.ones((1, 8, 8))), m, grid)
    m[:2, :2] = True  # 4 / 16
    ps = gape.pool_prototypes(DiffTensor(np.ones((1, 8, 8))), m, grid)
    assert list(ps.fg_cells) == [0]


def test_expected_bin_examples():
    grid = GridSpec(1, 2, 2)
    probs = np.zeros((3, 2, 2))
    probs[2] = 1.0
    d = gape.expected_bin(DiffTensor(probs), grid, np.array([0]))
    assert d.values[0] == pytest.approx(2.0)
    probs = np.full((3, 2, 2), 1 / 3)
    assert gape.expected_bin(DiffTensor(probs), grid, np.array([0])).values[0] == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31))
def test_expected_bin_in_range(K, seed):
    rng = np.random.default_rng(seed)
    probs = nx.softmax(DiffTensor(rng.normal(size=(K, 6, 6)) * 3), axis=0)
    grid = GridSpec(3, 6, 6)
    d = gape.expected_bin(probs, grid, np.arange(9)).values
    assert (d >= -1e-12).all() and (d <= K - 1 + 1e-12).all()


def test_zero_mlp_gives_zero_offset_and_identity_fusions():
    mlp = gape.GapeMlpParams.zeros(5)
    e = gape.geometric_embedding(3.0, 10, mlp)
    assert e.shape == (5,) and not e.values.any()
    p = DiffTensor(np.random.default_rng(1).normal(size=(4, 5)))
    e4 = gape.geometric_embedding(np.arange(4.0), 10, mlp)
    np.testing.assert_array_equal(gape.fuse(p, e4, "additive").values, p.values)
    gated = gape.fuse(p, e4, "scale_gate").values
    np.testing.assert_allclose(gated, p.values * (1 + np.log(2)), rtol=1e-15)


def test_mlp_init_bound():
    rng = np.random.default_rng(2)
    for C, H in ((16, 16), (32, 16), (8, 4)):
        mlp = gape.GapeMlpParams.init(rng, C, H)
        e = gape.geometric_embedding(np.linspace(0, 9, 30), 10, mlp).values
        assert np.abs(e).max() <= H * 1e-8


def test_concat_proj_and_unknown_mode():
    rng = np.random.default_rng(3)
    proj = gape.ProjParams.init(rng, 3)
    p = DiffTensor(rng.normal(size=(2, 3)))
    e = DiffTensor(rng.normal(size=(2, 3)))
    out = gape.fuse(p, e, "concat_proj", proj).values
    ref = np.concatenate([p.values, e.values], axis=1) @ proj.W.values.T
    np.testing.assert_allclose(out, ref)
    one = gape.fuse(p[0], e[0], "concat_proj", proj).values
    np.testing.assert_allclose(one, ref[0])
    with pytest.raises(gape.ConfigError):
        gape.fuse(p, e, "concat_proj")
    with pytest.raises(gape.ConfigError):
        gape.fuse(p, e, "multiply")


def test_geometric_embedding_needs_two_bins():
    with pytest.raises(ValueError):
        gape.geometric_embedding(0.0, 1, gape.GapeMlpParams.zeros(2))


def test_background_variant_distance():
    m = np.zeros((6, 6), bool)
    m[2:4, 2:4] = True
    d = gape.background_distance(m)
    assert d[m].max() == 0 and d.max() == 1.0


def make_setup(rng, C=3, K=4, h=8):
    feat = nx.param(rng.normal(size=(C, h, h)))
    mask = np.zeros((h, h), bool)
    mask[2:7, 1:6] = True
    grid = GridSpec(2, h, h)
    params = osb.OsbParams.init(rng, C, K)
    return feat, mask, grid, params


@pytest.mark.parametrize("mode", gape.FUSION_MODES)
def test_enrichment_gradients(mode):
    rng = np.random.default_rng(4)
    for _ in range(20):
        feat, mask, grid, params = make_setup(rng)
        mlp = gape.GapeMlpParams.init(rng, 3, 5, scale=0.5)
        mlp.b1.values[:] = rng.normal(size=5) * 0.3
        proj = gape.ProjParams.init(rng, 3)
        w = rng.normal(size=3)

        def f(_t):
            ps = gape.pool_prototypes(feat, mask, grid)
            bp = osb.predict_bins(feat, params)
            ps = gape.enrich(ps, bp, grid, mlp, mode, proj)
            return (ps.fg * w).sum()

        everything = (feat, mlp.W1, mlp.W2, mlp.b1, mlp.b2, *params.kernels, *params.biases)
        for leaf in (feat, mlp.W1, mlp.W2, mlp.b1, params.biases[2]):
            assert_grad(f, leaf, everything)
