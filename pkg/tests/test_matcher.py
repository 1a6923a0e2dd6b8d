import math

import numpy as np
import pytest

from geoproto import gape, matcher
from geoproto import numerics as nx
from geoproto.gape import GridSpec, PrototypeSet
from geoproto.numerics import DiffTensor, relative_error


def test_score_single_prototype_is_cosine():
    rng = np.random.default_rng(0)
    feat = DiffTensor(rng.normal(size=(4, 3, 3)))
    p = DiffTensor(rng.normal(size=(1, 4)))
    s = matcher.score(feat, p).values
    f = feat.values.reshape(4, -1)
    ref = (p.values @ f) / (np.linalg.norm(p.values) * np.linalg.norm(f, axis=0))
    np.testing.assert_allclose(s.ravel(), ref.ravel(), atol=1e-12)


def test_score_two_prototype_example():
    feat = DiffTensor(np.array([1.0, 0.0]).reshape(2, 1, 1))
    protos = DiffTensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    s = matcher.score(feat, protos).item()
    assert s == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert s == pytest.approx(0.7311, abs=1e-4)


def test_score_needs_prototypes():
    with pytest.raises(nx.ContractError):
        matcher.score(DiffTensor(np.ones((2, 1, 1))), DiffTensor(np.zeros((0, 2))))


def test_classify_ties_to_background():
    feat = DiffTensor(np.ones((2, 2, 2)))
    ps = PrototypeSet(np.array([0]), DiffTensor([[1.0, 1.0]]), np.array([1]), DiffTensor([[1.0, 1.0]]))
    out = matcher.classify(feat, ps)
    assert not out.mask.any()
    with pytest.raises(gape.DegenerateSupportError):
        matcher.classify(feat, PrototypeSet(np.array([0]), DiffTensor([[1.0, 1.0]]), np.array([]), None))


def test_seg_loss_example_and_limits():
    S = DiffTensor(np.zeros((2, 2)))
    gt = np.eye(2, dtype=bool)
    sc = matcher.ScoreMaps(S, S, np.zeros((2, 2), bool))
    assert matcher.seg_loss(sc, gt).item() == pytest.approx(math.log(2))
    good = matcher.ScoreMaps(DiffTensor(gt * 1.0), DiffTensor(~gt * 1.0), gt)
    assert matcher.seg_loss(good, gt, 20.0).item() == pytest.approx(math.log1p(math.exp(-20)))


def test_total_loss_weighting():
    b = matcher.total_loss(1.0, 0.5, 2.0, 0.3)
    assert b.total.item() == pytest.approx(2.1)
    assert matcher.total_loss(1.0, 0.5, 2.0, 0.0).total.item() == 1.5
    with pytest.raises(ValueError):
        matcher.total_loss(1.0, 0.5, 2.0, -0.1)


def test_align_loss_degenerate_query_is_zero():
    rng = np.random.default_rng(1)
    f = DiffTensor(rng.normal(size=(3, 4, 4)))
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    out = matcher.align_loss(f, m, f, np.zeros((4, 4), bool), GridSpec(2, 4, 4))
    assert out.item() == 0.0


def test_query_reweight_validation():
    feat = DiffTensor(np.ones((2, 2, 2)))
    ps = PrototypeSet(np.array([0]), DiffTensor([[1.0, 1.0]]), np.array([1]), DiffTensor([[1.0, 0.0]]))
    with pytest.raises(gape.ConfigError):
        matcher.query_reweight(feat, ps, None, 0.0)
    with pytest.raises(nx.ContractError):
        matcher.query_reweight(feat, ps, None, 1.0)


def test_match_and_loss_gradients():
    rng = np.random.default_rng(2)
    grid = GridSpec(2, 6, 6)
    for _ in range(20):
        fs = nx.param(rng.normal(size=(3, 6, 6)))
        fq = nx.param(rng.normal(size=(3, 6, 6)))
        ms = np.zeros((6, 6), bool)
        ms[1:5, 1:4] = True
        gq = np.zeros((6, 6), bool)
        gq[2:6, 2:5] = True

        def f(_t):
            ps = gape.pool_prototypes(fs, ms, grid)
            sc = matcher.classify(fq, ps)
            return matcher.seg_loss(sc, gq, 5.0) + matcher.align_loss(fs, ms, fq, gq, grid, 5.0)

        for leaf in (fs, fq):
            fs.grad = fq.grad = None
            nx.backward(f(None))
            num = nx.finite_diff_grad(f, leaf, 1e-4)
            assert relative_error(leaf.grad, num).max() < 1e-3
