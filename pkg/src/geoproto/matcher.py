"""Prototype-to-query matching, segmentation and alignment losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .gape import (ConfigError, DegenerateSupportError, GridSpec, PrototypeSet,
                   expected_bin_map, pool_prototypes)
from .numerics import ContractError, DiffTensor, ShapeError

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 20.0
DEFAULT_LAMBDA_GEO = 0.3


@dataclass
class ScoreMaps:
    S_fg: DiffTensor  # h x w
    S_bg: DiffTensor
    mask: np.ndarray  # S_fg > S_bg, ties go to background


@dataclass
class LossBundle:
    L_seg: DiffTensor
    L_align: DiffTensor
    L_osb: DiffTensor
    total: DiffTensor
    lambda_geo: float

    def values(self) -> dict[str, float]:
        return {"L_seg": self.L_seg.item(), "L_align": self.L_align.item(),
                "L_OSB": self.L_osb.item(), "total": self.total.item()}


def _flat(feat: DiffTensor) -> DiffTensor:
    if feat.ndim != 3:
        raise ShapeError(f"expected a C x h x w feature map, got {feat.shape}")
    return feat.reshape(feat.shape[0], -1)


def _weighted_score(cos: DiffTensor, logits: DiffTensor, hw) -> DiffTensor:
    w = nx.softmax(logits, axis=0)
    return (w * cos).sum(axis=0).reshape(hw)


def score(feat_q: DiffTensor, protos: DiffTensor) -> DiffTensor:
    """S(x) = sum_i softmax_i(cos_i(x)) * cos_i(x) over the prototype rows."""
    if protos is None or protos.shape[0] == 0:
        raise ContractError("score needs at least one prototype")
    if protos.ndim == 1:
        protos = protos.reshape(1, -1)
    cos = nx.cosine_matrix(protos, _flat(feat_q))
    return _weighted_score(cos, cos, feat_q.shape[1:])


def _scores_to_maps(S_fg: DiffTensor, S_bg: DiffTensor) -> ScoreMaps:
    return ScoreMaps(S_fg, S_bg, S_fg.values > S_bg.values)


def classify(feat_q: DiffTensor, protos: PrototypeSet) -> ScoreMaps:
    if protos.bg is None or protos.n_bg == 0:
        raise DegenerateSupportError("no background prototype to score against")
    return _scores_to_maps(score(feat_q, protos.fg), score(feat_q, protos.bg))


def query_reweight(feat_q: DiffTensor, protos: PrototypeSet, binpred_q, tau_gate: float) -> ScoreMaps:
    """Foreground scoring with a geometric affinity gate on each prototype's cosine.

    The gate exp(-|g(x) - d_i / (K-1)| / tau) compares the query pixel's
    normalised expected bin with the prototype's mean bin level. It is
    applied before the softmax only; the gate itself carries no gradient.
    """
    if not tau_gate > 0:
        raise ConfigError(f"tau_gate must be positive, got {tau_gate}")
    if protos.fg_meandist is None:
        raise ContractError("query re-weighting needs enriched prototypes with mean bins")
    if protos.bg is None or protos.n_bg == 0:
        raise DegenerateSupportError("no background prototype to score against")
    K = binpred_q.K
    g = expected_bin_map(binpred_q.probs).values.reshape(1, -1) / (K - 1)
    levels = protos.fg_meandist.values.reshape(-1, 1) / (K - 1)
    gate = np.exp(-np.abs(g - levels) / tau_gate)
    cos = nx.cosine_matrix(protos.fg, _flat(feat_q))
    S_fg = _weighted_score(cos, cos * gate, feat_q.shape[1:])
    return _scores_to_maps(S_fg, score(feat_q, protos.bg))


def seg_loss(scores: ScoreMaps, gt: np.ndarray, alpha: float = DEFAULT_ALPHA) -> DiffTensor:
    """Mean pixelwise cross-entropy of softmax(alpha * [S_bg, S_fg]) against ``gt``."""
    gt = np.asarray(gt, dtype=bool)
    if gt.shape != scores.S_fg.shape:
        raise ShapeError(f"gt {gt.shape} vs scores {scores.S_fg.shape}")
    logits = nx.stack([scores.S_bg, scores.S_fg], axis=0) * alpha
    logp = nx.log_softmax(logits, axis=0)
    target = np.stack([~gt, gt]).astype(np.float64)
    return (logp * target).sum() * (-1.0 / gt.size)


def align_loss(feat_s: DiffTensor, mask_s: np.ndarray, feat_q: DiffTensor, pred_q: np.ndarray,
               grid: GridSpec, alpha: float = DEFAULT_ALPHA) -> DiffTensor:
    """Segment the support with raw prototypes pooled from the query under its predicted mask."""
    try:
        protos_q = pool_prototypes(feat_q, pred_q, grid)
        scores = classify(feat_s, protos_q)
    except DegenerateSupportError:
        log.debug("alignment skipped: degenerate query prediction")
        return DiffTensor(0.0)
    return seg_loss(scores, mask_s, alpha)


def total_loss(L_seg, L_align, L_osb, lambda_geo: float = DEFAULT_LAMBDA_GEO) -> LossBundle:
    if lambda_geo < 0:
        raise ValueError("lambda_geo must be nonnegative")
    L_seg, L_align, L_osb = (x if isinstance(x, DiffTensor) else DiffTensor(x)
                             for x in (L_seg, L_align, L_osb))
    total = L_seg + L_align
    if lambda_geo != 0:
        total = total + L_osb * lambda_geo
    return LossBundle(L_seg, L_align, L_osb, total, lambda_geo)
