"""Ordinal shape branch: per-pixel bin logits from support features and their losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import he_kernel
from .geometry import BinMap
from .numerics import DiffTensor, EmptyRegionError, ShapeError

LOG_CLAMP = 1.0 - 1e-12


@dataclass
class OsbParams:
    kernels: list[DiffTensor]
    biases: list[DiffTensor]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, K: int) -> "OsbParams":
        ks = [
            nx.param(he_kernel(rng, channels, channels, 3), name="dec0.weight"),
            nx.param(he_kernel(rng, channels, channels, 3), name="dec1.weight"),
            nx.param(he_kernel(rng, K, channels, 1), name="head.weight"),
        ]
        bs = [nx.param(np.zeros(channels)), nx.param(np.zeros(channels)), nx.param(np.zeros(K))]
        return cls(ks, bs)

    @property
    def K(self) -> int:
        return self.kernels[-1].shape[0]

    def tensors(self) -> dict[str, DiffTensor]:
        names = ("dec0", "dec1", "head")
        out = {}
        for n, k, b in zip(names, self.kernels, self.biases):
            out[f"{n}.weight"] = k
            out[f"{n}.bias"] = b
        return out


@dataclass
class BinPrediction:
    logits: DiffTensor  # K x h x w
    probs: DiffTensor  # softmax over K
    hard: np.ndarray  # argmax over K, lowest index on ties

    @property
    def K(self) -> int:
        return self.logits.shape[0]


def prediction_from_logits(logits: DiffTensor) -> BinPrediction:
    probs = nx.softmax(logits, axis=0)
    hard = np.argmax(probs.values, axis=0)
    return BinPrediction(logits, probs, hard)


def decode(feat: DiffTensor, params: OsbParams) -> DiffTensor:
    x = nx.relu(nx.conv2d(feat, params.kernels[0], params.biases[0], padding=1))
    x = nx.relu(nx.conv2d(x, params.kernels[1], params.biases[1], padding=1))
    return nx.conv2d(x, params.kernels[2], params.biases[2])


def predict_bins(feat: DiffTensor, params: OsbParams) -> BinPrediction:
    return prediction_from_logits(decode(feat, params))


def _foreground(pred: BinPrediction, gt: BinMap) -> np.ndarray:
    if gt.bins.shape != pred.hard.shape:
        raise ShapeError(f"bin map {gt.bins.shape} vs prediction {pred.hard.shape}")
    if gt.K != pred.K:
        raise ShapeError(f"bin count mismatch: gt K={gt.K}, prediction K={pred.K}")
    fg = gt.bins >= 0
    if not fg.any():
        raise EmptyRegionError("ordinal loss needs a nonempty foreground")
    return fg


def loss_cls(pred: BinPrediction, gt: BinMap) -> DiffTensor:
    """Foreground-restricted cross-entropy scaled by 1 / (2 |fg|)."""
    fg = _foreground(pred, gt)
    beta = 1.0 / (2.0 * fg.sum())
    logp = nx.log_softmax(pred.logits, axis=0)
    onehot = np.zeros(pred.logits.shape)
    ys, xs = np.nonzero(fg)
    onehot[gt.bins[ys, xs], ys, xs] = 1.0
    return (logp * onehot).sum() * (-beta)


def loss_dist(pred: BinPrediction, gt: BinMap) -> DiffTensor:
    """Ordinal-gap weighted penalty -beta * sum |zhat - z| / K * log(1 - max p).

    The gap weight is a constant; gradient flows only through the log term.
    """
    fg = _foreground(pred, gt)
    beta = 1.0 / (2.0 * fg.sum())
    gap = np.where(fg, np.abs(pred.hard - gt.bins), 0) / pred.K
    pmax = nx.clamp_max(nx.max_along(pred.probs, axis=0), LOG_CLAMP)
    return (nx.log(1.0 - pmax) * gap).sum() * (-beta)


def loss_osb(pred: BinPrediction, gt: BinMap, lambda_dist: float = 1.0) -> DiffTensor:
    if lambda_dist < 0:
        raise ValueError("lambda_dist must be nonnegative")
    lc = loss_cls(pred, gt)
    if lambda_dist == 0:
        return lc
    return lc + loss_dist(pred, gt) * lambda_dist


def bin_mae(pred: BinPrediction, gt: BinMap) -> float:
    """Mean absolute bin error of the hard prediction over the foreground."""
    fg = _foreground(pred, gt)
    return float(np.abs(pred.hard[fg] - gt.bins[fg]).mean())
