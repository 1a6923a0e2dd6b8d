"""Support/query bin-distribution statistics per shape family.

Pure geometry: episodes are sampled as in training, but only the masks are
used, at full image resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .episodes import DOMAINS, ShapeFamily, episode_seed, sample_episode
from .gape import GridSpec
from .geometry import bin_histogram, bin_map
from .metrics import bhattacharyya

STREAM_PRIOR = 3


@dataclass
class PriorReport:
    K: int
    support_hists: dict[str, np.ndarray]  # family -> n x K
    query_hists: dict[str, np.ndarray]
    within: dict[str, np.ndarray] = field(default_factory=dict)  # family -> n BCs
    cross: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    @property
    def families(self) -> list[str]:
        return list(self.support_hists)

    def mean_hist(self, family: str) -> np.ndarray:
        return np.vstack([self.support_hists[family], self.query_hists[family]]).mean(axis=0)

    def lower_half_mass(self, family: str) -> float:
        return float(self.mean_hist(family)[: self.K // 2].sum())

    def median_within(self) -> float:
        return float(np.median(np.concatenate(list(self.within.values()))))

    def median_cross(self) -> float:
        return float(np.median(np.concatenate(list(self.cross.values()))))


def validate_prior(families: dict[str, ShapeFamily], n: int, K: int, seed: int,
                   grid: GridSpec, domain: str = "source") -> PriorReport:
    """Sample ``n`` intra-domain episodes per family and compare bin histograms.

    Within-family BC pairs each support with its own query; cross-family BC
    pairs support i of one family with query i of another.
    """
    dom = DOMAINS[domain]
    sup, qry = {}, {}
    for fi, name in enumerate(sorted(families)):
        hs, hq = [], []
        for i in range(n):
            ep = sample_episode({name: families[name]}, dom, dom,
                                episode_seed(seed, fi * n + i, STREAM_PRIOR), grid)
            hs.append(bin_histogram(bin_map(ep.support[0][1], K)))
            hq.append(bin_histogram(bin_map(ep.query[1], K)))
        sup[name], qry[name] = np.array(hs), np.array(hq)
    rep = PriorReport(K, sup, qry)
    bc = lambda p, q: np.array([bhattacharyya(a, b) for a, b in zip(p, q)])
    for name in sup:
        rep.within[name] = bc(sup[name], qry[name])
    for a, b in permutations(sup, 2):
        rep.cross[(a, b)] = bc(sup[a], qry[b])
    return rep
