"""Synthetic shape episodes with appearance-only domain shift.

Masks and intensities come from separate random streams derived from the
episode seed, so a given seed produces the same geometry in every domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import downsample_mask
from .gape import GridSpec, DegenerateSupportError, pool_prototypes
from .numerics import DiffTensor

FAMILY_KINDS = ("compact_ellipse", "annulus", "irregular_blob")

_STREAM_SHAPE = 0
_STREAM_RENDER = 1
_STREAM_PICK = 2


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShapeFamily:
    kind: str
    size_range: tuple[float, float] = (10.0, 20.0)
    # eccentricity for ellipses, wall thickness (px) for annuli, lobe amplitude for blobs
    shape_range: tuple[float, float] = (0.0, 0.8)
    image_size: int = 64

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ValueError(f"unknown shape family {self.kind!r}")
        if self.size_range[0] > self.size_range[1] or self.shape_range[0] > self.shape_range[1]:
            raise ValueError("ranges must be (low, high)")


DEFAULT_FAMILIES = {
    "compact_ellipse": ShapeFamily("compact_ellipse", (10.0, 20.0), (0.0, 0.8)),
    "annulus": ShapeFamily("annulus", (16.0, 26.0), (7.0, 10.0)),
    "irregular_blob": ShapeFamily("irregular_blob", (12.0, 20.0), (0.15, 0.35)),
}


@dataclass(frozen=True)
class DomainSpec:
    id: str
    fg_mean: float
    fg_std: float
    bg_mean: float
    bg_std: float
    noise_amp: float = 0.0
    corr_len: int = 1
    gamma: float = 1.0
    invert: bool = False


DOMAINS = {
    "source": DomainSpec("source", fg_mean=0.70, fg_std=0.05, bg_mean=0.30, bg_std=0.05,
                         noise_amp=0.06, corr_len=1, gamma=1.0),
    "target": DomainSpec("target", fg_mean=0.62, fg_std=0.05, bg_mean=0.36, bg_std=0.05,
                         noise_amp=0.10, corr_len=3, gamma=1.6, invert=True),
}


@dataclass
class Episode:
    support: list[tuple[DiffTensor, np.ndarray]]
    query: tuple[DiffTensor, np.ndarray]
    family: str
    domain: str
    seed: int
    split: str = "train"


def _rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFF, stream, *extra])


def _grid(n: int):
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _draw(family: ShapeFamily, rng: np.random.Generator) -> np.ndarray:
    n = family.image_size
    yy, xx = _grid(n)
    size = rng.uniform(*family.size_range)
    param = rng.uniform(*family.shape_range)
    margin = 2.0
    lo, hi = size + margin, n - size - margin
    if lo >= hi:
        cy = cx = n / 2.0
    else:
        cy, cx = rng.uniform(lo, hi, size=2)
    dy, dx = yy - cy, xx - cx
    if family.kind == "compact_ellipse":
        theta = rng.uniform(0.0, np.pi)
        a = size
        b = size * np.sqrt(max(0.0, 1.0 - param ** 2))
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        return (u / a) ** 2 + (v / max(b, 1e-9)) ** 2 <= 1.0
    r = np.hypot(dy, dx)
    if family.kind == "annulus":
        return (r <= size) & (r > size - param)
    # star-shaped blob: radius modulated by a few random lobes
    ang = np.arctan2(dy, dx)
    radius = np.ones_like(r)
    for j in (2, 3, 5):
        radius += param / j * 1.5 * np.cos(j * ang + rng.uniform(0, 2 * np.pi)) * rng.uniform(0.5, 1.0)
    return r <= size * radius


def _valid(mask: np.ndarray, kind: str) -> bool:
    if mask.sum() < 16:
        return False
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        return False
    four = ndimage.generate_binary_structure(2, 1)
    _, n_comp = ndimage.label(mask, structure=four)
    if n_comp != 1:
        return False
    if kind == "annulus":
        # background 4-components: outside plus exactly one hole
        _, n_bg = ndimage.label(~mask, structure=four)
        return n_bg == 2
    return True


def sample_shape(family: ShapeFamily, rng: np.random.Generator, max_tries: int = 100) -> np.ndarray:
    for _ in range(max_tries):
        mask = _draw(family, rng)
        if _valid(mask, family.kind):
            return mask
    raise GenerationError(f"{family.kind}: {max_tries} consecutive draws violated the family constraints")


def _correlated_noise(rng: np.random.Generator, shape, corr_len: int) -> np.ndarray:
    white = rng.standard_normal(shape)
    if corr_len <= 1:
        return white
    blurred = ndimage.uniform_filter(white, size=corr_len, mode="wrap")
    return blurred / blurred.std()


def render(mask: np.ndarray, domain: DomainSpec, rng: np.random.Generator) -> DiffTensor:
    """Intensity image (1 x H x W, values in [0, 1]) for a mask under a domain."""
    m = np.asarray(mask, dtype=bool)
    fg = rng.normal(domain.fg_mean, domain.fg_std)
    bg = rng.normal(domain.bg_mean, domain.bg_std)
    noise = _correlated_noise(rng, m.shape, domain.corr_len)
    img = np.where(m, fg, bg) + domain.noise_amp * noise
    img = np.clip(img, 0.0, 1.0)
    if domain.gamma != 1.0:
        img = img ** domain.gamma
    if domain.invert:
        img = 1.0 - img
    return DiffTensor(np.clip(img, 0.0, 1.0)[None])


def _support_ok(mask: np.ndarray, grid: GridSpec) -> bool:
    small = downsample_mask(mask, grid.h, grid.w)
    if not small.any() or small.all():
        return False
    probe = DiffTensor(np.ones((1, grid.h, grid.w)))
    try:
        protos = pool_prototypes(probe, small, grid)
    except DegenerateSupportError:
        return False
    return protos.n_bg > 0


def sample_episode(families: dict[str, ShapeFamily], domain_support: DomainSpec,
                   domain_query: DomainSpec, seed: int, grid: GridSpec,
                   split: str = "train", shots: int = 1, max_resample: int = 20) -> Episode:
    """One 1-way episode; all randomness derives from ``seed``."""
    names = sorted(families)
    if not names:
        raise GenerationError("no shape families configured")
    for attempt in range(max_resample + 1):
        pick = _rng(seed, _STREAM_PICK, attempt)
        name = names[int(pick.integers(len(names)))]
        fam = families[name]
        shape_rng = _rng(seed, _STREAM_SHAPE, attempt)
        masks = [sample_shape(fam, shape_rng) for _ in range(shots + 1)]
        if not all(_support_ok(m, grid) for m in masks):
            continue
        render_rng = _rng(seed, _STREAM_RENDER, attempt)
        support = [(render(m, domain_support, render_rng), m) for m in masks[:shots]]
        query = (render(masks[-1], domain_query, render_rng), masks[-1])
        domain = domain_query.id
        return Episode(support, query, name, domain, seed, split)
    raise GenerationError(f"seed {seed}: no usable support after {max_resample} resamples")


def episode_seed(master_seed: int, index: int, stream: int = 0) -> int:
    """Deterministic per-episode seed from (master seed, stream, index)."""
    ss = np.random.SeedSequence([int(master_seed), int(stream), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
